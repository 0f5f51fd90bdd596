use crate::rng::Pcg32;
use crate::tensor::Tensor;

/// `(fan_in, fan_out)`: last/first extent for matrices, scaled by the
/// receptive field for conv kernels (`c_out×c_in×k×k`).
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
        [] => panic!("fans of an empty shape"),
    }
}

/// Glorot-uniform samples on `(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
/// drawn in row-major order.
pub fn glorot_uniform(shape: &[usize], rng: &mut Pcg32) -> Tensor {
    let (fan_in, fan_out) = fans(shape);
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // u = 0 would land exactly on -a
            let u = rng.next_f64();
            if u == 0.0 {
                0.0
            } else {
                a * (2.0 * u - 1.0)
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_for_two_by_four_is_one() {
        let (fi, fo) = fans(&[2, 4]);
        assert_eq!((6.0 / (fi + fo) as f64).sqrt(), 1.0);
    }

    #[test]
    fn conv_fans_include_receptive_field() {
        assert_eq!(fans(&[8, 3, 3, 3]), (27, 72));
    }

    #[test]
    fn samples_inside_open_interval_and_reproducible() {
        let t = glorot_uniform(&[2, 4], &mut Pcg32::seeded(5));
        assert!(t.data().iter().all(|v| v.abs() < 1.0));
        let big = glorot_uniform(&[64, 64], &mut Pcg32::seeded(5));
        let a = (6.0f64 / 128.0).sqrt();
        assert!(big.data().iter().all(|v| v.abs() < a));
        let again = glorot_uniform(&[2, 4], &mut Pcg32::seeded(5));
        assert_eq!(t.to_btsr_bytes(), again.to_btsr_bytes());
    }
}
