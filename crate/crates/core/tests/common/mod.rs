#![allow(dead_code)]

use mtunet::graph::{Graph, Var};
use mtunet::params::{Bound, ParamStore};
use mtunet::{Pcg32, Result, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Pcg32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Magnitudes in [0.1, 1] with random sign, so ReLU kinks sit far from
/// every sample.
pub fn away_from_zero(shape: &[usize], rng: &mut Pcg32) -> Tensor {
    let t = random_tensor(shape, 0.1, 1.0, rng);
    let signs: Vec<f64> = t
        .data()
        .iter()
        .map(|&x| if rng.next_u32() & 1 == 0 { x } else { -x })
        .collect();
    Tensor::new(shape.to_vec(), signs).unwrap()
}

pub fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, t);
    }
    s
}

/// Fixed weights that turn any output into a scalar `Σ w ⊙ out`, so every
/// output entry contributes to the checked gradient.
fn projection(len: usize) -> Vec<f64> {
    let mut rng = Pcg32::new(0x5eed, len as u64);
    (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn project(g: &Graph, out: Var) -> f64 {
    let w = projection(g.value(out).len());
    g.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum()
}

fn eval(params: &ParamStore, f: &dyn Fn(&mut Graph, &Bound) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = f(&mut g, &p).expect("forward pass");
    project(&g, out)
}

/// Largest `|analytic − central FD| / max(1, |analytic|)` over every
/// entry of every tensor in `params`.
pub fn max_gradient_error(params: &ParamStore, f: &dyn Fn(&mut Graph, &Bound) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let out = f(&mut g, &p).expect("forward pass");
    let w = Tensor::new(g.shape(out).to_vec(), projection(g.value(out).len())).unwrap();
    let w = g.constant(w);
    let weighted = g.hadamard(out, w).unwrap();
    let loss = g.sum(weighted).unwrap();
    g.backward(loss).unwrap();
    let grads = p.grads(&g);

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let analytic = grads.get(&name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; len]);
        for i in 0..len {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe, f);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe, f);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}
