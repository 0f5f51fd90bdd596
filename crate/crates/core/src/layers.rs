//! Fully connected layers stored as `out×in` weights plus a bias.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::init::glorot_uniform;
use crate::params::{Bound, ParamStore};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

pub(crate) fn init_linear(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut Pcg32) {
    store.insert(format!("{name}.weight"), glorot_uniform(&[out, inp], rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
}

/// Applies the layer to every row of `x` (n×in → n×out).
pub(crate) fn linear_rows(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let wt = g.transpose(p[format!("{name}.weight").as_str()])?;
    let y = g.matmul(x, wt)?;
    g.add_bias_trailing(y, p[format!("{name}.bias").as_str()])
}

/// Applies the layer to every column of `x` (in×n → out×n).
pub(crate) fn linear_cols(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(p[format!("{name}.weight").as_str()], x)?;
    g.add_bias_leading(y, p[format!("{name}.bias").as_str()])
}
