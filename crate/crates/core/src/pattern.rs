//! Pattern extractor: z learned patterns attend over the spatial
//! positions of a feature map, are refined by a GRU for T rounds, and the
//! final attention pools the features into one c-dimensional vector.
//!
//! Per round t, with `F′` the squeezed features and `F̃ = F′ + P`:
//!
//! ```text
//! Ā = g_Q(W_t) · g_K(F̃)                 z×l
//! A = σ(Ā) ⊙ softmax_rows(Ā)             z×l
//! U = A · F′ᵀ                            z×d
//! W_{t+1} = GRU(input U, hidden W_t)     z×d
//! ```
//!
//! `g_Q` acts on each pattern row and `g_K` on each spatial column; both
//! are three linear layers with ReLU in between.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::glorot_uniform;
use crate::layers::{init_linear, linear_cols, linear_rows};
use crate::params::{Bound, ParamStore};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeConfig {
    /// Backbone channels c.
    pub channels: usize,
    /// Pattern dimension d.
    pub dim: usize,
    /// Pattern count z.
    pub slots: usize,
    /// Refinement rounds T.
    pub iterations: usize,
}

impl PeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dim == 0 || self.slots == 0 || self.iterations == 0 {
            return Err(Error::usage(format!("invalid pattern extractor config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternExtractor {
    pub config: PeConfig,
    pub params: ParamStore,
}

const GRU_GATES: [(&str, &str, &str); 3] = [("w_r", "u_r", "b_r"), ("w_u", "u_u", "b_u"), ("w_h", "u_h", "b_h")];

/// GRU parameters: `r = σ(x W_rᵀ + h U_rᵀ + b_r)`,
/// `u = σ(x W_uᵀ + h U_uᵀ + b_u)`, `h̃ = tanh(x W_hᵀ + (r ⊙ h) U_hᵀ + b_h)`,
/// `h′ = (1 − u) ⊙ h̃ + u ⊙ h`, applied to every row.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_u: Var,
    pub u_u: Var,
    pub b_u: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn from_bound(p: &Bound, prefix: &str) -> Self {
        let v = |n: &str| p[format!("{prefix}.{n}").as_str()];
        GruVars {
            w_r: v("w_r"),
            u_r: v("u_r"),
            b_r: v("b_r"),
            w_u: v("w_u"),
            u_u: v("u_u"),
            b_u: v("b_u"),
            w_h: v("w_h"),
            u_h: v("u_h"),
            b_h: v("b_h"),
        }
    }
}

pub fn init_gru(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut Pcg32) {
    for (w, u, b) in GRU_GATES {
        store.insert(format!("{prefix}.{w}"), glorot_uniform(&[dim, dim], rng));
        store.insert(format!("{prefix}.{u}"), glorot_uniform(&[dim, dim], rng));
        store.insert(format!("{prefix}.{b}"), Tensor::zeros(&[dim]));
    }
}

/// `x` is the input and `h` the hidden state, both z×d.
pub fn gru_cell(g: &mut Graph, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    if g.shape(x) != g.shape(h) {
        return Err(Error::dim(format!("gru_cell: input {:?} vs hidden {:?}", g.shape(x), g.shape(h))));
    }
    let d = g.value(h).dims2()?.1;
    for m in [p.w_r, p.u_r, p.w_u, p.u_u, p.w_h, p.u_h] {
        if g.shape(m) != [d, d] {
            return Err(Error::dim(format!("gru_cell: weight {:?} for width {d}", g.shape(m))));
        }
    }
    let affine = |g: &mut Graph, a: Var, wa: Var, b: Var, wb: Var, bias: Var| -> Result<Var> {
        let wat = g.transpose(wa)?;
        let wbt = g.transpose(wb)?;
        let xa = g.matmul(a, wat)?;
        let xb = g.matmul(b, wbt)?;
        let s = g.add(xa, xb)?;
        g.add_bias_trailing(s, bias)
    };
    let r_pre = affine(g, x, p.w_r, h, p.u_r, p.b_r)?;
    let r = g.sigmoid(r_pre)?;
    let u_pre = affine(g, x, p.w_u, h, p.u_u, p.b_u)?;
    let u = g.sigmoid(u_pre)?;
    let rh = g.hadamard(r, h)?;
    let c_pre = affine(g, x, p.w_h, rh, p.u_h, p.b_h)?;
    let cand = g.tanh(c_pre)?;
    // (1 − u) ⊙ h̃ + u ⊙ h  =  h̃ + u ⊙ (h − h̃)
    let diff = g.sub(h, cand)?;
    let gated = g.hadamard(u, diff)?;
    g.add(cand, gated)
}

/// `A = σ(Ā) ⊙ softmax_rows(Ā)`: softmax over the spatial positions of
/// each pattern, damped by the pattern's own sigmoid confidence.
pub fn modulate(g: &mut Graph, raw: Var) -> Result<Var> {
    let s = g.sigmoid(raw)?;
    let sm = g.softmax_rows(raw)?;
    g.hadamard(s, sm)
}

/// Coordinate code `(x, y, 1−x, 1−y)` per position as a 4×l matrix, with
/// `x = col/(w−1)`, `y = row/(h−1)` and 0 on a degenerate axis.
pub fn position_code(h: usize, w: usize) -> Tensor {
    let l = h * w;
    let mut data = vec![0.0; 4 * l];
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    for row in 0..h {
        for col in 0..w {
            let j = row * w + col;
            let (x, y) = (norm(col, w), norm(row, h));
            data[j] = x;
            data[l + j] = y;
            data[2 * l + j] = 1.0 - x;
            data[3 * l + j] = 1.0 - y;
        }
    }
    Tensor::new(vec![4, l], data).unwrap()
}

/// Intermediate values of one attention round.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    pub t: usize,
    pub raw: Var,
    pub attention: Var,
    pub updates: Var,
    /// Patterns after the GRU update, input to the next round.
    pub patterns: Var,
}

/// Output of a full forward pass.
#[derive(Clone, Debug)]
pub struct PeOutput {
    /// Overall-attention representation, length c.
    pub v: Var,
    /// Final attention A^(T), z×l.
    pub attention: Var,
    pub rounds: Vec<AttentionState>,
}

fn mlp3(g: &mut Graph, p: &Bound, prefix: &str, x: Var, rows: bool) -> Result<Var> {
    let mut h = x;
    for i in 0..3 {
        let name = format!("{prefix}.{i}");
        h = if rows { linear_rows(g, p, &name, h)? } else { linear_cols(g, p, &name, h)? };
        if i < 2 {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// `V_c = (1/l) Σ_j a_j F[c, j]` with `a = (1/z) Σ_k A[k, :]`.
pub fn extract_overall(g: &mut Graph, features: Var, attention: Var) -> Result<Var> {
    let (c, h, w) = g.value(features).dims3()?;
    let (_, l) = g.value(attention).dims2()?;
    if l != h * w {
        return Err(Error::dim(format!("attention covers {l} positions, features have {h}×{w}")));
    }
    let a = g.reduce_axis(attention, 0, true)?;
    let a = g.reshape(a, &[l, 1])?;
    let flat = g.reshape(features, &[c, l])?;
    let weighted = g.matmul(flat, a)?;
    let pooled = g.scale(weighted, 1.0 / l as f64)?;
    g.reshape(pooled, &[c])
}

impl PatternExtractor {
    pub fn new(config: PeConfig, rng: &mut Pcg32) -> Result<Self> {
        config.validate()?;
        let PeConfig { channels: c, dim: d, slots: z, .. } = config;
        let mut params = ParamStore::new();
        params.insert("pe.squeeze.weight", glorot_uniform(&[d, c, 1, 1], rng));
        params.insert("pe.squeeze.bias", Tensor::zeros(&[d]));
        init_linear(&mut params, "pe.position", 4, d, rng);
        params.insert("pe.slots", glorot_uniform(&[z, d], rng));
        for i in 0..3 {
            init_linear(&mut params, &format!("pe.query.{i}"), d, d, rng);
            init_linear(&mut params, &format!("pe.key.{i}"), d, d, rng);
        }
        init_gru(&mut params, "pe.gru", d, rng);
        Ok(PatternExtractor { config, params })
    }

    /// 1×1 conv c→d, ReLU, row-major flatten: d×l.
    pub fn squeeze_project(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        let (c, h, w) = g.value(features).dims3()?;
        if c != self.config.channels {
            return Err(Error::dim(format!("pattern extractor expects {} channels, got {c}", self.config.channels)));
        }
        let y = g.conv2d(features, p["pe.squeeze.weight"], 1, 0)?;
        let y = g.add_bias_leading(y, p["pe.squeeze.bias"])?;
        let y = g.relu(y)?;
        g.reshape(y, &[self.config.dim, h * w])
    }

    /// `F̃ = F′ + P` with `P` a learned projection of [`position_code`].
    pub fn add_position(&self, g: &mut Graph, p: &Bound, squeezed: Var, h: usize, w: usize) -> Result<Var> {
        let (_, l) = g.value(squeezed).dims2()?;
        if l != h * w {
            return Err(Error::dim(format!("{l} positions do not form a {h}×{w} grid")));
        }
        let code = g.constant(position_code(h, w));
        let pos = linear_cols(g, p, "pe.position", code)?;
        g.add(squeezed, pos)
    }

    /// `g_K(F̃)`, shared by every round.
    pub fn keys(&self, g: &mut Graph, p: &Bound, embedded: Var) -> Result<Var> {
        mlp3(g, p, "pe.key", embedded, false)
    }

    pub fn attention_iteration(
        &self,
        g: &mut Graph,
        p: &Bound,
        t: usize,
        patterns: Var,
        keys: Var,
        squeezed: Var,
    ) -> Result<AttentionState> {
        let (z, d) = g.value(patterns).dims2()?;
        let (dk, l) = g.value(keys).dims2()?;
        if d != dk || g.shape(squeezed) != [d, l] {
            return Err(Error::dim(format!(
                "patterns {z}×{d}, keys {dk}×{l}, features {:?}",
                g.shape(squeezed)
            )));
        }
        let q = mlp3(g, p, "pe.query", patterns, true)?;
        let raw = g.matmul(q, keys)?;
        let attention = modulate(g, raw)?;
        let ft = g.transpose(squeezed)?;
        let updates = g.matmul(attention, ft)?;
        let gru = GruVars::from_bound(p, "pe.gru");
        let next = gru_cell(g, updates, patterns, &gru)?;
        Ok(AttentionState {
            t,
            raw,
            attention,
            updates,
            patterns: next,
        })
    }

    /// Full pass over a c×h×w feature map.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<PeOutput> {
        let (_, h, w) = g.value(features).dims3()?;
        let squeezed = self.squeeze_project(g, p, features)?;
        let embedded = self.add_position(g, p, squeezed, h, w)?;
        let keys = self.keys(g, p, embedded)?;
        let mut patterns = p["pe.slots"];
        let mut rounds = Vec::with_capacity(self.config.iterations);
        for t in 1..=self.config.iterations {
            let state = self.attention_iteration(g, p, t, patterns, keys, squeezed)?;
            patterns = state.patterns;
            rounds.push(state);
        }
        let attention = rounds.last().expect("at least one round").attention;
        let v = extract_overall(g, features, attention)?;
        Ok(PeOutput { v, attention, rounds })
    }

    /// Inference without gradients: `(V, A^(T))`.
    pub fn infer(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = g.constant(features.clone());
        let out = self.forward(&mut g, &p, f)?;
        Ok((g.value(out.v).clone(), g.value(out.attention).clone()))
    }
}
