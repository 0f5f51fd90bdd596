//! Pairwise matcher: an MLP scores the concatenation `[V_q, V̄_k]` of a
//! query representation and a support-category centroid.

use crate::backbone::argmax;
use crate::config::LossKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::sigmoid;
use crate::layers::{init_linear, linear_rows};
use crate::params::{Bound, ParamStore};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

pub const BCE_EPS: f64 = 1e-12;

const LAYERS: [&str; 3] = ["pm.fc1", "pm.fc2", "pm.fc3"];

#[derive(Clone, Debug, PartialEq)]
pub struct Matcher {
    pub channels: usize,
    pub params: ParamStore,
}

/// Arithmetic mean of the support representations of one category.
pub fn average_supports(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or_else(|| Error::usage("cannot average an empty support set"))?;
    let mut out = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != out.len() {
            return Err(Error::dim(format!("support vectors of length {} and {}", out.len(), v.len())));
        }
        out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += x);
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Index of the highest score; ties go to the lowest index.
pub fn classify_query(scores: &[f64]) -> usize {
    argmax(scores)
}

impl Matcher {
    /// Widths 2c → c → c/2 → 1.
    pub fn new(channels: usize, rng: &mut Pcg32) -> Result<Self> {
        if channels < 2 {
            return Err(Error::usage(format!("matcher needs at least 2 channels, got {channels}")));
        }
        let widths = [2 * channels, channels, channels / 2, 1];
        let mut params = ParamStore::new();
        for (i, name) in LAYERS.iter().enumerate() {
            init_linear(&mut params, name, widths[i], widths[i + 1], rng);
        }
        Ok(Matcher { channels, params })
    }

    /// Logits for every (query, category) pair: `queries` is n×c,
    /// `centroids` K×c, result n×K.
    pub fn pair_logits(&self, g: &mut Graph, p: &Bound, queries: Var, centroids: Var) -> Result<Var> {
        let (n, cq) = g.value(queries).dims2()?;
        let (k, ck) = g.value(centroids).dims2()?;
        if cq != self.channels || ck != self.channels {
            return Err(Error::dim(format!(
                "matcher expects width {}, got queries {cq} and centroids {ck}",
                self.channels
            )));
        }
        let q_rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let k_rows: Vec<usize> = (0..n).flat_map(|_| 0..k).collect();
        let q = g.gather_rows(queries, &q_rows)?;
        let s = g.gather_rows(centroids, &k_rows)?;
        let mut h = g.concat_cols(q, s)?;
        for (i, name) in LAYERS.iter().enumerate() {
            h = linear_rows(g, p, name, h)?;
            if i + 1 < LAYERS.len() {
                h = g.relu(h)?;
            }
        }
        g.reshape(h, &[n, k])
    }

    /// Membership probabilities, one row per query.
    pub fn scores(&self, queries: &[Vec<f64>], centroids: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let to_matrix = |rows: &[Vec<f64>]| -> Result<Tensor> {
            if rows.is_empty() {
                return Err(Error::usage("no vectors to score"));
            }
            Tensor::matrix(rows.len(), rows[0].len(), rows.concat())
        };
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let q = g.constant(to_matrix(queries)?);
        let c = g.constant(to_matrix(centroids)?);
        let logits = self.pair_logits(&mut g, &p, q, c)?;
        let k = centroids.len();
        Ok(g.value(logits).data().chunks(k).map(|r| r.iter().map(|&x| sigmoid(x)).collect()).collect())
    }

    /// `s = σ(f([V_q, V̄_k]))`.
    pub fn match_score(&self, query: &[f64], centroid: &[f64]) -> Result<f64> {
        if query.len() != centroid.len() {
            return Err(Error::dim(format!("query length {} vs centroid length {}", query.len(), centroid.len())));
        }
        Ok(self.scores(&[query.to_vec()], &[centroid.to_vec()])?[0][0])
    }
}

/// Loss over an n×K logit matrix with one true category per row.
/// `Bce` is the mean binary cross-entropy of `σ(logit)` over all n·K
/// pairs; `SoftmaxCe` treats each row as a K-way classification.
pub fn episode_loss(g: &mut Graph, logits: Var, labels: &[usize], kind: LossKind) -> Result<Var> {
    let (n, k) = g.value(logits).dims2()?;
    if labels.len() != n {
        return Err(Error::dim(format!("{n} logit rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::usage(format!("label {bad} out of range for {k} categories")));
    }
    match kind {
        LossKind::Bce => {
            let probs = g.sigmoid(logits)?;
            let mut targets = vec![0.0; n * k];
            for (i, &y) in labels.iter().enumerate() {
                targets[i * k + y] = 1.0;
            }
            g.binary_cross_entropy(probs, &targets, BCE_EPS)
        }
        LossKind::SoftmaxCe => g.cross_entropy_rows(logits, labels),
    }
}
