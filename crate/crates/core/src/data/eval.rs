//! Episodic evaluation with 95% confidence intervals.

use std::collections::HashMap;

use serde::Serialize;

use crate::data::dataset::{Dataset, Split};
use crate::data::episode::{sample_episode, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean: f64,
    /// Half-width: 1.96 · sample std / √n.
    pub ci95: f64,
    pub episodes: usize,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_episode: Vec<f64>) -> Self {
        let n = per_episode.len();
        let mean = per_episode.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        EvalReport {
            mean,
            ci95,
            episodes: n,
            per_episode,
        }
    }

    /// `ACC 55.03 ± 0.49` (percent).
    pub fn summary(&self) -> String {
        format!("ACC {:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.ci95)
    }
}

/// Anything that labels the queries of an episode. Implementations must
/// not mutate themselves, so evaluation cannot change a model.
pub trait EpisodeClassifier: Sync {
    /// One predicted slot (0..K) per query, in query order.
    fn predict(&self, ds: &Dataset, episode: &Episode) -> Result<Vec<usize>>;
}

pub fn episode_accuracy(episode: &Episode, predictions: &[usize]) -> f64 {
    let correct = episode
        .query
        .iter()
        .zip(predictions)
        .filter(|((_, label), pred)| label == *pred)
        .count();
    correct as f64 / episode.query.len() as f64
}

/// Episode `i` draws from a generator seeded by SplitMix64(base_seed ^ i),
/// so results do not depend on `jobs`.
pub fn evaluate(
    model: &dyn EpisodeClassifier,
    ds: &Dataset,
    split: Split,
    spec: EpisodeSpec,
    episodes: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::usage("evaluation needs at least one episode"));
    }
    // fail fast on infeasible parameters before spawning workers
    sample_episode(ds, split, spec, &mut rng::indexed(base_seed, 0))?;

    let run = |i: usize| -> Result<f64> {
        let ep = sample_episode(ds, split, spec, &mut rng::indexed(base_seed, i as u64))?;
        let preds = model.predict(ds, &ep)?;
        if preds.len() != ep.query.len() {
            return Err(Error::dim(format!("{} predictions for {} queries", preds.len(), ep.query.len())));
        }
        Ok(episode_accuracy(&ep, &preds))
    };

    let jobs = jobs.clamp(1, episodes);
    let accuracies: Vec<f64> = if jobs == 1 {
        (0..episodes).map(run).collect::<Result<_>>()?
    } else {
        let mut slots = vec![0.0; episodes];
        let chunk = episodes.div_ceil(jobs);
        std::thread::scope(|scope| -> Result<()> {
            let handles: Vec<_> = slots
                .chunks_mut(chunk)
                .enumerate()
                .map(|(w, out)| {
                    let run = &run;
                    scope.spawn(move || -> Result<()> {
                        for (j, slot) in out.iter_mut().enumerate() {
                            *slot = run(w * chunk + j)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            for h in handles {
                h.join().expect("evaluation worker panicked")?;
            }
            Ok(())
        })?;
        slots
    };
    Ok(EvalReport::from_accuracies(accuracies))
}

/// Nearest class centroid under Euclidean distance over precomputed
/// per-image vectors; ties go to the lowest slot.
pub struct NearestCentroid {
    pub features: HashMap<usize, Vec<f64>>,
}

impl EpisodeClassifier for NearestCentroid {
    fn predict(&self, _ds: &Dataset, episode: &Episode) -> Result<Vec<usize>> {
        let feat = |id: usize| {
            self.features
                .get(&id)
                .ok_or_else(|| Error::usage(format!("no features for image {id}")))
        };
        let dim = feat(episode.support[0].0)?.len();
        let mut centroids = vec![vec![0.0; dim]; episode.way()];
        let mut counts = vec![0usize; episode.way()];
        for &(id, k) in &episode.support {
            centroids[k].iter_mut().zip(feat(id)?).for_each(|(c, v)| *c += v);
            counts[k] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        episode
            .query
            .iter()
            .map(|&(id, _)| {
                let q = feat(id)?;
                let mut best = (f64::INFINITY, 0);
                for (k, c) in centroids.iter().enumerate() {
                    let d: f64 = c.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                Ok(best.1)
            })
            .collect()
    }
}
