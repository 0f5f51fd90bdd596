//! Convolutional feature extractor.
//!
//! Four 3×3 conv blocks with widths 32/64/64/64; blocks 1 and 2 end in
//! a 2×2 max-pool, so a 32×32 image yields 64×8×8 feature maps. A
//! global-average-pool + linear head classifies base categories during
//! pretraining only.

use std::collections::HashMap;

use crate::config::{lr_schedule, TrainConfig};
use crate::data::{augment, evaluate, AugmentConfig, Dataset, NearestCentroid, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, PoolKind, Var};
use crate::init::glorot_uniform;
use crate::layers::{init_linear, linear_rows};
use crate::optim::{AdaBelief, AdaBeliefConfig};
use crate::params::{Bound, GradStore, ParamStore};
use crate::rng::{self, Pcg32};
use crate::tensor::Tensor;

pub const WIDTHS: [usize; 4] = [32, 64, 64, 64];
const POOLED_BLOCKS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Size of the pretraining head; 0 omits it.
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

/// Backbone output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub image_id: Option<usize>,
}

fn conv_name(block: usize, part: &str) -> String {
    format!("backbone.block{}.conv.{part}", block + 1)
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut Pcg32) -> Self {
        let mut params = ParamStore::new();
        let mut c_in = config.in_channels;
        for (b, &c_out) in WIDTHS.iter().enumerate() {
            params.insert(conv_name(b, "weight"), glorot_uniform(&[c_out, c_in, 3, 3], rng));
            params.insert(conv_name(b, "bias"), Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        if config.num_classes > 0 {
            init_linear(&mut params, "backbone.head", c_in, config.num_classes, rng);
        }
        Backbone { config, params }
    }

    pub fn channels(&self) -> usize {
        WIDTHS[WIDTHS.len() - 1]
    }

    /// `(c, h, w)` of the feature maps for an `h×w` input.
    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let f = 1 << POOLED_BLOCKS;
        (self.channels(), h / f, w / f)
    }

    /// Parameters without the pretraining head.
    pub fn feature_params(&self) -> ParamStore {
        self.params
            .iter()
            .filter(|(n, _)| !n.starts_with("backbone.head."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// Forward through the conv blocks. Returns the feature map and the
    /// post-ReLU, pre-pool activation of every block.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<(Var, Vec<Var>)> {
        let (c, h, w) = g.value(image).dims3()?;
        if c != self.config.in_channels {
            return Err(Error::dim(format!(
                "backbone expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let f = 1 << POOLED_BLOCKS;
        if h % f != 0 || w % f != 0 {
            return Err(Error::dim(format!("image size {h}×{w} must be divisible by {f}")));
        }
        let mut x = image;
        let mut trace = Vec::with_capacity(WIDTHS.len());
        for b in 0..WIDTHS.len() {
            let y = g.conv2d(x, p[conv_name(b, "weight").as_str()], 1, 1)?;
            let y = g.add_bias_leading(y, p[conv_name(b, "bias").as_str()])?;
            let y = g.relu(y)?;
            trace.push(y);
            x = if b < POOLED_BLOCKS { g.pool2d(PoolKind::Max, y, 2, 2)? } else { y };
        }
        Ok((x, trace))
    }

    /// Global average pool + linear head: 1×num_classes logits.
    pub fn head(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        if self.config.num_classes == 0 {
            return Err(Error::usage("backbone has no classifier head"));
        }
        let pooled = global_pool(g, features)?;
        let row = g.reshape(pooled, &[1, self.channels()])?;
        linear_rows(g, p, "backbone.head", row)
    }

    pub fn extract_features(&self, image: &Tensor) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let (f, _) = self.forward(&mut g, &p, x)?;
        Ok(FeatureMap {
            tensor: g.value(f).clone(),
            image_id: None,
        })
    }

    /// Post-ReLU, pre-pool activations of every block.
    pub fn block_activations(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let (_, trace) = self.forward(&mut g, &p, x)?;
        Ok(trace.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Cross-entropy loss of one image and, when `grads` is given, its
    /// parameter gradients accumulated there.
    pub fn classification_loss(&self, image: &Tensor, label: usize, grads: Option<&mut GradStore>) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, grads.is_some());
        let x = g.constant(image.clone());
        let (f, _) = self.forward(&mut g, &p, x)?;
        let logits = self.head(&mut g, &p, f)?;
        let predicted = argmax(g.value(logits).data());
        let loss = g.cross_entropy_rows(logits, &[label])?;
        let value = g.value(loss).item();
        if let Some(acc) = grads {
            g.backward(loss)?;
            acc.accumulate(p.grads(&g));
        }
        Ok((value, predicted))
    }
}

fn global_pool(g: &mut Graph, features: Var) -> Result<Var> {
    let (c, h, w) = g.value(features).dims3()?;
    let flat = g.reshape(features, &[c, h * w])?;
    g.reduce_axis(flat, 1, true)
}

/// First index of the maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Global-average-pooled features of `image`.
pub fn pooled_features(backbone: &Backbone, image: &Tensor) -> Result<Vec<f64>> {
    let f = backbone.extract_features(image)?.tensor;
    let (c, h, w) = f.dims3()?;
    let l = (h * w) as f64;
    Ok((0..c).map(|ch| f.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / l).collect())
}

/// Nearest-centroid accuracy of pooled backbone features over episodes
/// drawn from `split`.
pub fn nn_validate(
    backbone: &Backbone,
    ds: &Dataset,
    split: Split,
    episodes: usize,
    spec: crate::data::EpisodeSpec,
    base_seed: u64,
) -> Result<f64> {
    if ds.categories(split).len() < spec.way {
        return Err(Error::usage(format!(
            "{split} split has {} categories, fewer than way = {}",
            ds.categories(split).len(),
            spec.way
        )));
    }
    let mut features = HashMap::new();
    for id in ds.images(split) {
        let img = ds.image(id)?;
        features.insert(id, pooled_features(backbone, &img)?);
    }
    let nc = NearestCentroid { features };
    Ok(evaluate(&nc, ds, split, spec, episodes, base_seed, 1)?.mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Seed for validation episodes, fixed per run so epochs are comparable.
pub(crate) fn validation_seed(seed: u64, salt: u64) -> u64 {
    rng::splitmix64(seed ^ salt)
}

/// Supervised training of conv blocks + head on every base image;
/// after each epoch nearest-centroid accuracy on the val split decides
/// which epoch's weights are kept.
pub fn pretrain_backbone(
    ds: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Backbone> {
    let base_cats = ds.categories(Split::Base);
    if base_cats.len() < 2 {
        return Err(Error::usage("backbone pretraining needs at least 2 base categories"));
    }
    let ids = ds.images(Split::Base);
    if ids.is_empty() {
        return Err(Error::usage("base split is empty"));
    }
    let label_of: HashMap<usize, usize> = base_cats.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let first = ds.image(ids[0])?;
    let mut rng = Pcg32::new(cfg.seed, 1);
    let mut backbone = Backbone::new(
        BackboneConfig {
            in_channels: first.shape()[0],
            num_classes: base_cats.len(),
        },
        &mut rng,
    );
    let sc = &cfg.backbone;
    let mut opt = AdaBelief::new(AdaBeliefConfig::default());
    let val_seed = validation_seed(cfg.seed, 0xb4c0);
    let mut best: Option<(f64, Backbone)> = None;
    let aug = AugmentConfig::default();
    let mut order = ids.clone();
    for epoch in 0..sc.epochs {
        let lr = lr_schedule(epoch, sc.lr, sc.lr_step, sc.lr_factor);
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(sc.batch_size) {
            let mut grads = GradStore::default();
            for &id in batch {
                let img = ds.image(id)?;
                let img = if cfg.augment { augment(&img, &mut rng, &aug) } else { (*img).clone() };
                let label = label_of[&ds.label(id)];
                let (loss, pred) = backbone.classification_loss(&img, label, Some(&mut grads))?;
                loss_sum += loss;
                correct += usize::from(pred == label);
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut backbone.params, &grads, lr)?;
        }
        let val_accuracy = if sc.val_episodes > 0 {
            nn_validate(&backbone, ds, Split::Val, sc.val_episodes, cfg.episode_spec(), val_seed)?
        } else {
            0.0
        };
        on_epoch(&EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / ids.len() as f64,
            train_accuracy: correct as f64 / ids.len() as f64,
            val_accuracy,
        });
        if best.as_ref().map_or(true, |(b, _)| val_accuracy > *b) {
            best = Some((val_accuracy, backbone.clone()));
        }
    }
    Ok(best.map(|(_, b)| b).unwrap_or(backbone))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Backbone {
        Backbone::new(
            BackboneConfig {
                in_channels: 3,
                num_classes: 4,
            },
            &mut Pcg32::seeded(2),
        )
    }

    #[test]
    fn shape_contract_for_32px() {
        let b = small();
        let img = Tensor::full(&[3, 32, 32], 0.5);
        let f = b.extract_features(&img).unwrap();
        assert_eq!(f.tensor.shape(), &[64, 8, 8]);
        assert!(f.tensor.data().iter().all(|&v| v >= 0.0));
        assert_eq!(b.output_shape(80, 80), (64, 20, 20));
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let f = small().extract_features(&Tensor::zeros(&[3, 16, 16])).unwrap();
        assert!(f.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_channel_count() {
        assert!(matches!(small().extract_features(&Tensor::zeros(&[1, 16, 16])), Err(Error::Dimension(_))));
    }

    #[test]
    fn first_block_is_positively_homogeneous() {
        let b = small();
        let mut rng = Pcg32::seeded(8);
        let img = Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.next_f64()).collect()).unwrap();
        let mut doubled = b.clone();
        let w = doubled.params.get_mut("backbone.block1.conv.weight").unwrap();
        w.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let a1 = &b.block_activations(&img).unwrap()[0];
        let a2 = &doubled.block_activations(&img).unwrap()[0];
        for (x, y) in a1.data().iter().zip(a2.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3, 0.9]), 1);
        assert_eq!(argmax(&[0.5; 5]), 0);
    }
}
