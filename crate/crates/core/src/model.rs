//! The assembled model: backbone, pattern extractor and matcher, with
//! checkpoint loading and episode classification over cached
//! representations.

use std::collections::HashMap;

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{augment, AugmentConfig, Dataset, EpisodeClassifier, Episode};
use crate::error::{Error, Result};
use crate::matcher::{average_supports, classify_query, Matcher};
use crate::pattern::{PatternExtractor, PeConfig};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

const PREFIXES: [&str; 3] = ["backbone.", "pe.", "pm."];

/// Rejects entries that belong to no model component.
pub fn check_entry_names(ckpt: &Checkpoint) -> Result<()> {
    match ckpt.names().find(|n| !PREFIXES.iter().any(|p| n.starts_with(p))) {
        Some(bad) => Err(Error::usage(format!("unknown checkpoint entry {bad}"))),
        None => Ok(()),
    }
}

fn entry<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a Tensor> {
    ckpt.get(name).ok_or_else(|| Error::usage(format!("checkpoint lacks tensor {name}")))
}

pub fn load_backbone(ckpt: &Checkpoint) -> Result<Backbone> {
    check_entry_names(ckpt)?;
    let first = entry(ckpt, "backbone.block1.conv.weight")?;
    if first.rank() != 4 {
        return Err(Error::dim(format!("backbone.block1.conv.weight has shape {:?}", first.shape())));
    }
    let num_classes = ckpt.get("backbone.head.weight").map_or(0, |t| t.shape()[0]);
    let config = BackboneConfig {
        in_channels: first.shape()[1],
        num_classes,
    };
    let template = Backbone::new(config, &mut Pcg32::seeded(0));
    let params = ckpt.extract("backbone.", &template.params, true)?;
    Ok(Backbone { config, params })
}

/// Layout comes from the stored tensors; the round count is not stored
/// and is taken from `iterations`.
pub fn load_pattern_extractor(ckpt: &Checkpoint, iterations: usize) -> Result<PatternExtractor> {
    check_entry_names(ckpt)?;
    let squeeze = entry(ckpt, "pe.squeeze.weight")?;
    let slots = entry(ckpt, "pe.slots")?;
    if squeeze.rank() != 4 || slots.rank() != 2 {
        return Err(Error::dim(format!(
            "pattern extractor tensors have shapes {:?} and {:?}",
            squeeze.shape(),
            slots.shape()
        )));
    }
    let config = PeConfig {
        channels: squeeze.shape()[1],
        dim: squeeze.shape()[0],
        slots: slots.shape()[0],
        iterations,
    };
    let template = PatternExtractor::new(config, &mut Pcg32::seeded(0))?;
    let params = ckpt.extract("pe.", &template.params, true)?;
    Ok(PatternExtractor { config, params })
}

pub fn load_matcher(ckpt: &Checkpoint) -> Result<Matcher> {
    check_entry_names(ckpt)?;
    let fc1 = entry(ckpt, "pm.fc1.weight")?;
    if fc1.rank() != 2 {
        return Err(Error::dim(format!("pm.fc1.weight has shape {:?}", fc1.shape())));
    }
    let template = Matcher::new(fc1.shape()[0], &mut Pcg32::seeded(0))?;
    let params = ckpt.extract("pm.", &template.params, true)?;
    Ok(Matcher {
        channels: template.channels,
        params,
    })
}

/// Representation of one image with the attention behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    pub v: Vec<f64>,
    /// A^(T), z×l.
    pub attention: Tensor,
    /// Feature-map grid (h, w).
    pub grid: (usize, usize),
}

pub fn represent(backbone: &Backbone, pe: &PatternExtractor, image: &Tensor) -> Result<Representation> {
    let f = backbone.extract_features(image)?.tensor;
    let (c, h, w) = f.dims3()?;
    if c != pe.config.channels {
        return Err(Error::dim(format!(
            "backbone yields {c} channels, pattern extractor expects {}",
            pe.config.channels
        )));
    }
    let (v, attention) = pe.infer(&f)?;
    Ok(Representation {
        v: v.into_data(),
        attention,
        grid: (h, w),
    })
}

/// `V` for every listed image, optionally of one augmented view each.
pub fn represent_images(
    backbone: &Backbone,
    pe: &PatternExtractor,
    ds: &Dataset,
    ids: &[usize],
    mut augmentation: Option<(&mut Pcg32, &AugmentConfig)>,
) -> Result<HashMap<usize, Vec<f64>>> {
    let mut out = HashMap::with_capacity(ids.len());
    for &id in ids {
        let img = ds.image(id)?;
        let img = match augmentation.as_mut() {
            Some((rng, cfg)) => augment(&img, rng, cfg),
            None => (*img).clone(),
        };
        out.insert(id, represent(backbone, pe, &img)?.v);
    }
    Ok(out)
}

/// Classifies queries with the matcher over precomputed representations.
pub struct MatcherClassifier<'a> {
    pub matcher: &'a Matcher,
    pub features: HashMap<usize, Vec<f64>>,
}

/// Centroids per slot and the query representations, in episode order.
pub fn episode_vectors(features: &HashMap<usize, Vec<f64>>, episode: &Episode) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let feature = |id: usize| {
        features
            .get(&id)
            .ok_or_else(|| Error::usage(format!("no representation for image {id}")))
    };
    let centroids = (0..episode.way())
        .map(|k| {
            let vs = episode
                .support_of(k)
                .map(|id| feature(id).map(|v| v.as_slice()))
                .collect::<Result<Vec<_>>>()?;
            average_supports(&vs)
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = episode
        .query
        .iter()
        .map(|&(id, _)| feature(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok((centroids, queries))
}

impl MatcherClassifier<'_> {
    pub fn episode_vectors(&self, episode: &Episode) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        episode_vectors(&self.features, episode)
    }
}

impl EpisodeClassifier for MatcherClassifier<'_> {
    fn predict(&self, _ds: &Dataset, episode: &Episode) -> Result<Vec<usize>> {
        let (centroids, queries) = self.episode_vectors(episode)?;
        let scores = self.matcher.scores(&queries, &centroids)?;
        Ok(scores.iter().map(|row| classify_query(row)).collect())
    }
}

/// All three trained components.
#[derive(Clone, Debug, PartialEq)]
pub struct Mtunet {
    pub backbone: Backbone,
    pub pe: PatternExtractor,
    pub matcher: Matcher,
}

impl Mtunet {
    pub fn from_checkpoint(ckpt: &Checkpoint, iterations: usize) -> Result<Self> {
        let model = Mtunet {
            backbone: load_backbone(ckpt)?,
            pe: load_pattern_extractor(ckpt, iterations)?,
            matcher: load_matcher(ckpt)?,
        };
        if model.matcher.channels != model.pe.config.channels {
            return Err(Error::dim(format!(
                "matcher width {} does not match {} feature channels",
                model.matcher.channels, model.pe.config.channels
            )));
        }
        Ok(model)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_stores([&self.backbone.params, &self.pe.params, &self.matcher.params])
    }

    pub fn represent(&self, image: &Tensor) -> Result<Representation> {
        represent(&self.backbone, &self.pe, image)
    }

    /// Classifier over every image of the given ids.
    pub fn classifier(&self, ds: &Dataset, ids: &[usize]) -> Result<MatcherClassifier<'_>> {
        Ok(MatcherClassifier {
            matcher: &self.matcher,
            features: represent_images(&self.backbone, &self.pe, ds, ids, None)?,
        })
    }
}
