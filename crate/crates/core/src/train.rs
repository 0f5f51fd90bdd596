//! Pattern-extractor and matcher training on top of a frozen backbone.

use std::collections::HashMap;

use crate::backbone::{argmax, validation_seed, Backbone, EpochLog};
use crate::config::{lr_schedule, AreaNorm, TrainConfig};
use crate::data::{augment, evaluate, sample_episode, AugmentConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matcher::{episode_loss, Matcher};
use crate::model::{episode_vectors, represent_images, MatcherClassifier};
use crate::optim::{AdaBelief, AdaBeliefConfig};
use crate::params::GradStore;
use crate::pattern::{PatternExtractor, PeConfig};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

pub use crate::backbone::pretrain_backbone;

/// Slot-sum classification plus an area penalty on a z×l attention map:
/// `CE(softmax(e · Σ_j A[k, j]), label) + λ · area(A)`.
pub fn scouter_loss(g: &mut Graph, attention: Var, label: usize, lambda: f64, e: f64, norm: AreaNorm) -> Result<Var> {
    let (z, l) = g.value(attention).dims2()?;
    if label >= z {
        return Err(Error::usage(format!("label {label} out of range for {z} slots")));
    }
    let mass = g.reduce_axis(attention, 1, false)?;
    let logits = g.scale(mass, e)?;
    let logits = g.reshape(logits, &[1, z])?;
    let ce = g.cross_entropy_rows(logits, &[label])?;
    let area = match norm {
        AreaNorm::Total => g.mean(attention)?,
        AreaNorm::Spatial => {
            let s = g.sum(attention)?;
            g.scale(s, 1.0 / l as f64)?
        }
    };
    let penalty = g.scale(area, lambda)?;
    g.add(ce, penalty)
}

/// Base categories used to train the pattern extractor: the named ones,
/// or every `stride`-th base category starting from the first.
pub fn select_pe_categories(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let base = ds.categories(Split::Base);
    let selected = match &cfg.pe_cats {
        Some(names) => names
            .iter()
            .map(|n| match ds.category_by_name(n) {
                Some(c) if ds.category(c).split == Split::Base => Ok(c),
                Some(_) => Err(Error::usage(format!("category {n} is not in the base split"))),
                None => Err(Error::usage(format!("unknown category {n}"))),
            })
            .collect::<Result<Vec<_>>>()?,
        None => base.iter().copied().step_by(cfg.pe_stride.max(1)).collect(),
    };
    let mut seen = selected.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != selected.len() {
        return Err(Error::usage("a pattern-extractor category is listed twice"));
    }
    if selected.len() < 2 {
        return Err(Error::usage(format!(
            "pattern extractor training needs at least 2 categories, {} selected",
            selected.len()
        )));
    }
    Ok(selected)
}

/// Per-category split: the first 90% of a shuffled order train, the rest
/// validate (at least one image whenever the category has two).
pub fn split_train_val(ds: &Dataset, categories: &[usize], rng: &mut Pcg32) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (slot, &c) in categories.iter().enumerate() {
        let mut ids = ds.category(c).images.clone();
        rng.shuffle(&mut ids);
        let n = ids.len();
        let mut n_train = n * 9 / 10;
        if n > 1 && n_train == n {
            n_train = n - 1;
        }
        train.extend(ids[..n_train].iter().map(|&id| (id, slot)));
        val.extend(ids[n_train..].iter().map(|&id| (id, slot)));
    }
    (train, val)
}

/// Slot whose attention carries the most mass.
pub fn attention_class(attention: &Tensor) -> usize {
    let (z, l) = attention.dims2().expect("attention is a matrix");
    let sums: Vec<f64> = (0..z).map(|k| attention.data()[k * l..(k + 1) * l].iter().sum()).collect();
    argmax(&sums)
}

/// Trains the pattern extractor as a z-way classifier on the selected
/// base categories, one slot each. The backbone only produces features.
pub fn train_pe(
    ds: &Dataset,
    backbone: &Backbone,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<PatternExtractor> {
    let cats = select_pe_categories(ds, cfg)?;
    let z = cfg.slots.unwrap_or(cats.len());
    if z != cats.len() {
        return Err(Error::usage(format!(
            "slots = {z} but {} categories are selected for pattern training",
            cats.len()
        )));
    }
    let mut rng = Pcg32::new(cfg.seed, 2);
    let pe_config = PeConfig {
        channels: backbone.channels(),
        dim: cfg.dim,
        slots: z,
        iterations: cfg.iterations,
    };
    let mut pe = PatternExtractor::new(pe_config, &mut rng)?;
    let (mut train, val) = split_train_val(ds, &cats, &mut rng);

    let features = |id: usize, rng: Option<&mut Pcg32>| -> Result<Tensor> {
        let img = ds.image(id)?;
        let img = match rng {
            Some(r) => augment(&img, r, &AugmentConfig::default()),
            None => (*img).clone(),
        };
        Ok(backbone.extract_features(&img)?.tensor)
    };
    let cache = |ids: &[(usize, usize)]| -> Result<HashMap<usize, Tensor>> {
        ids.iter().map(|&(id, _)| Ok((id, features(id, None)?))).collect()
    };
    let val_features = cache(&val)?;
    let train_features = if cfg.augment { HashMap::new() } else { cache(&train)? };

    let sc = &cfg.pe;
    let mut opt = AdaBelief::new(AdaBeliefConfig::default());
    let mut best: Option<(f64, PatternExtractor)> = None;
    for epoch in 0..sc.epochs {
        let lr = lr_schedule(epoch, sc.lr, sc.lr_step, sc.lr_factor);
        rng.shuffle(&mut train);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in train.chunks(sc.batch_size) {
            let mut grads = GradStore::default();
            for &(id, slot) in batch {
                let f = if cfg.augment { features(id, Some(&mut rng))? } else { train_features[&id].clone() };
                let mut g = Graph::new();
                let p = pe.params.bind(&mut g, true);
                let fv = g.constant(f);
                let out = pe.forward(&mut g, &p, fv)?;
                correct += usize::from(attention_class(g.value(out.attention)) == slot);
                let loss = scouter_loss(&mut g, out.attention, slot, cfg.lambda, cfg.e, cfg.area_norm)?;
                loss_sum += g.value(loss).item();
                g.backward(loss)?;
                grads.accumulate(p.grads(&g));
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut pe.params, &grads, lr)?;
        }
        let mut val_correct = 0usize;
        for &(id, slot) in &val {
            let (_, a) = pe.infer(&val_features[&id])?;
            val_correct += usize::from(attention_class(&a) == slot);
        }
        let val_accuracy = if val.is_empty() { 0.0 } else { val_correct as f64 / val.len() as f64 };
        on_epoch(&EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
        });
        if best.as_ref().map_or(true, |(b, _)| val_accuracy > *b) {
            best = Some((val_accuracy, pe.clone()));
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or(pe))
}

/// Trains the matcher on base-split episodes. Backbone and pattern
/// extractor are frozen, so each epoch represents every base image once
/// (one augmented view) and all of that epoch's episodes reuse it.
pub fn train_matcher(
    ds: &Dataset,
    backbone: &Backbone,
    pe: &PatternExtractor,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Matcher> {
    let spec = cfg.episode_spec();
    let mut rng = Pcg32::new(cfg.seed, 3);
    // fail on infeasible episodes before spending time on features
    sample_episode(ds, Split::Base, spec, &mut rng.fork())?;
    let sc = &cfg.matcher;
    if sc.val_episodes > 0 {
        sample_episode(ds, Split::Val, spec, &mut rng.fork())?;
    }
    let mut matcher = Matcher::new(pe.config.channels, &mut rng)?;
    let base_ids = ds.images(Split::Base);
    let val_features = if sc.val_episodes > 0 {
        represent_images(backbone, pe, ds, &ds.images(Split::Val), None)?
    } else {
        HashMap::new()
    };
    let val_seed = validation_seed(cfg.seed, 0x3a7c);
    let aug = AugmentConfig::default();
    let mut opt = AdaBelief::new(AdaBeliefConfig::default());
    let mut best: Option<(f64, Matcher)> = None;
    for epoch in 0..sc.epochs {
        let lr = lr_schedule(epoch, sc.lr, sc.lr_step, sc.lr_factor);
        let bank = if cfg.augment {
            represent_images(backbone, pe, ds, &base_ids, Some((&mut rng, &aug)))?
        } else {
            represent_images(backbone, pe, ds, &base_ids, None)?
        };
        let (mut loss_sum, mut correct, mut total) = (0.0, 0usize, 0usize);
        let mut grads = GradStore::default();
        let mut pending = 0usize;
        for i in 0..sc.episodes {
            let ep = sample_episode(ds, Split::Base, spec, &mut rng)?;
            let (centroids, queries) = episode_vectors(&bank, &ep)?;
            let labels: Vec<usize> = ep.query.iter().map(|&(_, k)| k).collect();
            let mut g = Graph::new();
            let p = matcher.params.bind(&mut g, true);
            let q = g.constant(Tensor::matrix(queries.len(), matcher.channels, queries.concat())?);
            let c = g.constant(Tensor::matrix(centroids.len(), matcher.channels, centroids.concat())?);
            let logits = matcher.pair_logits(&mut g, &p, q, c)?;
            let k = centroids.len();
            for (row, &y) in g.value(logits).data().chunks(k).zip(&labels) {
                correct += usize::from(argmax(row) == y);
            }
            total += labels.len();
            let loss = episode_loss(&mut g, logits, &labels, cfg.loss)?;
            loss_sum += g.value(loss).item();
            g.backward(loss)?;
            grads.accumulate(p.grads(&g));
            pending += 1;
            if pending == sc.batch_size || i + 1 == sc.episodes {
                grads.scale(1.0 / pending as f64);
                opt.step(&mut matcher.params, &grads, lr)?;
                grads = GradStore::default();
                pending = 0;
            }
        }
        let val_accuracy = if sc.val_episodes > 0 {
            let clf = MatcherClassifier {
                matcher: &matcher,
                features: val_features.clone(),
            };
            evaluate(&clf, ds, Split::Val, spec, sc.val_episodes, val_seed, 1)?.mean
        } else {
            0.0
        };
        on_epoch(&EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / sc.episodes.max(1) as f64,
            train_accuracy: correct as f64 / total.max(1) as f64,
            val_accuracy,
        });
        if best.as_ref().map_or(true, |(b, _)| val_accuracy > *b) {
            best = Some((val_accuracy, matcher.clone()));
        }
    }
    Ok(best.map(|(_, m)| m).unwrap_or(matcher))
}
