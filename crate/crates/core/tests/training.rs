use std::collections::HashMap;

use mtunet::backbone::{nn_validate, pretrain_backbone, EpochLog};
use mtunet::config::{LossKind, TrainConfig};
use mtunet::data::{
    evaluate, generate_synthetic, sample_episode, Dataset, EpisodeSpec, NearestCentroid, Split, SynthConfig,
};
use mtunet::explain::matching_matrix;
use mtunet::graph::Graph;
use mtunet::matcher::{episode_loss, Matcher};
use mtunet::optim::{AdaBelief, AdaBeliefConfig};
use mtunet::params::GradStore;
use mtunet::train::{train_matcher, train_pe};
use mtunet::{Backbone, BackboneConfig, Mtunet, PatternExtractor, PeConfig, Pcg32, Tensor};

fn config(text: &str) -> TrainConfig {
    TrainConfig::from_ini(text).unwrap()
}

/// Two colours per split, plain colour plus noise.
fn two_colour_dataset() -> Dataset {
    let mut rng = Pcg32::seeded(8);
    let mut rows = Vec::new();
    let colours = [[0.9, 0.1, 0.1], [0.1, 0.1, 0.9], [0.1, 0.9, 0.1], [0.9, 0.9, 0.1], [0.1, 0.9, 0.9], [0.9, 0.1, 0.9]];
    for (c, colour) in colours.iter().enumerate() {
        let split = [Split::Base, Split::Val, Split::Test][c / 2];
        for _ in 0..8 {
            let data: Vec<f64> = (0..3 * 16 * 16)
                .map(|i| (colour[i / 256] + rng.uniform(-0.1, 0.1)).clamp(0.0, 1.0))
                .collect();
            rows.push((Tensor::new(vec![3, 16, 16], data).unwrap(), format!("colour{c}"), split));
        }
    }
    Dataset::from_memory(rows).unwrap()
}

#[test]
fn separable_backbone_training_fits_and_stays_on_base_and_val() {
    let ds = two_colour_dataset();
    let cfg = config("seed = 4\nway = 2\nshot = 1\nquery = 3\n[backbone]\nepochs = 50\nbatch_size = 4\nval_episodes = 5\n");
    let mut logs: Vec<EpochLog> = Vec::new();
    let backbone = pretrain_backbone(&ds, &cfg, &mut |l| logs.push(l.clone())).unwrap();
    assert_eq!(logs.len(), 50);
    assert!(logs.iter().any(|l| l.train_accuracy == 1.0), "{:?}", logs.last());
    assert!(ds.accessed(Split::Test).is_empty());
    assert_eq!(backbone.config.num_classes, 2);
    let again = pretrain_backbone(&ds, &cfg, &mut |_| {}).unwrap();
    assert_eq!(again, backbone);
}

#[test]
fn backbone_step_reduces_loss_on_a_fixed_batch() {
    let ds = two_colour_dataset();
    let mut backbone = Backbone::new(
        BackboneConfig {
            in_channels: 3,
            num_classes: 2,
        },
        &mut Pcg32::seeded(1),
    );
    let batch: Vec<(Tensor, usize)> = [0, 1, 8, 9].iter().map(|&id| ((*ds.image(id).unwrap()).clone(), id / 8)).collect();
    let loss = |b: &Backbone, grads: Option<&mut GradStore>| {
        let mut total = 0.0;
        let mut acc = GradStore::default();
        for (img, label) in &batch {
            total += b.classification_loss(img, *label, Some(&mut acc)).unwrap().0;
        }
        if let Some(g) = grads {
            acc.scale(1.0 / batch.len() as f64);
            *g = acc;
        }
        total / batch.len() as f64
    };
    let mut grads = GradStore::default();
    let before = loss(&backbone, Some(&mut grads));
    AdaBelief::new(AdaBeliefConfig::default())
        .step(&mut backbone.params, &grads, 1e-3)
        .unwrap();
    let after = loss(&backbone, None);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn matcher_step_reduces_episode_loss() {
    for (seed, kind) in [(1, LossKind::Bce), (2, LossKind::SoftmaxCe)] {
        let mut rng = Pcg32::seeded(seed);
        let mut matcher = Matcher::new(8, &mut rng).unwrap();
        let queries = Tensor::new(vec![15, 8], (0..120).map(|_| rng.next_f64()).collect()).unwrap();
        let centroids = Tensor::new(vec![5, 8], (0..40).map(|_| rng.next_f64()).collect()).unwrap();
        let labels: Vec<usize> = (0..15).map(|i| i % 5).collect();
        let loss = |m: &Matcher| {
            let mut g = Graph::new();
            let p = m.params.bind(&mut g, true);
            let q = g.constant(queries.clone());
            let c = g.constant(centroids.clone());
            let logits = m.pair_logits(&mut g, &p, q, c).unwrap();
            let l = episode_loss(&mut g, logits, &labels, kind).unwrap();
            let value = g.value(l).item();
            g.backward(l).unwrap();
            (value, p.grads(&g))
        };
        let (before, grads) = loss(&matcher);
        AdaBelief::new(AdaBeliefConfig::default())
            .step(&mut matcher.params, &grads, 1e-3)
            .unwrap();
        let (after, _) = loss(&matcher);
        assert!(after < before, "{kind:?}: {after} >= {before}");
    }
}

#[test]
fn nearest_centroid_on_random_features_is_at_chance() {
    let mut rng = Pcg32::seeded(12);
    let rows = (0..10)
        .flat_map(|c| (0..20).map(move |_| (Tensor::zeros(&[3, 1, 1]), format!("c{c}"), Split::Val)))
        .collect();
    let ds = Dataset::from_memory(rows).unwrap();
    let features: HashMap<usize, Vec<f64>> = (0..ds.len()).map(|id| (id, (0..16).map(|_| rng.next_f64()).collect())).collect();
    let report = evaluate(&NearestCentroid { features }, &ds, Split::Val, EpisodeSpec::new(5, 1, 15), 2000, 5, 1).unwrap();
    let sigma = report.ci95 / 1.96;
    assert!((report.mean - 0.2).abs() <= 3.0 * sigma, "{} ± {}", report.mean, sigma);
}

#[test]
fn nn_validate_rejects_too_few_categories() {
    let ds = two_colour_dataset();
    let backbone = Backbone::new(
        BackboneConfig {
            in_channels: 3,
            num_classes: 0,
        },
        &mut Pcg32::seeded(1),
    );
    assert!(nn_validate(&backbone, &ds, Split::Val, 3, EpisodeSpec::new(3, 1, 2), 0).is_err());
    let acc = nn_validate(&backbone, &ds, Split::Val, 3, EpisodeSpec::new(2, 1, 2), 0).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn sampler_draws_categories_uniformly() {
    let rows = (0..20)
        .flat_map(|c| (0..16).map(move |_| (Tensor::zeros(&[3, 1, 1]), format!("c{c}"), Split::Base)))
        .collect();
    let ds = Dataset::from_memory(rows).unwrap();
    let mut counts = vec![0.0; 20];
    let episodes = 5000;
    for i in 0..episodes {
        let ep = sample_episode(&ds, Split::Base, EpisodeSpec::new(5, 1, 15), &mut mtunet::rng::indexed(31, i)).unwrap();
        for c in ep.categories {
            counts[c] += 1.0;
        }
    }
    let expected = episodes as f64 * 5.0 / 20.0;
    let chi2: f64 = counts.iter().map(|o| (o - expected) * (o - expected) / expected).sum();
    // 19 degrees of freedom, upper 0.001 quantile
    assert!(chi2 < 43.82, "chi-square {chi2}");
}

#[test]
fn evaluation_on_test_never_reads_base_images() {
    let ds = two_colour_dataset();
    let mut rng = Pcg32::seeded(3);
    let model = Mtunet {
        backbone: Backbone::new(
            BackboneConfig {
                in_channels: 3,
                num_classes: 0,
            },
            &mut rng,
        ),
        pe: PatternExtractor::new(
            PeConfig {
                channels: 64,
                dim: 8,
                slots: 2,
                iterations: 2,
            },
            &mut rng,
        )
        .unwrap(),
        matcher: Matcher::new(64, &mut rng).unwrap(),
    };
    let before = model.checkpoint().to_bytes();
    ds.clear_access_log();
    let clf = model.classifier(&ds, &ds.images(Split::Test)).unwrap();
    let report = evaluate(&clf, &ds, Split::Test, EpisodeSpec::new(2, 1, 3), 10, 0, 1).unwrap();
    assert_eq!(report.episodes, 10);
    assert!(ds.accessed(Split::Base).is_empty());
    assert!(ds.accessed(Split::Val).is_empty());
    assert_eq!(ds.accessed(Split::Test).len(), 16);
    assert_eq!(model.checkpoint().to_bytes(), before);
}

/// Trains all stages on the standard synthetic set and checks the
/// pattern accuracy floor, best-epoch selection and matching matrices.
#[test]
fn stages_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(
        dir.path(),
        &SynthConfig {
            n_base: 10,
            n_val: 5,
            n_test: 5,
            per_class: 60,
            size: 32,
            seed: 1,
        },
    )
    .unwrap();
    let cfg = config(
        "seed = 1\npe_stride = 2\n[backbone]\nepochs = 15\n[pe]\nepochs = 15\n[matcher]\nepochs = 5\nepisodes = 200\n",
    );
    let backbone = pretrain_backbone(&ds, &cfg, &mut |_| {}).unwrap();
    let frozen = backbone.clone();

    let mut pe_logs: Vec<EpochLog> = Vec::new();
    let pe = train_pe(&ds, &backbone, &cfg, &mut |l| pe_logs.push(l.clone())).unwrap();
    assert_eq!(backbone, frozen);
    assert_eq!(pe.config.slots, 5);
    let best_pe = pe_logs.iter().map(|l| l.val_accuracy).fold(0.0, f64::max);
    assert!(best_pe > 3.0 * 0.2, "pattern validation accuracy {best_pe}");
    // the kept weights are those of the first best epoch
    let best_epoch = pe_logs.iter().position(|l| l.val_accuracy == best_pe).unwrap();
    if best_epoch + 1 < cfg.pe.epochs {
        let mut short = cfg.clone();
        short.pe.epochs = best_epoch + 1;
        assert_eq!(train_pe(&ds, &backbone, &short, &mut |_| {}).unwrap(), pe);
    }

    let mut pm_logs: Vec<EpochLog> = Vec::new();
    let matcher = train_matcher(&ds, &backbone, &pe, &cfg, &mut |l| pm_logs.push(l.clone())).unwrap();
    let best_pm = pm_logs.iter().map(|l| l.val_accuracy).fold(0.0, f64::max);
    let best_epoch = pm_logs.iter().position(|l| l.val_accuracy == best_pm).unwrap();
    if best_epoch + 1 < cfg.matcher.epochs {
        let mut short = cfg.clone();
        short.matcher.epochs = best_epoch + 1;
        assert_eq!(train_matcher(&ds, &backbone, &pe, &short, &mut |_| {}).unwrap(), matcher);
    }

    let model = Mtunet { backbone, pe, matcher };
    let episodes = 50;
    let mut dominant = 0;
    for i in 0..episodes {
        let ep = sample_episode(&ds, Split::Test, cfg.episode_spec(), &mut mtunet::rng::indexed(77, i)).unwrap();
        let m = matching_matrix(&model, &ds, &ep).unwrap();
        let k = m.scores.len();
        // every explained query scores highest against its own category
        let ok = (0..k).all(|col| (0..k).all(|row| row == col || m.scores[row][col] < m.scores[col][col]));
        dominant += usize::from(ok);
        assert!(m.scores.iter().flatten().all(|v| (0.0..=100.0).contains(v)));
    }
    eprintln!("pattern val {best_pe:.3}, matcher val {best_pm:.3}, {dominant} of {episodes} diagonal-dominant");
    assert!(2 * dominant > episodes as usize, "{dominant} of {episodes} diagonal-dominant");
}
