use std::collections::HashSet;
use std::path::Path;

use proptest::prelude::*;

use mtunet::config::{lr_schedule, AreaNorm, LossKind};
use mtunet::data::{augment, hflip, sample_episode, AugmentConfig, Dataset, EpisodeSpec, Split};
use mtunet::explain::{overall_attention, render_heatmap, HeatmapSource};
use mtunet::graph::Graph;
use mtunet::init::glorot_uniform;
use mtunet::matcher::{average_supports, classify_query, episode_loss};
use mtunet::optim::{adabelief_step, AdaBeliefConfig, MomentState};
use mtunet::pattern::modulate;
use mtunet::tensor::Btsr;
use mtunet::train::scouter_loss;
use mtunet::{Checkpoint, Pcg32, Tensor};

fn matrix(max_rows: usize, max_cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(lo..hi, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

fn run<T>(f: impl FnOnce(&mut Graph) -> T) -> T {
    f(&mut Graph::new())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in matrix(5, 8, -30.0, 30.0), shift in -50.0f64..50.0) {
        let (a, b) = run(|g| {
            let v = g.constant(x.clone());
            let shifted = g.constant(x.map(|e| e + shift));
            let a = g.softmax_rows(v).unwrap();
            let b = g.softmax_rows(shifted).unwrap();
            (g.value(a).clone(), g.value(b).clone())
        });
        let (r, _) = a.dims2().unwrap();
        for i in 0..r {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(a.row(i).iter().all(|&p| p >= 0.0));
        }
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn modulation_is_bounded_by_its_factors(x in matrix(6, 10, -12.0, 12.0)) {
        let (a, s, sm) = run(|g| {
            let v = g.constant(x.clone());
            let a = modulate(g, v).unwrap();
            let s = g.sigmoid(v).unwrap();
            let sm = g.softmax_rows(v).unwrap();
            (g.value(a).clone(), g.value(s).clone(), g.value(sm).clone())
        });
        for i in 0..a.len() {
            prop_assert!(a.data()[i] > 0.0 && a.data()[i] < 1.0);
            prop_assert!(a.data()[i] <= s.data()[i] && a.data()[i] <= sm.data()[i]);
        }
        for r in 0..a.dims2().unwrap().0 {
            prop_assert!(a.row(r).iter().sum::<f64>() < 1.0);
        }
    }

    #[test]
    fn episodes_are_balanced_and_disjoint(
        way in 2usize..6,
        shot in 1usize..4,
        query in 1usize..6,
        seed in any::<u64>(),
    ) {
        let rows = (0..8)
            .flat_map(|c| (0..10).map(move |_| (Tensor::zeros(&[3, 1, 1]), format!("c{c}"), Split::Test)))
            .collect();
        let ds = Dataset::from_memory(rows).unwrap();
        let ep = sample_episode(&ds, Split::Test, EpisodeSpec::new(way, shot, query), &mut Pcg32::seeded(seed)).unwrap();
        prop_assert_eq!(ep.support.len(), way * shot);
        prop_assert_eq!(ep.query.len(), way * query);
        let s: HashSet<usize> = ep.support.iter().map(|p| p.0).collect();
        let q: HashSet<usize> = ep.query.iter().map(|p| p.0).collect();
        prop_assert!(s.is_disjoint(&q));
        prop_assert_eq!(s.len() + q.len(), way * (shot + query));
        for k in 0..way {
            prop_assert_eq!(ep.support_of(k).count(), shot);
            prop_assert_eq!(ep.query.iter().filter(|p| p.1 == k).count(), query);
        }
        prop_assert!(ep.support.iter().chain(&ep.query).all(|&(id, k)| ds.label(id) == ep.categories[k]));
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        tensors in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9_]{1,6}){0,2}", matrix(3, 4, -1e6, 1e6), 0..6)
    ) {
        let mut store = mtunet::ParamStore::new();
        for (name, t) in &tensors {
            store.insert(name.clone(), t.clone());
        }
        let ckpt = Checkpoint::from_stores([&store]);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), ckpt.to_bytes());
        for (name, t) in &tensors {
            prop_assert_eq!(back.get(name), Some(t));
        }
    }

    #[test]
    fn btsr_round_trip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
        let t = glorot_uniform(&shape, &mut Pcg32::seeded(seed));
        let bytes = t.to_btsr_bytes();
        let back = Btsr::read(&mut bytes.as_slice(), Path::new("mem")).unwrap().into_tensor();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn heatmaps_ignore_positive_scale(
        row in prop::collection::vec(0.0f64..1.0, 6),
        scale in 0.01f64..100.0,
    ) {
        let scaled: Vec<f64> = row.iter().map(|v| v * scale).collect();
        let a = render_heatmap(HeatmapSource::Overall, &row, (2, 3), (8, 12), None).unwrap();
        let b = render_heatmap(HeatmapSource::Overall, &scaled, (2, 3), (8, 12), None).unwrap();
        prop_assert!(a.map.max_abs_diff(&b.map) <= 1e-9);
        prop_assert!(a.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn overall_attention_ignores_pattern_order(a in matrix(5, 6, 0.0, 1.0), seed in any::<u64>()) {
        let (z, _) = a.dims2().unwrap();
        let mut order: Vec<usize> = (0..z).collect();
        Pcg32::seeded(seed).shuffle(&mut order);
        let rows: Vec<&[f64]> = order.iter().map(|&r| a.row(r)).collect();
        let x = overall_attention(&a).unwrap();
        let y = overall_attention(&Tensor::from_rows(&rows)).unwrap();
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p - q).abs() <= 1e-15);
        }
    }

    #[test]
    fn centroid_ignores_support_order(v in matrix(6, 5, -2.0, 2.0), seed in any::<u64>()) {
        let (n, _) = v.dims2().unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        Pcg32::seeded(seed).shuffle(&mut order);
        let a: Vec<&[f64]> = (0..n).map(|r| v.row(r)).collect();
        let b: Vec<&[f64]> = order.iter().map(|&r| v.row(r)).collect();
        let (x, y) = (average_supports(&a).unwrap(), average_supports(&b).unwrap());
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn classification_follows_category_relabeling(scores in prop::collection::vec(0.0f64..1.0, 2..8), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        Pcg32::seeded(seed).shuffle(&mut order);
        let permuted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let best = classify_query(&scores);
        prop_assert_eq!(scores[order[classify_query(&permuted)]], scores[best]);
        let squashed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        prop_assert_eq!(classify_query(&squashed), best);
    }

    #[test]
    fn losses_are_nonnegative(
        logits in matrix(4, 5, -20.0, 20.0),
        attention in matrix(5, 6, 0.0, 1.0),
        lambda in 0.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let (n, k) = logits.dims2().unwrap();
        let (z, _) = attention.dims2().unwrap();
        let mut rng = Pcg32::seeded(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.below_usize(k)).collect();
        let label = rng.below_usize(z);
        let values = run(|g| {
            let l = g.constant(logits.clone());
            let a = g.constant(attention.clone());
            let mut out = Vec::new();
            for kind in [LossKind::Bce, LossKind::SoftmaxCe] {
                let v = episode_loss(g, l, &labels, kind).unwrap();
                out.push(g.value(v).item());
            }
            for norm in [AreaNorm::Total, AreaNorm::Spatial] {
                let v = scouter_loss(g, a, label, lambda, 1.0, norm).unwrap();
                out.push(g.value(v).item());
            }
            out
        });
        prop_assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn augmentation_keeps_pixel_range(seed in any::<u64>()) {
        let mut rng = Pcg32::seeded(seed);
        let img = glorot_uniform(&[3, 9, 7], &mut rng).map(|v| (v + 1.0) / 2.0);
        let out = augment(&img, &mut rng, &AugmentConfig::default());
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn learning_rate_never_increases(base in 1e-5f64..1.0, step in 1usize..30, factor in 1.0f64..20.0) {
        let rates: Vec<f64> = (0..100).map(|e| lr_schedule(e, base, step, factor)).collect();
        prop_assert_eq!(rates[0], base);
        prop_assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn glorot_samples_stay_inside_the_bound(rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
        let t = glorot_uniform(&[rows, cols], &mut Pcg32::seeded(seed));
        let a = (6.0 / (rows + cols) as f64).sqrt();
        prop_assert!(t.data().iter().all(|v| v.abs() < a));
        prop_assert_eq!(t, glorot_uniform(&[rows, cols], &mut Pcg32::seeded(seed)));
    }

    #[test]
    fn adabelief_belief_stays_nonnegative(grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..20)) {
        let cfg = AdaBeliefConfig::default();
        let mut p = Tensor::zeros(&[4]);
        let mut twin = Tensor::zeros(&[4]);
        let mut state = MomentState::new(&p);
        let mut twin_state = MomentState::new(&twin);
        for (t, g) in grads.iter().enumerate() {
            let g = Tensor::vector(g.clone());
            adabelief_step("p", &mut p, &g, &mut state, 1e-3, &cfg).unwrap();
            adabelief_step("twin", &mut twin, &g, &mut twin_state, 1e-3, &cfg).unwrap();
            prop_assert_eq!(state.t, t as u64 + 1);
            prop_assert!(state.s.data().iter().all(|&s| s >= 0.0));
        }
        prop_assert_eq!(p, twin);
    }
}
