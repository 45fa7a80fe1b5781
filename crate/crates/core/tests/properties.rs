//! Randomized invariants.

mod common;

use std::collections::HashSet;

use common::*;
use gcr_core::data::{ClassId, ClassInfo, Partition};
use gcr_core::registration::{select_global, GlobalRepresentationTable, SimilarityVector};
use gcr_core::rng;
use gcr_core::synthesis::{draw_convex, synthesize};
use gcr_core::tensor::Tensor;
use gcr_core::trainer::{build_episode, Ablation, TrainingConfig};
use proptest::prelude::*;

fn table(rows: &[Vec<f64>]) -> GlobalRepresentationTable {
    let classes = (0..rows.len()).map(|i| ClassInfo { id: ClassId::new(format!("k{i}")), partition: Partition::Base }).collect();
    GlobalRepresentationTable::new(classes, Tensor::from_rows(rows)).unwrap()
}

proptest! {
    #[test]
    fn similarity_is_a_distribution(xs in prop::collection::vec(-50.0f64..0.0, 1..12)) {
        let v = SimilarityVector::from_neg_distances(xs);
        let total: f64 = v.probabilities.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(v.probabilities.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn similarity_ignores_a_common_shift(xs in prop::collection::vec(-20.0f64..0.0, 1..12), c in -30.0f64..30.0) {
        let a = SimilarityVector::from_neg_distances(xs.clone());
        let b = SimilarityVector::from_neg_distances(xs.iter().map(|x| x + c).collect());
        for (p, q) in a.probabilities.iter().zip(&b.probabilities) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn most_similar_is_nearest(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..8),
                               x in prop::collection::vec(-5.0f64..5.0, 3)) {
        let v = SimilarityVector::from_neg_distances(rows.iter().map(|r| -dist(&x, r)).collect());
        let nearest = (0..rows.len()).fold(0, |b, i| if dist(&x, &rows[i]) < dist(&x, &rows[b]) { i } else { b });
        prop_assert_eq!(v.argmax(), nearest);
        let best = v.probabilities.iter().cloned().fold(0.0, f64::max);
        prop_assert_eq!(v.probabilities[nearest], best);
    }

    #[test]
    fn convex_draws_stay_in_the_hull(k_t in 1usize..30, seed in any::<u64>()) {
        let mut r = rng::stream(seed, "prop", 0);
        let d = draw_convex(k_t, &mut r);
        prop_assert!(d.k_r >= 1 && d.k_r <= k_t);
        prop_assert_eq!(d.selected_indices.len(), d.k_r);
        prop_assert_eq!(d.selected_indices.iter().collect::<HashSet<_>>().len(), d.k_r);
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(d.weights.iter().all(|&w| w > 0.0));
        // every coordinate of the synthesis lies within the pool's range
        let feats: Vec<Vec<f64>> = (0..k_t).map(|i| vec![i as f64, (i * i) as f64 - 10.0]).collect();
        let s = synthesize(&feats, &d).unwrap();
        for j in 0..2 {
            let lo = feats.iter().map(|f| f[j]).fold(f64::INFINITY, f64::min);
            let hi = feats.iter().map(|f| f[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s[j] >= lo - 1e-9 && s[j] <= hi + 1e-9);
        }
    }

    #[test]
    fn sharp_similarity_selects_one_row(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..6),
                                         pick in any::<prop::sample::Index>()) {
        let t = table(&rows);
        let k = pick.index(rows.len());
        let mut v = vec![0.0; rows.len()];
        v[k] = 1.0;
        prop_assert_eq!(select_global(&v, &t).unwrap(), rows[k].clone());
        // a nearly one-hot vector lands next to the row
        let mut logits = vec![-1e3; rows.len()];
        logits[k] = 0.0;
        let sv = SimilarityVector::from_neg_distances(logits);
        let xi = select_global(&sv.probabilities, &t).unwrap();
        prop_assert!(dist(&xi, &rows[k]) < 1e-9);
    }
}

#[test]
fn episodes_never_reuse_an_item_or_touch_test_data() {
    let split = gcr_core::data::make_synthetic_gaussian(&gcr_core::data::SyntheticSpec {
        n_base: 6,
        n_novel: 4,
        dim: 3,
        samples_per_base: 12,
        n_few: 3,
        test_per_class: 4,
        class_separation: 2.0,
        seed: 8,
    })
    .unwrap();
    let test_ids: HashSet<&str> = split.test.iter().map(|s| s.sample_id.as_str()).collect();
    let by_class = split.train_by_class();
    for ablation in Ablation::ALL {
        let mut cfg = TrainingConfig::new(5, 3, 4, ablation, 0, 2);
        cfg.synthesis.k_t = 10;
        cfg.synthesis.augmenters = if ablation.s1() { vec!["feature_jitter".into()] } else { Vec::new() };
        let aug = cfg.augmenters().unwrap();
        for i in 0..1000 {
            let ep = build_episode(&split, &by_class, &cfg, &aug, i, &mut rng::stream(2, "episode", i)).unwrap();
            assert_eq!(ep.classes.iter().collect::<HashSet<_>>().len(), 5);
            for c in 0..ep.n_way() {
                let ids: Vec<&str> = ep.support_of(c).iter().chain(ep.query_of(c)).map(|a| a.sample.sample_id.as_str()).collect();
                assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len(), "{ablation} episode {i}: {ids:?}");
                assert!(ids.iter().all(|id| !test_ids.contains(id)));
                for a in ep.support_of(c).iter().chain(ep.query_of(c)) {
                    assert_eq!(a.sample.label, ep.classes[c]);
                }
                let novel = split.classes[ep.classes[c]].partition == Partition::Novel;
                assert_eq!(ep.draws[c].is_some(), novel && ablation.s2());
            }
        }
    }
}

#[test]
fn episodes_are_a_pure_function_of_seed_and_index() {
    let split = mini_split(1);
    let cfg = mini_config(Ablation::Full);
    let by_class = split.train_by_class();
    let aug = cfg.augmenters().unwrap();
    let build = |i| build_episode(&split, &by_class, &cfg, &aug, i, &mut rng::stream(cfg.seed, "episode", i)).unwrap();
    for i in 0..20 {
        assert_eq!(build(i), build(i));
    }
    assert_ne!(build(0), build(1));
}
