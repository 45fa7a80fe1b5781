//! Loss and prediction values against independently coded oracles.

mod common;

use std::sync::Arc;

use common::*;
use gcr_core::data::{ClassId, ClassInfo, DatasetSplit, Image, LabeledSample, Partition, Profile};
use gcr_core::error::Error;
use gcr_core::evaluation::{
    evaluate_generalized, evaluate_standard, predict_episode, EpisodeClasses, EpisodePredictor, GeneralizedMode, ModelPredictor, Selection,
    StandardEvalConfig, TestEpisode,
};
use gcr_core::exec::Exec;
use gcr_core::features::{ExtractorKind, Mode};
use gcr_core::registration::EmbeddingKind;
use gcr_core::rng;
use gcr_core::synthesis::{AugmentedSample, SynthesisConfig};
use gcr_core::tensor::Tensor;
use gcr_core::trainer::{episode_loss, extend_new_classes, Ablation, TrainingConfig};
use rand::{Rng, RngCore};

#[test]
fn full_episode_loss_matches_hand_computation() {
    for seed in [11, 12, 13] {
        let split = mini_split(seed);
        let table = hand_table();
        let model = identity_model(&split, table.clone());
        let ep = hand_episode(&split);
        let got = episode_loss(&model, &ep, Ablation::Full, Exec::Sequential).unwrap();
        let (reg, fsl) = hand_losses(&ep, &table);
        assert!((got.reg - reg).abs() < 1e-8, "{} vs {reg}", got.reg);
        assert!((got.fsl - fsl).abs() < 1e-8, "{} vs {fsl}", got.fsl);
        assert!((got.total - (reg + fsl)).abs() < 1e-8);
    }
}

#[test]
fn baseline_episode_is_prototypical() {
    // Without registration or synthesis the loss is the prototypical-network
    // loss over support means, computed here from eval-mode features.
    for seed in 0..5 {
        let split = mini_split(seed);
        let model = mini_model(&split, ExtractorKind::Mlp { hidden: 6 }, EmbeddingKind::Mlp { width: 3 }, seed);
        let cfg = mini_config(Ablation::B);
        let ep = mini_episode(&split, &cfg);
        let got = episode_loss(&model, &ep, Ablation::B, Exec::Sequential).unwrap();

        let f =
            |a: &AugmentedSample| model.extractor.extract(&[a.sample.image.as_ref()], Mode::Eval, Exec::Sequential).unwrap().into_data();
        let protos: Vec<Vec<f64>> = (0..ep.n_way())
            .map(|i| {
                let fs: Vec<Vec<f64>> = ep.support_of(i).iter().map(f).collect();
                (0..DIM).map(|j| fs.iter().map(|v| v[j]).sum::<f64>() / fs.len() as f64).collect()
            })
            .collect();
        let mut want = 0.0;
        for i in 0..ep.n_way() {
            for q in ep.query_of(i) {
                let logits: Vec<f64> = protos.iter().map(|p| -dist(&f(q), p)).collect();
                want += lse(&logits) - logits[i];
            }
        }
        assert!((got.total - want).abs() < 1e-10, "seed {seed}: {} vs {want}", got.total);
        assert_eq!(got.reg, 0.0);
    }
}

fn two_way_split() -> DatasetSplit {
    let mk = |id: &str, label: usize, v: [f64; 2]| LabeledSample { sample_id: id.into(), label, image: Arc::new(Image::from_vector(&v)) };
    DatasetSplit {
        profile: Profile::Synthetic { dim: 2 },
        classes: vec![
            ClassInfo { id: ClassId::new("p"), partition: Partition::Novel },
            ClassInfo { id: ClassId::new("q"), partition: Partition::Novel },
        ],
        train: vec![mk("p0", 0, [0.0, 0.0]), mk("q0", 1, [4.0, 0.0])],
        test: vec![mk("p1", 0, [1.0, 1.0]), mk("q1", 1, [2.5, 0.0]), mk("q2", 1, [3.0, -1.0])],
        n_few: 1,
        truth: None,
    }
}

#[test]
fn two_way_prediction_matches_hand_nearest_neighbour() {
    use gcr_core::features::Extractor;
    use gcr_core::registration::{Embeddings, GlobalRepresentationTable};
    let split = two_way_split();
    let shape = split.profile.image_shape();
    let table = Tensor::from_rows(&[vec![0.5, 0.0], vec![100.0, 0.0]]);
    let model = gcr_core::model::Model {
        extractor: Extractor::new(ExtractorKind::Identity, shape, &mut rng::stream(0, "t", 0)).unwrap(),
        embeddings: Embeddings::new(EmbeddingKind::Identity, 2, &mut rng::stream(0, "t", 0)),
        table: GlobalRepresentationTable::new(split.classes.clone(), table).unwrap(),
        feature_scale: vec![1.0; 2],
    };
    let ep = TestEpisode {
        classes: vec![0, 1],
        support: vec![vec![split.train[0].clone()], vec![split.train[1].clone()]],
        query: split.test.clone(),
        query_targets: vec![0, 1, 1],
    };
    let syn = SynthesisConfig::default();
    // Without registration the references are the shots: (0,0) and (4,0).
    let p = ModelPredictor {
        model: &model,
        split: &split,
        ablation: Ablation::B,
        synthesis: &syn,
        selection: Selection::Soft,
        test_synthesis: false,
    };
    let pred = predict_episode(&p, &ep, &mut rng::stream(0, "t", 0), Exec::Sequential).unwrap();
    assert_eq!(pred, vec![0, 1, 1]);

    // With registration: shot (0,0) registers to row 0 with weight
    // softmax(-0.5, -100) ~ 1, so xi_0 ~ (0.5, 0); shot (4,0) is 3.5 from row 0
    // and 96 from row 1, so xi_1 ~ (0.5, 0) as well, and hard selection makes
    // the two references identical; ties go to the first class.
    let hard = ModelPredictor { selection: Selection::Hard, ablation: Ablation::BR, ..p };
    let pred = predict_episode(&hard, &ep, &mut rng::stream(0, "t", 0), Exec::Sequential).unwrap();
    assert_eq!(pred, vec![0, 0, 0]);
}

#[test]
fn predicting_a_class_missing_from_the_table_is_a_contract_error() {
    let split = two_way_split();
    let model = {
        let mut s = split.clone();
        s.classes.truncate(1);
        s.train.truncate(1);
        s.test.truncate(1);
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]);
        let mut m = identity_model(&mini_split(0), Tensor::zeros([3, DIM]));
        m.extractor =
            gcr_core::features::Extractor::new(ExtractorKind::Identity, s.profile.image_shape(), &mut rng::stream(0, "t", 0)).unwrap();
        m.embeddings = gcr_core::registration::Embeddings::new(EmbeddingKind::Identity, 2, &mut rng::stream(0, "t", 0));
        m.table = gcr_core::registration::GlobalRepresentationTable::new(s.classes.clone(), t).unwrap();
        m.feature_scale = vec![1.0; 2];
        m
    };
    let ep = TestEpisode {
        classes: vec![0, 1],
        support: vec![vec![split.train[0].clone()], vec![split.train[1].clone()]],
        query: split.test.clone(),
        query_targets: vec![0, 1, 1],
    };
    let syn = SynthesisConfig::default();
    let p = ModelPredictor {
        model: &model,
        split: &split,
        ablation: Ablation::B,
        synthesis: &syn,
        selection: Selection::Soft,
        test_synthesis: false,
    };
    let err = predict_episode(&p, &ep, &mut rng::stream(0, "t", 0), Exec::Sequential).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

struct Perfect;
impl EpisodePredictor for Perfect {
    fn predict(&self, ep: &TestEpisode, _: &mut dyn RngCore, _: Exec) -> gcr_core::error::Result<Vec<usize>> {
        Ok(ep.query_targets.clone())
    }
}

struct Coin;
impl EpisodePredictor for Coin {
    fn predict(&self, ep: &TestEpisode, rng: &mut dyn RngCore, _: Exec) -> gcr_core::error::Result<Vec<usize>> {
        Ok(ep.query_targets.iter().map(|_| rng.random_range(0..ep.classes.len())).collect())
    }
}

fn gaussian_split(seed: u64) -> DatasetSplit {
    gcr_core::data::make_synthetic_gaussian(&gcr_core::data::SyntheticSpec {
        n_base: 4,
        n_novel: 5,
        dim: 3,
        samples_per_base: 20,
        n_few: 2,
        test_per_class: 6,
        class_separation: 3.0,
        seed,
    })
    .unwrap()
}

#[test]
fn standard_evaluation_of_a_perfect_predictor() {
    let split = gaussian_split(0);
    let cfg = StandardEvalConfig { n_test: 5, n_few: 2, n_q_test: 5, episodes: 50, ..Default::default() };
    let s = evaluate_standard(&Perfect, &split, &cfg, Exec::Parallel).unwrap();
    assert_eq!((s.mean, s.std, s.per_episode.len()), (1.0, 0.0, 50));
}

#[test]
fn standard_evaluation_is_reproducible_and_order_independent() {
    let split = gaussian_split(1);
    let cfg = StandardEvalConfig { n_test: 3, n_few: 2, n_q_test: 5, episodes: 64, seed: 9, ..Default::default() };
    let a = evaluate_standard(&Coin, &split, &cfg, Exec::Parallel).unwrap();
    let b = evaluate_standard(&Coin, &split, &cfg, Exec::Parallel).unwrap();
    let c = evaluate_standard(&Coin, &split, &cfg, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(a.mean > 0.1 && a.mean < 0.6);
}

#[test]
fn standard_evaluation_rejects_bad_configurations() {
    let split = gaussian_split(2);
    let too_wide = StandardEvalConfig { n_test: 6, n_few: 2, ..Default::default() };
    assert!(matches!(evaluate_standard(&Perfect, &split, &too_wide, Exec::Sequential), Err(Error::Config(_))));
    let too_many_queries = StandardEvalConfig { n_test: 5, n_few: 2, n_q_test: 7, ..Default::default() };
    assert!(matches!(evaluate_standard(&Perfect, &split, &too_many_queries, Exec::Sequential), Err(Error::Integrity(_))));
    let all = StandardEvalConfig { n_test: 9, n_few: 2, classes: EpisodeClasses::All, episodes: 3, ..Default::default() };
    assert!(evaluate_standard(&Perfect, &split, &all, Exec::Sequential).is_ok());
}

#[test]
fn generalized_metrics_agree_with_a_per_sample_loop() {
    for seed in 0..20 {
        let split = gaussian_split(seed);
        let mut r = rng::stream(seed, "gen-fixture", 0);
        let ext = gcr_core::features::Extractor::new(ExtractorKind::Mlp { hidden: 4 }, split.profile.image_shape(), &mut r).unwrap();
        let mut model = gcr_core::model::Model::initialize(ext, EmbeddingKind::Mlp { width: 5 }, &split, &mut r, Exec::Sequential).unwrap();
        for v in model.table.vectors.data_mut() {
            *v += r.random_range(-1.0..1.0);
        }
        let g = evaluate_generalized(&model, &split, GeneralizedMode::Registration, Exec::Parallel).unwrap();
        let (cb, tb, cn, tn) = brute_force_generalized(&model, &split);
        assert_eq!((g.correct_base, g.total_base, g.correct_novel, g.total_novel), (cb, tb, cn, tn), "seed {seed}");
        assert_eq!(g.acc_a, (cb + cn) as f64 / (tb + tn) as f64);
        let diag: u64 = (0..split.num_classes()).map(|c| g.confusion[c][c]).sum();
        assert_eq!(diag, cb + cn);
    }
}

#[test]
fn generalized_evaluation_needs_test_samples() {
    let mut split = gaussian_split(0);
    let model = gcr_core::model::Model::initialize(
        gcr_core::features::Extractor::new(ExtractorKind::Identity, split.profile.image_shape(), &mut rng::stream(0, "t", 0)).unwrap(),
        EmbeddingKind::Identity,
        &split,
        &mut rng::stream(0, "t", 0),
        Exec::Sequential,
    )
    .unwrap();
    split.test.clear();
    assert!(matches!(evaluate_generalized(&model, &split, GeneralizedMode::Registration, Exec::Sequential), Err(Error::Contract(_))));
}

fn new_class_split(seed: u64) -> DatasetSplit {
    let mut r = rng::stream(seed, "new-class", 0);
    let mut v = || -> Vec<f64> { (0..DIM).map(|_| 3.0 + r.random_range(-1.0..1.0)).collect() };
    let mk = |id: String, v: Vec<f64>| LabeledSample { sample_id: id, label: 0, image: Arc::new(Image::from_vector(&v)) };
    DatasetSplit {
        profile: Profile::Synthetic { dim: DIM },
        classes: vec![ClassInfo { id: ClassId::new("d"), partition: Partition::Novel }],
        train: vec![mk("d-tr0".into(), v()), mk("d-tr1".into(), v())],
        test: vec![mk("d-te0".into(), v())],
        n_few: 2,
        truth: None,
    }
}

#[test]
fn extension_without_episodes_appends_the_shot_mean() {
    let split = mini_split(4);
    let model = mini_model(&split, ExtractorKind::Mlp { hidden: 5 }, EmbeddingKind::Mlp { width: 3 }, 4);
    let new = new_class_split(4);
    let cfg = mini_config(Ablation::Full);
    let (ext, merged) = extend_new_classes(&model, &split, &new, &cfg, 0, Exec::Sequential, &mut |_| Ok(())).unwrap();
    assert_eq!(merged.num_classes(), 4);
    assert_eq!(ext.table.vectors.data()[..3 * DIM], model.table.vectors.data()[..]);
    let imgs: Vec<&Image> = new.train.iter().map(|s| s.image.as_ref()).collect();
    let f = model.extractor.extract_all(&imgs, Exec::Sequential).unwrap();
    for j in 0..DIM {
        let m = (f.row(0)[j] + f.row(1)[j]) / 2.0;
        assert!((ext.table.entry(3)[j] - m).abs() < 1e-12);
    }
    assert_eq!(ext.extractor, model.extractor);
    assert_eq!(ext.embeddings, model.embeddings);
}

#[test]
fn extension_trains_only_the_new_rows() {
    let split = mini_split(5);
    let model = mini_model(&split, ExtractorKind::Mlp { hidden: 5 }, EmbeddingKind::Mlp { width: 3 }, 5);
    let new = new_class_split(5);
    let mut cfg: TrainingConfig = mini_config(Ablation::Full);
    cfg.optimizer.base_lr = 0.05;
    let (zero, _) = extend_new_classes(&model, &split, &new, &cfg, 0, Exec::Sequential, &mut |_| Ok(())).unwrap();
    let mut seen = 0;
    let (ext, _) = extend_new_classes(&model, &split, &new, &cfg, 50, Exec::Sequential, &mut |_| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 50);
    let old: Vec<u64> = model.table.vectors.data().iter().map(|v| v.to_bits()).collect();
    let after: Vec<u64> = ext.table.vectors.data()[..3 * DIM].iter().map(|v| v.to_bits()).collect();
    assert_eq!(old, after);
    assert_eq!(ext.extractor, model.extractor);
    assert_eq!(ext.embeddings, model.embeddings);
    assert_ne!(ext.table.entry(3), zero.table.entry(3), "the new row should move");
}

#[test]
fn extension_rejects_an_existing_class_id() {
    let split = mini_split(6);
    let model = mini_model(&split, ExtractorKind::Identity, EmbeddingKind::Identity, 6);
    let mut new = new_class_split(6);
    new.classes[0].id = ClassId::new("b");
    let err = extend_new_classes(&model, &split, &new, &mini_config(Ablation::Full), 1, Exec::Sequential, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}
