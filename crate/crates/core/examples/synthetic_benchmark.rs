//! Library-only run on the synthetic Gaussian benchmark: pretrain, train one
//! ablation variant, then standard and generalized evaluation next to the
//! Bayes-optimal classifier.
//!
//! `cargo run --release -p gcr-core --example synthetic_benchmark -- [ablation] [episodes] [seed]`

use std::time::Instant;

use gcr_core::data::{make_synthetic_gaussian, SyntheticSpec, SyntheticTruth};
use gcr_core::error::Result;
use gcr_core::evaluation::{
    evaluate_generalized, evaluate_standard, EpisodeClasses, EpisodePredictor, GeneralizedMode, ModelPredictor, Selection,
    StandardEvalConfig, TestEpisode,
};
use gcr_core::exec::Exec;
use gcr_core::features::{pretrain_base_classifier, Extractor, ExtractorKind, PretrainConfig};
use gcr_core::model::Model;
use gcr_core::registration::EmbeddingKind;
use gcr_core::rng;
use gcr_core::trainer::{train, Ablation, TrainState, TrainingConfig};

/// Nearest true class mean among the episode's classes.
struct Bayes<'a>(&'a SyntheticTruth);

impl EpisodePredictor for Bayes<'_> {
    fn predict(&self, ep: &TestEpisode, _: &mut dyn rand::RngCore, _: Exec) -> Result<Vec<usize>> {
        Ok(ep.query.iter().map(|q| self.0.nearest(&q.image.to_f64(), &ep.classes)).collect())
    }
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ablation: Ablation = args.get(1).map_or("FULL", |s| s).parse()?;
    let episodes: u64 = args.get(2).map_or(10_000, |s| s.parse().expect("episodes"));
    let seed: u64 = args.get(3).map_or(0, |s| s.parse().expect("seed"));
    let exec = Exec::default();

    let split = make_synthetic_gaussian(&SyntheticSpec {
        n_base: 7,
        n_novel: 3,
        dim: 16,
        samples_per_base: 200,
        n_few: 5,
        test_per_class: 50,
        class_separation: 3.0,
        seed,
    })?;
    let mut ext =
        Extractor::new(ExtractorKind::Mlp { hidden: 16 }, split.profile.image_shape(), &mut rng::stream(seed, "init-extractor", 0))?;
    let report = pretrain_base_classifier(&mut ext, &split, &PretrainConfig { seed, ..Default::default() }, exec)?;
    println!("pretrain loss by epoch: {:?}", report.epoch_loss);

    let model = Model::initialize(ext, EmbeddingKind::default(), &split, &mut rng::stream(seed, "init-embeddings", 0), exec)?;
    let mut cfg = TrainingConfig::new(5, 5, 5, ablation, episodes, seed);
    if ablation.s1() {
        cfg.synthesis.augmenters = vec!["feature_jitter".into()];
        cfg.synthesis.jitter_std = 2.0;
    } else {
        cfg.synthesis.augmenters.clear();
    }
    let mut state = TrainState::new(model, &cfg.optimizer);
    let t = Instant::now();
    train(&mut state, &split, &cfg, exec, &mut |r, _| {
        if (r.episode + 1) % 1000 == 0 {
            println!("episode {}: L_reg {:.4}, L_fsl {:.4}", r.episode + 1, r.losses.reg, r.losses.fsl);
        }
        Ok(())
    })?;
    println!("{ablation}: {episodes} episodes in {:.1}s", t.elapsed().as_secs_f64());

    let m = &state.model;
    let ecfg = StandardEvalConfig { seed, classes: EpisodeClasses::All, ..Default::default() };
    for selection in [Selection::Soft, Selection::Hard] {
        let p = ModelPredictor { model: m, split: &split, ablation, synthesis: &cfg.synthesis, selection, test_synthesis: false };
        let s = evaluate_standard(&p, &split, &StandardEvalConfig { selection, ..ecfg }, exec)?;
        println!("5-way 5-shot ({selection:?}): {:.4} ± {:.4}", s.mean, s.ci95);
    }
    let bayes = evaluate_standard(&Bayes(split.truth.as_ref().expect("synthetic truth")), &split, &ecfg, exec)?;
    println!("5-way 5-shot (Bayes): {:.4}", bayes.mean);

    let mode = if ablation.r() { GeneralizedMode::Registration } else { GeneralizedMode::ClassMeans };
    let g = evaluate_generalized(m, &split, mode, exec)?;
    println!("generalized ({mode:?}): acc_a {:.4}, acc_b {:.4}, acc_n {:.4}", g.acc_a, g.acc_b, g.acc_n);
    Ok(())
}
