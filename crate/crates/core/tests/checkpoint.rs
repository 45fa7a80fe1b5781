//! Checkpoint round trips and resumption.

mod common;

use common::*;
use gcr_core::checkpoint::{load_extractor, load_state, read_manifest, save_extractor, save_state, CheckpointInfo};
use gcr_core::error::Error;
use gcr_core::exec::Exec;
use gcr_core::features::ExtractorKind;
use gcr_core::registration::EmbeddingKind;
use gcr_core::trainer::{train, Ablation, TrainState};

fn info() -> CheckpointInfo {
    CheckpointInfo { seed: 7, ablation: Some("FULL".into()), stage: "train".into() }
}

fn trained(episodes: u64) -> (gcr_core::data::DatasetSplit, TrainState, gcr_core::trainer::TrainingConfig) {
    let split = mini_split(2);
    let model = mini_model(&split, ExtractorKind::Mlp { hidden: 5 }, EmbeddingKind::Mlp { width: 3 }, 2);
    let mut cfg = mini_config(Ablation::Full);
    cfg.total_episodes = episodes;
    let mut state = TrainState::new(model, &cfg.optimizer);
    train(&mut state, &split, &cfg, Exec::Sequential, &mut |_, _| Ok(())).unwrap();
    (split, state, cfg)
}

#[test]
fn training_state_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.safetensors");
    let (split, state, _) = trained(5);
    save_state(&path, &state, &info()).unwrap();
    let (back, i) = load_state(&path).unwrap();
    assert_eq!(back, state);
    assert_eq!(i, info());
    let m = read_manifest(&path).unwrap();
    assert_eq!(m.episode, 5);
    assert_eq!(m.classes, split.classes);
    assert_eq!(m.embedding, Some(EmbeddingKind::Mlp { width: 3 }));
}

#[test]
fn extractor_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.safetensors");
    let (_, state, _) = trained(1);
    save_extractor(&path, &state.model.extractor, &CheckpointInfo::default()).unwrap();
    assert_eq!(load_extractor(&path).unwrap(), state.model.extractor);
    assert_eq!(read_manifest(&path).unwrap().embedding, None);
    assert!(load_state(&path).is_err(), "an extractor file is not a training state");
}

#[test]
fn damaged_or_missing_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.safetensors");
    let (_, state, _) = trained(1);
    save_state(&path, &state, &info()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_state(&path), Err(Error::Checkpoint { .. })));
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_state(&path), Err(Error::Checkpoint { .. })));
    assert!(load_state(&dir.path().join("absent.safetensors")).is_err());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.safetensors");
    let (split, straight, cfg) = trained(12);

    let (_, mut half, _) = trained(5);
    save_state(&path, &half, &info()).unwrap();
    let (mut resumed, _) = load_state(&path).unwrap();
    assert_eq!(resumed, half);
    let mut losses = Vec::new();
    train(&mut resumed, &split, &cfg, Exec::Sequential, &mut |r, _| {
        losses.push(r.losses.total);
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 7);
    assert_eq!(resumed, straight);

    // without the round trip as well
    train(&mut half, &split, &cfg, Exec::Sequential, &mut |_, _| Ok(())).unwrap();
    assert_eq!(half, straight);
}

#[test]
fn parallel_and_sequential_training_agree() {
    let split = mini_split(2);
    let model = mini_model(&split, ExtractorKind::Mlp { hidden: 5 }, EmbeddingKind::Mlp { width: 3 }, 2);
    let mut cfg = mini_config(Ablation::Full);
    cfg.total_episodes = 6;
    let mut a = TrainState::new(model.clone(), &cfg.optimizer);
    let mut b = TrainState::new(model, &cfg.optimizer);
    train(&mut a, &split, &cfg, Exec::Sequential, &mut |_, _| Ok(())).unwrap();
    train(&mut b, &split, &cfg, Exec::Parallel, &mut |_, _| Ok(())).unwrap();
    assert_eq!(a, b);
}
