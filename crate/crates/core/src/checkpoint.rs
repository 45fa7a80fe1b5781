//! Checkpoint files: one array container holding every tensor of the model
//! (and, for training checkpoints, the optimizer's momentum buffers), plus a
//! JSON manifest next to it for humans and joins with dataset splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{ClassInfo, ImageShape};
use crate::error::{Error, Result};
use crate::features::{Extractor, ExtractorKind};
use crate::model::{Model, TABLE};
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::registration::{EmbeddingKind, Embeddings, GlobalRepresentationTable};
use crate::store::ArrayFile;
use crate::tensor::Tensor;
use crate::trainer::TrainState;

const FORMAT: &str = "gcr-checkpoint-1";
const FEATURE_SCALE: &str = "synthesis.feature_scale";
const VELOCITY: &str = "optimizer.velocity.";
const BUFFER: &str = "buffer.";

/// Run-level facts stored with a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub seed: u64,
    /// Ablation label, when the checkpoint comes from episodic training.
    pub ablation: Option<String>,
    /// Free-form origin, e.g. `pretrain`, `train`, `extend`.
    pub stage: String,
}

/// The human-readable manifest written as `<checkpoint>.manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub info: CheckpointInfo,
    pub episode: u64,
    pub input: ImageShape,
    pub extractor: ExtractorKind,
    pub embedding: Option<EmbeddingKind>,
    pub feature_dim: usize,
    /// Table row order.
    pub classes: Vec<ClassInfo>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub tensors: BTreeMap<String, Vec<usize>>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn put_extractor(f: &mut ArrayFile, e: &Extractor) {
    for (k, t) in e.params.iter() {
        f.insert(k, t.clone());
    }
    for (k, t) in e.buffers.iter() {
        f.insert(format!("{BUFFER}{k}"), t.clone());
    }
    f.meta("extractor", json(&e.kind));
    f.meta("input", json(&e.input));
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn from_json<T: DeserializeOwned>(f: &ArrayFile, path: &Path, key: &str) -> Result<T> {
    serde_json::from_str(f.meta_str(path, key)?)
        .map_err(|e| Error::Checkpoint { path: path.to_owned(), reason: format!("bad `{key}`: {e}") })
}

/// Tensors whose names start with `prefix` and are not buffers or velocity.
fn take_params(f: &ArrayFile, prefix: &str) -> ParamStore {
    let mut s = ParamStore::new();
    for (k, t) in &f.tensors {
        if k.starts_with(prefix) {
            s.insert(k.clone(), t.clone());
        }
    }
    s
}

fn take_buffers(f: &ArrayFile, prefix: &str) -> ParamStore {
    let mut s = ParamStore::new();
    for (k, t) in &f.tensors {
        if let Some(name) = k.strip_prefix(BUFFER) {
            if name.starts_with(prefix) {
                s.insert(name, t.clone());
            }
        }
    }
    s
}

fn get_extractor(f: &ArrayFile, path: &Path) -> Result<Extractor> {
    let kind: ExtractorKind = from_json(f, path, "extractor")?;
    let input: ImageShape = from_json(f, path, "input")?;
    let e = Extractor { kind, input, params: take_params(f, "extractor."), buffers: take_buffers(f, "extractor.") };
    // Shapes must match a freshly built extractor of the same kind.
    let fresh = Extractor::new(kind, input, &mut crate::rng::stream(0, "shape-check", 0))?;
    for (store, reference) in [(&e.params, &fresh.params), (&e.buffers, &fresh.buffers)] {
        if store.len() != reference.len() || reference.iter().any(|(k, t)| store.get(k).map(|s| s.shape() != t.shape()).unwrap_or(true)) {
            return Err(Error::Checkpoint { path: path.to_owned(), reason: "extractor tensors do not match its kind".into() });
        }
    }
    Ok(e)
}

fn write(f: &mut ArrayFile, path: &Path, manifest: &Manifest) -> Result<()> {
    f.meta("format", FORMAT);
    f.meta("info", json(&manifest.info));
    f.meta("episode", manifest.episode);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    f.save(path)?;
    let m = manifest_path(path);
    std::fs::write(&m, serde_json::to_string_pretty(manifest).expect("manifest serializes")).map_err(|e| Error::io(m, e))
}

fn open(path: &Path) -> Result<ArrayFile> {
    let f = ArrayFile::load(path)?;
    if f.meta_str(path, "format")? != FORMAT {
        return Err(Error::Checkpoint { path: path.to_owned(), reason: "unknown checkpoint format".into() });
    }
    Ok(f)
}

fn manifest_for(
    f: &ArrayFile,
    e: &Extractor,
    info: &CheckpointInfo,
    episode: u64,
    embedding: Option<EmbeddingKind>,
    classes: Vec<ClassInfo>,
) -> Manifest {
    Manifest {
        format: FORMAT.into(),
        info: info.clone(),
        episode,
        input: e.input,
        extractor: e.kind,
        embedding,
        feature_dim: e.output_dim(),
        classes,
        input_mean: e.buffers.expect("extractor.input.mean").data().to_vec(),
        input_std: e.buffers.expect("extractor.input.std").data().to_vec(),
        tensors: f.tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
    }
}

/// Saves a (pretrained) extractor on its own.
pub fn save_extractor(path: &Path, e: &Extractor, info: &CheckpointInfo) -> Result<()> {
    let mut f = ArrayFile::new();
    put_extractor(&mut f, e);
    let m = manifest_for(&f, e, info, 0, None, Vec::new());
    write(&mut f, path, &m)
}

/// Loads the extractor from any checkpoint.
pub fn load_extractor(path: &Path) -> Result<Extractor> {
    get_extractor(&open(path)?, path)
}

/// Saves the model, the optimizer momentum buffers and the episode counter.
pub fn save_state(path: &Path, state: &TrainState, info: &CheckpointInfo) -> Result<()> {
    let mut f = ArrayFile::new();
    let m = &state.model;
    put_extractor(&mut f, &m.extractor);
    for (k, t) in m.embeddings.params.iter() {
        f.insert(k, t.clone());
    }
    for (k, t) in m.embeddings.buffers.iter() {
        f.insert(format!("{BUFFER}{k}"), t.clone());
    }
    f.insert(TABLE, m.table.vectors.clone());
    f.insert(FEATURE_SCALE, Tensor::new([m.feature_scale.len()], m.feature_scale.clone()));
    for (k, t) in state.optimizer.velocity.iter() {
        f.insert(format!("{VELOCITY}{k}"), t.clone());
    }
    f.meta("embedding", json(&m.embeddings.kind));
    f.meta("classes", json(&m.table.classes));
    f.meta("lr", state.optimizer.lr);
    f.meta("momentum", state.optimizer.momentum);
    let manifest = manifest_for(&f, &m.extractor, info, state.episode, Some(m.embeddings.kind), m.table.classes.clone());
    write(&mut f, path, &manifest)
}

/// Restores everything written by [`save_state`].
pub fn load_state(path: &Path) -> Result<(TrainState, CheckpointInfo)> {
    let f = open(path)?;
    let bad = |reason: &str| Error::Checkpoint { path: path.to_owned(), reason: reason.into() };
    let extractor = get_extractor(&f, path)?;
    let kind: EmbeddingKind = from_json(&f, path, "embedding")?;
    let classes: Vec<ClassInfo> = from_json(&f, path, "classes")?;
    let info: CheckpointInfo = from_json(&f, path, "info")?;
    let mut embeddings = Embeddings::new(kind, extractor.output_dim(), &mut crate::rng::stream(0, "shape-check", 0));
    let names: Vec<String> = embeddings.params.names().map(str::to_owned).collect();
    for n in names {
        let t = f.tensor(path, &n)?;
        if t.shape() != embeddings.params.expect(&n).shape() {
            return Err(bad(&format!("tensor `{n}` has the wrong shape")));
        }
        embeddings.params.insert(n, t.clone());
    }
    let names: Vec<String> = embeddings.buffers.names().map(str::to_owned).collect();
    for n in names {
        embeddings.buffers.insert(n.clone(), f.tensor(path, &format!("{BUFFER}{n}"))?.clone());
    }
    let table = GlobalRepresentationTable::new(classes, f.tensor(path, TABLE)?.clone()).map_err(|e| bad(&e.to_string()))?;
    if table.dim() != extractor.output_dim() {
        return Err(bad("table width differs from the extractor output"));
    }
    let feature_scale = f.tensor(path, FEATURE_SCALE)?.data().to_vec();
    let mut optimizer = Sgd::new(f.meta_parse(path, "lr")?, f.meta_parse(path, "momentum")?);
    for (k, t) in &f.tensors {
        if let Some(name) = k.strip_prefix(VELOCITY) {
            optimizer.velocity.insert(name, t.clone());
        }
    }
    let episode = f.meta_parse(path, "episode")?;
    let model = Model { extractor, embeddings, table, feature_scale };
    Ok((TrainState { model, optimizer, episode }, info))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m = manifest_path(path);
    let text = std::fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint { path: m, reason: e.to_string() })
}
