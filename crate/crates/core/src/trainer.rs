//! Episodic training: episode construction, episodic representations, the
//! registration and classification losses, the optimization loop and the
//! frozen extension to unseen classes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Gradients, Tape, Var};
use crate::data::{DatasetSplit, Image, LabeledSample, Partition};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{apply_running_stats, Mode, StatsSink};
use crate::model::{class_means, Model, TABLE};
use crate::optim::{OptimizerConfig, Sgd};
use crate::params::{Bound, ParamStore};
use crate::registration::GlobalRepresentationTable;
use crate::rng;
use crate::synthesis::{augment_step1, draw_convex, duplicate_to, synthesize, AugmentedSample, Augmenter, ConvexDraw, SynthesisConfig};
use crate::tensor::Tensor;

/// Which of step-1 augmentation (S1), step-2 synthesis (S2) and the
/// registration module (R) are enabled on top of the mean-representation
/// baseline (B).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Ablation {
    B,
    BS1,
    BS1S2,
    BR,
    BS1R,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Ablation::B, Ablation::BS1, Ablation::BS1S2, Ablation::BR, Ablation::BS1R, Ablation::Full];

    pub fn s1(self) -> bool {
        matches!(self, Ablation::BS1 | Ablation::BS1S2 | Ablation::BS1R | Ablation::Full)
    }

    pub fn s2(self) -> bool {
        matches!(self, Ablation::BS1S2 | Ablation::Full)
    }

    pub fn r(self) -> bool {
        matches!(self, Ablation::BR | Ablation::BS1R | Ablation::Full)
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::B => "B",
            Ablation::BS1 => "B+S1",
            Ablation::BS1S2 => "B+S1+S2",
            Ablation::BR => "B+R",
            Ablation::BS1R => "B+S1+R",
            Ablation::Full => "FULL",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    /// Accepts `B`, `B+S1`, `B_S1`, ... and `FULL`, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "+");
        Ablation::ALL
            .into_iter()
            .find(|a| a.label() == norm)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected B, B+S1, B+S1+S2, B+R, B+S1+R or FULL)")))
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.label().to_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Classes per training episode.
    pub n_train: usize,
    /// Support items per class.
    pub n_s: usize,
    /// Query items per class.
    pub n_q: usize,
    pub synthesis: SynthesisConfig,
    pub ablation: Ablation,
    pub optimizer: OptimizerConfig,
    pub total_episodes: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn new(n_train: usize, n_s: usize, n_q: usize, ablation: Ablation, total_episodes: u64, seed: u64) -> Self {
        Self {
            n_train,
            n_s,
            n_q,
            synthesis: SynthesisConfig::default(),
            ablation,
            optimizer: OptimizerConfig::default(),
            total_episodes,
            checkpoint_every: 1000,
            seed,
        }
    }

    /// Checks the episode shape against a split.
    pub fn validate(&self, split: &DatasetSplit) -> Result<()> {
        if self.n_train == 0 || self.n_s == 0 || self.n_q == 0 {
            return Err(Error::Config("n_train, n_s and n_q must be at least 1".into()));
        }
        if self.n_train > split.num_classes() {
            return Err(Error::Config(format!("n_train = {} exceeds the {} available classes", self.n_train, split.num_classes())));
        }
        let has_novel = split.classes.iter().any(|c| c.partition == Partition::Novel);
        if has_novel && self.n_s + self.n_q > self.synthesis.k_t {
            return Err(Error::Config(format!(
                "n_s + n_q = {} must not exceed synthesis.k_t = {}",
                self.n_s + self.n_q,
                self.synthesis.k_t
            )));
        }
        if self.ablation.s1() {
            self.synthesis.validate(split.n_few)?;
        } else {
            self.synthesis.build_augmenters()?;
        }
        Ok(())
    }

    /// Augmenters in effect for this ablation (none without S1).
    pub fn augmenters(&self) -> Result<Vec<Box<dyn Augmenter>>> {
        if self.ablation.s1() {
            self.synthesis.build_augmenters()
        } else {
            Ok(Vec::new())
        }
    }
}

/// One training unit. Class `i` of the episode owns support items
/// `[i * n_s, (i + 1) * n_s)` and query items `[i * n_q, (i + 1) * n_q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub index: u64,
    /// Indices into the split's class list (equal to table rows).
    pub classes: Vec<usize>,
    pub n_s: usize,
    pub n_q: usize,
    pub support: Vec<AugmentedSample>,
    pub query: Vec<AugmentedSample>,
    /// Step-2 draw over the class's support items, when synthesized.
    pub draws: Vec<Option<ConvexDraw>>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn support_of(&self, i: usize) -> &[AugmentedSample] {
        &self.support[i * self.n_s..(i + 1) * self.n_s]
    }

    pub fn query_of(&self, i: usize) -> &[AugmentedSample] {
        &self.query[i * self.n_q..(i + 1) * self.n_q]
    }

    /// `[n_way, n_way * n_s]` matrix mapping support features to episodic
    /// representations (class means or step-2 weights).
    pub fn rep_weights(&self) -> Tensor {
        let n = self.n_way();
        let mut w = Tensor::zeros([n, n * self.n_s]);
        for i in 0..n {
            let row = &mut w.row_mut(i)[i * self.n_s..(i + 1) * self.n_s];
            match &self.draws[i] {
                Some(d) => row.copy_from_slice(&d.dense()),
                None => row.fill(1.0 / self.n_s as f64),
            }
        }
        w
    }

    pub fn query_targets(&self) -> Vec<usize> {
        (0..self.n_way()).flat_map(|i| std::iter::repeat_n(i, self.n_q)).collect()
    }

    pub fn class_ids(&self, split: &DatasetSplit) -> Vec<String> {
        self.classes.iter().map(|&c| split.classes[c].id.0.clone()).collect()
    }
}

/// Augmented pool of a novel class: step 1 when enabled, otherwise the
/// originals cycled without modification.
pub fn novel_pool(
    originals: &[LabeledSample],
    size: usize,
    augmenters: &[Box<dyn Augmenter>],
    s1: bool,
    rng: &mut dyn RngCore,
) -> Result<Vec<AugmentedSample>> {
    if s1 {
        augment_step1(originals, size.max(originals.len()), augmenters, rng)
    } else {
        duplicate_to(originals, size)
    }
}

/// Samples an episode: `n_train` classes uniformly without replacement from
/// all classes; `n_s + n_q` distinct training samples per base class; for a
/// novel class, `n_s + n_q` distinct items of its `k_t`-sized augmented pool.
pub fn build_episode(
    split: &DatasetSplit,
    by_class: &[Vec<usize>],
    cfg: &TrainingConfig,
    augmenters: &[Box<dyn Augmenter>],
    index: u64,
    rng: &mut dyn RngCore,
) -> Result<Episode> {
    let n = split.num_classes();
    if cfg.n_train > n {
        return Err(Error::Config(format!("n_train = {} exceeds the {n} available classes", cfg.n_train)));
    }
    let per = cfg.n_s + cfg.n_q;
    let classes = index::sample(rng, n, cfg.n_train).into_vec();
    let mut support = Vec::with_capacity(cfg.n_train * cfg.n_s);
    let mut query = Vec::with_capacity(cfg.n_train * cfg.n_q);
    let mut draws = Vec::with_capacity(cfg.n_train);
    for &c in &classes {
        let members = &by_class[c];
        let pool: Vec<AugmentedSample> = match split.classes[c].partition {
            Partition::Base => {
                if members.len() < per {
                    return Err(Error::Integrity(format!(
                        "base class `{}` has {} training samples but an episode needs {per}",
                        split.classes[c].id,
                        members.len()
                    )));
                }
                members.iter().map(|&i| AugmentedSample::original(split.train[i].clone(), i)).collect()
            }
            Partition::Novel => {
                let originals: Vec<LabeledSample> = members.iter().map(|&i| split.train[i].clone()).collect();
                if originals.is_empty() {
                    return Err(Error::Integrity(format!("novel class `{}` has no shots", split.classes[c].id)));
                }
                let size = cfg.synthesis.k_t.max(per);
                novel_pool(&originals, size, augmenters, cfg.ablation.s1(), rng)?
            }
        };
        let picked = index::sample(rng, pool.len(), per).into_vec();
        support.extend(picked[..cfg.n_s].iter().map(|&i| pool[i].clone()));
        query.extend(picked[cfg.n_s..].iter().map(|&i| pool[i].clone()));
        let synth = split.classes[c].partition == Partition::Novel && cfg.ablation.s2();
        draws.push(synth.then(|| draw_convex(cfg.n_s, rng)));
    }
    Ok(Episode { index, classes, n_s: cfg.n_s, n_q: cfg.n_q, support, query, draws })
}

/// Episodic representation of each class from its support features: the
/// mean, or the step-2 synthesis when a draw is given.
pub fn episodic_representations(features: &[Vec<Vec<f64>>], draws: &[Option<ConvexDraw>]) -> Result<Vec<Vec<f64>>> {
    if features.len() != draws.len() {
        return Err(Error::Contract("one draw slot per class is required".into()));
    }
    features
        .iter()
        .zip(draws)
        .map(|(f, d)| match d {
            Some(d) => synthesize(f, d),
            None => mean(f),
        })
        .collect()
}

pub(crate) fn mean(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = rows.first() else {
        return Err(Error::Contract("cannot average an empty feature list".into()));
    };
    let mut m = vec![0.0; first.len()];
    for r in rows {
        if r.len() != m.len() {
            return Err(Error::Contract("features differ in dimension".into()));
        }
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    Ok(m)
}

/// Cross-entropy of a query against the selected class references, with
/// logits `-|f - xi_i|` in raw feature space.
pub fn classification_loss(query_feature: &[f64], true_index: usize, selected: &[Vec<f64>]) -> Result<f64> {
    if true_index >= selected.len() {
        return Err(Error::Contract(format!("true index {true_index} out of range for {} classes", selected.len())));
    }
    if selected.iter().any(|x| x.len() != query_feature.len()) {
        return Err(Error::Contract("query and class references differ in dimension".into()));
    }
    let a = Tensor::new([1, query_feature.len()], query_feature.to_vec());
    let b = Tensor::from_rows(selected);
    let logits: Vec<f64> = crate::autograd::pairwise_dist(&a, &b).data().iter().map(|d| -d).collect();
    Ok(log_sum_exp(&logits) - logits[true_index])
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeLosses {
    /// Summed registration loss over the episode's classes (0 without R).
    pub reg: f64,
    /// Summed classification loss over the queries.
    pub fsl: f64,
    pub total: f64,
}

/// Which parameter groups are trainable leaves on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub extractor: bool,
    pub embeddings: bool,
    pub table: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { extractor: true, embeddings: true, table: true };
    pub const TABLE_ONLY: Trainable = Trainable { extractor: false, embeddings: false, table: true };
}

/// The episode's computation graph.
pub struct EpisodeGraph {
    pub tape: Tape,
    pub extractor: Bound,
    pub embeddings: Bound,
    pub table: Var,
    pub reg: Option<Var>,
    pub fsl: Var,
    pub total: Var,
    pub sink: StatsSink,
}

impl EpisodeGraph {
    pub fn losses(&self) -> EpisodeLosses {
        EpisodeLosses {
            reg: self.reg.map_or(0.0, |v| self.tape.value(v).item()),
            fsl: self.tape.value(self.fsl).item(),
            total: self.tape.value(self.total).item(),
        }
    }

    /// Gradients keyed by model parameter name.
    pub fn gradients(&self) -> ParamStore {
        let mut g = self.tape.backward(self.total);
        let mut out = ParamStore::new();
        collect(&mut out, &self.extractor, &mut g);
        collect(&mut out, &self.embeddings, &mut g);
        if let Some(t) = g.take(self.table) {
            out.insert(TABLE, t);
        }
        out
    }
}

fn collect(out: &mut ParamStore, bound: &Bound, g: &mut Gradients) {
    for (name, v) in bound.iter() {
        if let Some(t) = g.take(v) {
            out.insert(name, t);
        }
    }
}

/// Noise to add to extracted features, or `None` when no item has any.
fn noise_rows(items: &[&AugmentedSample], scale: &[f64]) -> Option<Tensor> {
    if items.iter().all(|a| a.noise.is_empty()) {
        return None;
    }
    let d = scale.len();
    let mut t = Tensor::zeros([items.len(), d]);
    for (i, a) in items.iter().enumerate() {
        a.finish_feature(t.row_mut(i), scale);
    }
    Some(t)
}

/// Builds the full loss graph of an episode: support and query features,
/// episodic representations, registration against the whole table, soft
/// selection and query classification.
pub fn episode_graph(
    model: &Model,
    episode: &Episode,
    ablation: Ablation,
    mode: Mode,
    trainable: Trainable,
    exec: Exec,
) -> Result<EpisodeGraph> {
    let mut tape = Tape::new(exec);
    let mut sink = StatsSink::new();
    let ext = model.extractor.params.bind(&mut tape, |_| trainable.extractor);
    let emb = model.embeddings.params.bind(&mut tape, |_| trainable.embeddings);
    let table = if trainable.table { tape.param(model.table.vectors.clone()) } else { tape.constant(model.table.vectors.clone()) };

    let items: Vec<&AugmentedSample> = episode.support.iter().chain(&episode.query).collect();
    let images: Vec<&Image> = items.iter().map(|a| a.sample.image.as_ref()).collect();
    let x = tape.constant(model.extractor.input_tensor(&images)?);
    let mut feats = model.extractor.forward(&mut tape, &ext, x, mode, &mut sink);
    if let Some(n) = noise_rows(&items, &model.feature_scale) {
        let n = tape.constant(n);
        feats = tape.add(feats, n);
    }
    let ns = episode.support.len();
    let support = tape.slice_rows(feats, 0, ns);
    let query = tape.slice_rows(feats, ns, items.len());
    let a = tape.constant(episode.rep_weights());
    let reps = tape.matmul(a, support);

    let (reg, refs) = if ablation.r() {
        let (loss, logits) = crate::registration::registration_loss_on_tape(
            &mut tape,
            &model.embeddings,
            &emb,
            reps,
            table,
            &episode.classes,
            mode,
            &mut sink,
        );
        let v = tape.softmax(logits);
        (Some(loss), tape.matmul(v, table))
    } else {
        (None, reps)
    };
    let d = tape.pairwise_dist(query, refs);
    let logits = tape.neg(d);
    let fsl = tape.cross_entropy(logits, &episode.query_targets());
    let total = match reg {
        Some(r) => tape.sum(&[r, fsl]),
        None => fsl,
    };
    Ok(EpisodeGraph { tape, extractor: ext, embeddings: emb, table, reg, fsl, total, sink })
}

/// Total loss of an episode in train mode, without updating anything.
pub fn episode_loss(model: &Model, episode: &Episode, ablation: Ablation, exec: Exec) -> Result<EpisodeLosses> {
    Ok(episode_graph(model, episode, ablation, Mode::Train, Trainable::ALL, exec)?.losses())
}

/// Loss and gradient of every trainable tensor.
pub fn episode_gradients(model: &Model, episode: &Episode, ablation: Ablation, exec: Exec) -> Result<(EpisodeLosses, ParamStore)> {
    let g = episode_graph(model, episode, ablation, Mode::Train, Trainable::ALL, exec)?;
    Ok((g.losses(), g.gradients()))
}

/// Everything needed to continue training: the model, the optimizer's
/// momentum buffers and the number of completed episodes. Episode `e` draws
/// from its own stream `(seed, "episode", e)`, so no generator state beyond
/// the counter is needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Sgd,
    pub episode: u64,
}

impl TrainState {
    pub fn new(model: Model, cfg: &OptimizerConfig) -> Self {
        Self { model, optimizer: Sgd::new(cfg.base_lr, cfg.momentum), episode: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub losses: EpisodeLosses,
    pub lr: f64,
    /// Seconds since this call to [`train`] started.
    pub wall_time: f64,
}

/// Per-episode hook: logging, periodic evaluation, checkpointing.
pub type Observer<'a> = dyn FnMut(&EpisodeRecord, &TrainState) -> Result<()> + 'a;

/// Runs episodes until `cfg.total_episodes` have been completed, updating
/// the extractor, both embeddings and every table row jointly.
pub fn train(state: &mut TrainState, split: &DatasetSplit, cfg: &TrainingConfig, exec: Exec, observer: &mut Observer<'_>) -> Result<()> {
    cfg.validate(split)?;
    state.model.check_split(split)?;
    let by_class = split.train_by_class();
    let augmenters = cfg.augmenters()?;
    let start = Instant::now();
    while state.episode < cfg.total_episodes {
        let e = state.episode;
        let mut r = rng::stream(cfg.seed, "episode", e);
        let episode = build_episode(split, &by_class, cfg, &augmenters, e, &mut r)?;
        let graph = episode_graph(&state.model, &episode, cfg.ablation, Mode::Train, Trainable::ALL, exec)?;
        let losses = graph.losses();
        if !losses.total.is_finite() {
            return Err(Error::NonFinite { episode: e, classes: episode.class_ids(split), seed: cfg.seed });
        }
        let grads = graph.gradients();
        let lr = cfg.optimizer.lr_at(e);
        state.optimizer.lr = lr;
        apply_gradients(&mut state.model, &mut state.optimizer, &grads);
        fold_running_stats(&mut state.model, &graph.sink);
        if !state.model.all_finite() {
            return Err(Error::NonFinite { episode: e, classes: episode.class_ids(split), seed: cfg.seed });
        }
        state.episode += 1;
        let rec = EpisodeRecord { episode: e, losses, lr, wall_time: start.elapsed().as_secs_f64() };
        observer(&rec, state)?;
    }
    Ok(())
}

fn apply_gradients(model: &mut Model, opt: &mut Sgd, grads: &ParamStore) {
    for (name, g) in grads.iter() {
        let p = model.param_mut(name).expect("gradient of a known parameter");
        opt.update(name, p, g);
    }
}

fn fold_running_stats(model: &mut Model, sink: &StatsSink) {
    let (ext, emb): (StatsSink, StatsSink) = sink.iter().cloned().partition(|(k, _)| k.starts_with("extractor."));
    apply_running_stats(&mut model.extractor.buffers, &ext);
    apply_running_stats(&mut model.embeddings.buffers, &emb);
}

/// Adds the classes of `new_split` to a trained model and fits only their
/// table rows. The extractor, embeddings (including running statistics) and
/// every pre-existing row are left untouched; all forward passes run in eval
/// mode. Returns the extended model and the merged split it indexes.
pub fn extend_new_classes(
    model: &Model,
    old_split: &DatasetSplit,
    new_split: &DatasetSplit,
    cfg: &TrainingConfig,
    episodes: u64,
    exec: Exec,
    observer: &mut dyn FnMut(&EpisodeRecord) -> Result<()>,
) -> Result<(Model, DatasetSplit)> {
    model.check_split(old_split)?;
    for c in &new_split.classes {
        if model.table.index_of(&c.id).is_some() {
            return Err(Error::Contract(format!("class id `{}` already exists in the model", c.id)));
        }
    }
    let merged = old_split.merge(new_split)?;
    cfg.validate(&merged)?;

    let images: Vec<&Image> = new_split.train.iter().map(|s| s.image.as_ref()).collect();
    let feats = model.extractor.extract_all(&images, exec)?;
    let new_rows = class_means(new_split, &feats)?;
    let n_old = model.table.len();
    let mut vectors = model.table.vectors.clone().into_data();
    vectors.extend_from_slice(new_rows.data());
    let d = model.table.dim();
    let mut out = model.clone();
    out.table = GlobalRepresentationTable::new(merged.classes.clone(), Tensor::new([merged.num_classes(), d], vectors))?;

    let by_class = merged.train_by_class();
    let augmenters = cfg.augmenters()?;
    let mut opt = Sgd::new(cfg.optimizer.base_lr, cfg.optimizer.momentum);
    let mut velocity = Tensor::zeros([merged.num_classes() - n_old, d]);
    let start = Instant::now();
    for e in 0..episodes {
        let mut r = rng::stream(cfg.seed, "extend-episode", e);
        let episode = build_episode(&merged, &by_class, cfg, &augmenters, e, &mut r)?;
        let graph = episode_graph(&out, &episode, cfg.ablation, Mode::Eval, Trainable::TABLE_ONLY, exec)?;
        let losses = graph.losses();
        if !losses.total.is_finite() {
            return Err(Error::NonFinite { episode: e, classes: episode.class_ids(&merged), seed: cfg.seed });
        }
        let mut grads = graph.gradients();
        opt.lr = cfg.optimizer.lr_at(e);
        if let Some(g) = grads.remove(TABLE) {
            let rows = out.table.vectors.data_mut();
            let (vg, vv) = (&g.data()[n_old * d..], velocity.data_mut());
            for ((p, v), gi) in rows[n_old * d..].iter_mut().zip(vv).zip(vg) {
                *v = opt.momentum * *v + gi;
                *p -= opt.lr * *v;
            }
        }
        observer(&EpisodeRecord { episode: e, losses, lr: opt.lr, wall_time: start.elapsed().as_secs_f64() })?;
    }
    Ok((out, merged))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_parsing_and_flags() {
        assert_eq!("b_s1_r".parse::<Ablation>().unwrap(), Ablation::BS1R);
        assert_eq!("FULL".parse::<Ablation>().unwrap(), Ablation::Full);
        assert!("B+S2".parse::<Ablation>().is_err());
        assert!(Ablation::Full.s1() && Ablation::Full.s2() && Ablation::Full.r());
        assert!(!Ablation::B.s1() && !Ablation::B.s2() && !Ablation::B.r());
        assert!(Ablation::BS1S2.s2() && !Ablation::BS1S2.r());
    }

    #[test]
    fn mean_representation_of_base_class() {
        let r = episodic_representations(&[vec![vec![0.0, 0.0], vec![2.0, 2.0]]], &[None]).unwrap();
        assert_eq!(r, vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn classification_loss_fixtures() {
        let l = classification_loss(&[0.0, 0.0], 0, &[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert!((l - 0.3133).abs() < 1e-4);
        let refs: Vec<Vec<f64>> = (0..5)
            .map(|k| {
                let a = k as f64 * 2.0 * std::f64::consts::PI / 5.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let l = classification_loss(&[0.0, 0.0], 3, &refs).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-9);
        let l = classification_loss(&[0.0, 0.0], 0, &[vec![0.0, 0.0], vec![10.0, 0.0]]).unwrap();
        assert!(l <= 1e-3);
        assert!(classification_loss(&[0.0], 2, &[vec![0.0]]).is_err());
    }
}
