//! Miniature fixtures shared by the integration tests: three classes (two
//! base, one novel) of 4-dimensional vectors.
#![allow(dead_code)]

use std::sync::Arc;

use gcr_core::data::{ClassId, ClassInfo, DatasetSplit, Image, LabeledSample, Partition, Profile};
use gcr_core::exec::Exec;
use gcr_core::features::{Extractor, ExtractorKind};
use gcr_core::model::Model;
use gcr_core::params::ParamStore;
use gcr_core::registration::{EmbeddingKind, Embeddings, GlobalRepresentationTable};
use gcr_core::rng;
use gcr_core::synthesis::{AugmentedSample, ConvexDraw, SynthesisConfig};
use gcr_core::tensor::Tensor;
use gcr_core::trainer::{build_episode, episode_graph, Ablation, Episode, EpisodeGraph, Trainable, TrainingConfig};
use rand::Rng;

pub const DIM: usize = 4;

fn vector(r: &mut impl Rng, center: f64) -> Vec<f64> {
    (0..DIM).map(|_| center + r.random_range(-1.0..1.0)).collect()
}

fn sample(id: String, label: usize, v: &[f64]) -> LabeledSample {
    LabeledSample { sample_id: id, label, image: Arc::new(Image::from_vector(v)) }
}

/// Base classes `a`, `b` with 4 training samples each; novel class `c`
/// with 2 shots; 2 test samples per class.
pub fn mini_split(seed: u64) -> DatasetSplit {
    let mut r = rng::stream(seed, "fixture", 0);
    let classes = vec![
        ClassInfo { id: ClassId::new("a"), partition: Partition::Base },
        ClassInfo { id: ClassId::new("b"), partition: Partition::Base },
        ClassInfo { id: ClassId::new("c"), partition: Partition::Novel },
    ];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, n_train) in [(0, 4), (1, 4), (2, 2)] {
        let center = label as f64 * 1.5 - 1.5;
        for k in 0..n_train {
            train.push(sample(format!("{label}-tr{k}"), label, &vector(&mut r, center)));
        }
        for k in 0..2 {
            test.push(sample(format!("{label}-te{k}"), label, &vector(&mut r, center)));
        }
    }
    let split = DatasetSplit { profile: Profile::Synthetic { dim: DIM }, classes, train, test, n_few: 2, truth: None };
    split.validate().expect("fixture is well formed");
    split
}

/// Model on `split` with the table moved off the class means, so every
/// term of the loss is active.
pub fn mini_model(split: &DatasetSplit, extractor: ExtractorKind, embedding: EmbeddingKind, seed: u64) -> Model {
    let mut r = rng::stream(seed, "fixture-model", 0);
    let ext = Extractor::new(extractor, split.profile.image_shape(), &mut r).unwrap();
    let mut m = Model::initialize(ext, embedding, split, &mut r, Exec::Sequential).unwrap();
    for v in m.table.vectors.data_mut() {
        *v += r.random_range(-0.5..0.5);
    }
    // Larger embedding weights than the library's init, so gradients through
    // the embeddings are not vanishingly small.
    let names: Vec<String> = m.embeddings.params.names().map(str::to_owned).collect();
    for n in names {
        if n.ends_with("fc.weight") {
            for v in m.embeddings.params.get_mut(&n).unwrap().data_mut() {
                *v = r.random_range(-0.7..0.7);
            }
        }
    }
    m
}

pub fn mini_config(ablation: Ablation) -> TrainingConfig {
    let mut cfg = TrainingConfig::new(2, 2, 2, ablation, 10, 0);
    cfg.synthesis = SynthesisConfig { k_t: 4, augmenters: vec!["feature_jitter".into()], jitter_std: 0.5 };
    cfg
}

/// First sampled episode that includes the novel class.
pub fn mini_episode(split: &DatasetSplit, cfg: &TrainingConfig) -> Episode {
    let by_class = split.train_by_class();
    let augmenters = cfg.augmenters().unwrap();
    (0..100)
        .map(|i| build_episode(split, &by_class, cfg, &augmenters, i, &mut rng::stream(cfg.seed, "episode", i)).unwrap())
        .find(|e| e.classes.contains(&2))
        .expect("some episode contains the novel class")
}

/// Identity extractor and embeddings over a hand-set table.
pub fn identity_model(split: &DatasetSplit, table: Tensor) -> Model {
    let shape = split.profile.image_shape();
    let extractor = Extractor::new(ExtractorKind::Identity, shape, &mut rng::stream(0, "x", 0)).unwrap();
    let embeddings = Embeddings::new(EmbeddingKind::Identity, DIM, &mut rng::stream(0, "x", 0));
    let table = GlobalRepresentationTable::new(split.classes.clone(), table).unwrap();
    Model { extractor, embeddings, table, feature_scale: vec![1.0; DIM] }
}

/// Hand-built FULL episode over classes (b, c): two support and two query
/// items each, with a step-2 draw for the novel class.
pub fn hand_episode(split: &DatasetSplit) -> Episode {
    let by = split.train_by_class();
    let t = |c: usize, k: usize| AugmentedSample::original(split.train[by[c][k]].clone(), 0);
    Episode {
        index: 0,
        classes: vec![1, 2],
        n_s: 2,
        n_q: 2,
        support: vec![t(1, 0), t(1, 1), t(2, 0), t(2, 1)],
        query: vec![t(1, 2), t(1, 3), t(2, 1), t(2, 0)],
        draws: vec![None, Some(ConvexDraw::from_raw(2, vec![1, 0], &[0.3, 0.9]).unwrap())],
    }
}

pub fn hand_table() -> Tensor {
    Tensor::from_rows(&[vec![-1.0, 0.5, 0.0, 2.0], vec![0.2, 0.1, -0.3, 0.0], vec![1.4, 1.6, 1.2, 1.5]])
}

/// Registration and classification losses of [`hand_episode`] under an
/// identity model, written out term by term.
pub fn hand_losses(ep: &Episode, table: &Tensor) -> (f64, f64) {
    let feat = |a: &AugmentedSample| a.sample.image.to_f64();
    let g: Vec<Vec<f64>> = (0..table.rows()).map(|i| table.row(i).to_vec()).collect();
    let s = |k: usize| feat(&ep.support[k]);
    // class b: plain mean; class c: weights 0.3 and 0.9 on supports 1 and 0
    let rep_b: Vec<f64> = (0..DIM).map(|j| (s(0)[j] + s(1)[j]) / 2.0).collect();
    let rep_c: Vec<f64> = (0..DIM).map(|j| 0.75 * s(2)[j] + 0.25 * s(3)[j]).collect();
    let mut reg = 0.0;
    let mut xi = Vec::new();
    for (rep, class) in [(&rep_b, 1), (&rep_c, 2)] {
        let logits: Vec<f64> = g.iter().map(|gc| -dist(rep, gc)).collect();
        let z = lse(&logits);
        reg += z - logits[class];
        let v: Vec<f64> = logits.iter().map(|l| (l - z).exp()).collect();
        xi.push((0..DIM).map(|j| (0..g.len()).map(|c| v[c] * g[c][j]).sum::<f64>()).collect::<Vec<f64>>());
    }
    let mut fsl = 0.0;
    for (q, target) in ep.query.iter().zip([0, 0, 1, 1]) {
        let logits: Vec<f64> = xi.iter().map(|x| -dist(&feat(q), x)).collect();
        fsl += lse(&logits) - logits[target];
    }
    (reg, fsl)
}

/// Which loss term to differentiate.
#[derive(Clone, Copy, Debug)]
pub enum Term {
    Registration,
    Classification,
    Total,
}

fn term_value(g: &EpisodeGraph, term: Term) -> f64 {
    let l = g.losses();
    match term {
        Term::Registration => l.reg,
        Term::Classification => l.fsl,
        Term::Total => l.total,
    }
}

/// Analytic gradient of one loss term, keyed by parameter name.
pub fn analytic(model: &Model, ep: &Episode, ablation: Ablation, term: Term) -> ParamStore {
    let g = episode_graph(model, ep, ablation, gcr_core::features::Mode::Train, Trainable::ALL, Exec::Sequential).unwrap();
    let out = match term {
        Term::Registration => g.reg.expect("registration enabled"),
        Term::Classification => g.fsl,
        Term::Total => g.total,
    };
    let mut grads = g.tape.backward(out);
    let mut store = ParamStore::new();
    for (name, v) in g.extractor.iter().chain(g.embeddings.iter()) {
        if let Some(t) = grads.take(v) {
            store.insert(name, t);
        }
    }
    if let Some(t) = grads.take(g.table) {
        store.insert("table", t);
    }
    store
}

pub fn loss_of(model: &Model, ep: &Episode, ablation: Ablation, term: Term) -> f64 {
    let g = episode_graph(model, ep, ablation, gcr_core::features::Mode::Train, Trainable::ALL, Exec::Sequential).unwrap();
    term_value(&g, term)
}

/// Largest elementwise relative error between the analytic gradient and
/// central differences, over every trainable tensor. Elements are compared
/// relative to `max(|analytic|, |numeric|, floor)`.
pub fn max_gradient_error(model: &Model, ep: &Episode, ablation: Ablation, term: Term, floor: f64) -> (f64, String) {
    const H: f64 = 1e-6;
    let grads = analytic(model, ep, ablation, term);
    let mut worst = (0.0, String::new());
    for name in model.param_names() {
        let n = model.param(&name).unwrap().len();
        let zero = Tensor::zeros(model.param(&name).unwrap().shape().to_vec());
        let a = grads.get(&name).unwrap_or(&zero);
        for i in 0..n {
            let mut plus = model.clone();
            plus.param_mut(&name).unwrap().data_mut()[i] += H;
            let mut minus = model.clone();
            minus.param_mut(&name).unwrap().data_mut()[i] -= H;
            let numeric = (loss_of(&plus, ep, ablation, term) - loss_of(&minus, ep, ablation, term)) / (2.0 * H);
            let an = a.data()[i];
            let err = (an - numeric).abs() / an.abs().max(numeric.abs()).max(floor);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]: analytic {an:.6e}, numeric {numeric:.6e}"));
            }
        }
    }
    worst
}

/// Generalized counts `(correct_base, total_base, correct_novel,
/// total_novel)` from a per-sample loop over the test split, labelling each
/// sample with its most probable table row.
pub fn brute_force_generalized(model: &Model, split: &DatasetSplit) -> (u64, u64, u64, u64) {
    let (mut cb, mut tb, mut cn, mut tn) = (0, 0, 0, 0);
    for s in &split.test {
        let f = model.extractor.extract(&[s.image.as_ref()], gcr_core::features::Mode::Eval, Exec::Sequential).unwrap().into_data();
        let sim = gcr_core::registration::similarity(&f, &model.table, &model.embeddings).unwrap();
        let mut best = 0;
        for (i, &p) in sim.probabilities.iter().enumerate() {
            if p > sim.probabilities[best] {
                best = i;
            }
        }
        let hit = (best == s.label) as u64;
        if split.classes[s.label].partition == Partition::Base {
            tb += 1;
            cb += hit;
        } else {
            tn += 1;
            cn += hit;
        }
    }
    (cb, tb, cn, tn)
}

pub fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
