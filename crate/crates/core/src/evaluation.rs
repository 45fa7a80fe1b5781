//! Standard N-way K-shot test episodes and generalized prediction over the
//! joint label space.

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, LabeledSample, Partition};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{class_means, train_features, Model};
use crate::registration::argmax;
use crate::rng;
use crate::synthesis::{augment_step1, draw_convex, synthesize, AugmentedSample, SynthesisConfig};
use crate::tensor::Tensor;
use crate::trainer::{mean, Ablation};

/// How the class reference is taken from the similarity vector at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// `xi = V G`.
    #[default]
    Soft,
    /// The table row of the most similar class.
    Hard,
}

/// Which classes test episodes draw from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeClasses {
    #[default]
    Novel,
    /// Every class with enough test samples; for benchmarks with fewer
    /// novel classes than the way count.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardEvalConfig {
    /// Way count.
    pub n_test: usize,
    /// Shot count.
    pub n_few: usize,
    /// Queries per class.
    pub n_q_test: usize,
    pub episodes: usize,
    pub seed: u64,
    pub classes: EpisodeClasses,
    pub selection: Selection,
}

impl Default for StandardEvalConfig {
    fn default() -> Self {
        Self { n_test: 5, n_few: 5, n_q_test: 5, episodes: 600, seed: 0, classes: EpisodeClasses::Novel, selection: Selection::Soft }
    }
}

/// A sampled test episode; class `i` is `classes[i]` (an index into the
/// split) and queries are labelled by position.
#[derive(Clone, Debug, PartialEq)]
pub struct TestEpisode {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<LabeledSample>>,
    pub query: Vec<LabeledSample>,
    pub query_targets: Vec<usize>,
}

/// Anything that can label the queries of a test episode.
pub trait EpisodePredictor: Sync {
    /// Predicted position (into `episode.classes`) of every query.
    fn predict(&self, episode: &TestEpisode, rng: &mut dyn RngCore, exec: Exec) -> Result<Vec<usize>>;
}

/// The trained model under a given ablation path.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub split: &'a DatasetSplit,
    pub ablation: Ablation,
    pub synthesis: &'a SynthesisConfig,
    pub selection: Selection,
    /// Apply step-1/step-2 synthesis to the support shots as in training;
    /// otherwise novel classes use the plain support mean.
    pub test_synthesis: bool,
}

impl EpisodePredictor for ModelPredictor<'_> {
    fn predict(&self, episode: &TestEpisode, rng: &mut dyn RngCore, exec: Exec) -> Result<Vec<usize>> {
        predict_episode(self, episode, rng, exec)
    }
}

/// Episodic representations from the support shots, registration and selection of `xi`, then nearest `xi` in raw feature space
/// for every query.
pub fn predict_episode(p: &ModelPredictor<'_>, episode: &TestEpisode, rng: &mut dyn RngCore, exec: Exec) -> Result<Vec<usize>> {
    let model = p.model;
    let s1 = p.test_synthesis && p.ablation.s1();
    let s2 = p.test_synthesis && p.ablation.s2();
    let augmenters = if s1 { p.synthesis.build_augmenters()? } else { Vec::new() };
    let mut reps = Vec::with_capacity(episode.classes.len());
    for (&c, shots) in episode.classes.iter().zip(&episode.support) {
        let class = &p.split.classes[c];
        model
            .table
            .index_of(&class.id)
            .ok_or_else(|| Error::Contract(format!("support class `{}` is not in the model table", class.id)))?;
        let novel = class.partition == Partition::Novel;
        let pool: Vec<AugmentedSample> = if novel && s1 {
            augment_step1(shots, p.synthesis.k_t.max(shots.len()), &augmenters, rng)?
        } else {
            shots.iter().enumerate().map(|(i, s)| AugmentedSample::original(s.clone(), i)).collect()
        };
        let f = model.features_of(&pool.iter().collect::<Vec<_>>(), exec)?;
        let f: Vec<Vec<f64>> = (0..f.rows()).map(|i| f.row(i).to_vec()).collect();
        reps.push(if novel && s2 { synthesize(&f, &draw_convex(f.len(), rng))? } else { mean(&f)? });
    }
    let refs = if p.ablation.r() {
        let logits = model.embeddings.logits_eval(&Tensor::from_rows(&reps), &model.table.vectors)?;
        (0..logits.rows())
            .map(|i| match p.selection {
                Selection::Hard => model.table.entry(argmax(logits.row(i))).to_vec(),
                Selection::Soft => {
                    let v = crate::registration::SimilarityVector::from_neg_distances(logits.row(i).to_vec());
                    crate::registration::select_global(&v.probabilities, &model.table).expect("similarity covers the table")
                }
            })
            .collect()
    } else {
        reps
    };
    let q: Vec<AugmentedSample> = episode.query.iter().enumerate().map(|(i, s)| AugmentedSample::original(s.clone(), i)).collect();
    let qf = model.features_of(&q.iter().collect::<Vec<_>>(), exec)?;
    Ok(nearest_rows(&qf, &Tensor::from_rows(&refs)))
}

/// Index of the nearest row of `refs` (Euclidean) for every row of `x`.
pub fn nearest_rows(x: &Tensor, refs: &Tensor) -> Vec<usize> {
    let d = crate::autograd::pairwise_dist(x, refs);
    (0..d.rows()).map(|i| argmax(&d.row(i).iter().map(|v| -v).collect::<Vec<_>>())).collect()
}

/// Candidate classes for test episodes.
pub fn candidate_classes(split: &DatasetSplit, cfg: &StandardEvalConfig) -> Vec<usize> {
    match cfg.classes {
        EpisodeClasses::Novel => split.classes_in(Partition::Novel),
        EpisodeClasses::All => (0..split.num_classes()).collect(),
    }
}

/// Samples test episode `index`: `n_test` candidate classes, `n_few`
/// support shots from the training split and `n_q_test` distinct queries
/// from the test split of each.
pub fn sample_test_episode(
    split: &DatasetSplit,
    candidates: &[usize],
    train_by: &[Vec<usize>],
    test_by: &[Vec<usize>],
    cfg: &StandardEvalConfig,
    rng: &mut dyn RngCore,
) -> Result<TestEpisode> {
    let classes: Vec<usize> = index::sample(rng, candidates.len(), cfg.n_test).into_iter().map(|i| candidates[i]).collect();
    let mut support = Vec::with_capacity(cfg.n_test);
    let mut query = Vec::with_capacity(cfg.n_test * cfg.n_q_test);
    let mut query_targets = Vec::with_capacity(cfg.n_test * cfg.n_q_test);
    for (pos, &c) in classes.iter().enumerate() {
        let tr = &train_by[c];
        let shots = index::sample(rng, tr.len(), cfg.n_few).into_iter().map(|i| split.train[tr[i]].clone()).collect();
        support.push(shots);
        let te = &test_by[c];
        for i in index::sample(rng, te.len(), cfg.n_q_test) {
            query.push(split.test[te[i]].clone());
            query_targets.push(pos);
        }
    }
    Ok(TestEpisode { classes, support, query, query_targets })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracySummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `1.96 * std / sqrt(n)`.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

pub fn summarize(per_episode: Vec<f64>) -> AccuracySummary {
    let n = per_episode.len().max(1) as f64;
    let mean = per_episode.iter().sum::<f64>() / n;
    let std = (per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    AccuracySummary { mean, std, ci95: 1.96 * std / n.sqrt(), per_episode }
}

/// Mean and spread of per-episode accuracy over independently sampled test
/// episodes. Episode `i` uses stream `(seed, "test-episode", i)`, so the
/// result does not depend on evaluation order or parallelism.
pub fn evaluate_standard(
    predictor: &dyn EpisodePredictor,
    split: &DatasetSplit,
    cfg: &StandardEvalConfig,
    exec: Exec,
) -> Result<AccuracySummary> {
    if cfg.episodes == 0 || cfg.n_test == 0 || cfg.n_few == 0 || cfg.n_q_test == 0 {
        return Err(Error::Config("episodes, n_test, n_few and n_q_test must be at least 1".into()));
    }
    let candidates = candidate_classes(split, cfg);
    if cfg.n_test > candidates.len() {
        return Err(Error::Config(format!(
            "{}-way evaluation needs at least {} candidate classes, found {}",
            cfg.n_test,
            cfg.n_test,
            candidates.len()
        )));
    }
    let train_by = split.train_by_class();
    let test_by = split.test_by_class();
    for &c in &candidates {
        if test_by[c].len() < cfg.n_q_test || train_by[c].len() < cfg.n_few {
            return Err(Error::Integrity(format!(
                "class `{}` has {} shots and {} test samples; episodes need {} and {}",
                split.classes[c].id,
                train_by[c].len(),
                test_by[c].len(),
                cfg.n_few,
                cfg.n_q_test
            )));
        }
    }
    let inner = if exec.is_parallel() { Exec::Sequential } else { exec };
    let accs = exec.map(cfg.episodes, |i| -> Result<f64> {
        let mut r = rng::stream(cfg.seed, "test-episode", i as u64);
        let ep = sample_test_episode(split, &candidates, &train_by, &test_by, cfg, &mut r)?;
        let pred = predictor.predict(&ep, &mut r, inner)?;
        let hits = pred.iter().zip(&ep.query_targets).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / ep.query_targets.len() as f64)
    });
    Ok(summarize(accs.into_iter().collect::<Result<Vec<_>>>()?))
}

/// How a sample is labelled over all classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneralizedMode {
    /// Argmax of the registration similarity against the whole table.
    #[default]
    Registration,
    /// Nearest mean of the (eval-mode) training features of each class.
    ClassMeans,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizedMetrics {
    pub acc_a: f64,
    pub acc_b: f64,
    pub acc_n: f64,
    pub correct_base: u64,
    pub total_base: u64,
    pub correct_novel: u64,
    pub total_novel: u64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Class (index into the table) predicted for one sample by registration.
pub fn predict_generalized(model: &Model, sample: &LabeledSample, exec: Exec) -> Result<usize> {
    Ok(predict_generalized_batch(model, std::slice::from_ref(sample), None, exec)?[0])
}

/// Batch prediction over all classes. With `means`, nearest class mean in
/// raw feature space; otherwise registration.
pub fn predict_generalized_batch(model: &Model, samples: &[LabeledSample], means: Option<&Tensor>, exec: Exec) -> Result<Vec<usize>> {
    let items: Vec<AugmentedSample> = samples.iter().enumerate().map(|(i, s)| AugmentedSample::original(s.clone(), i)).collect();
    let f = model.features_of(&items.iter().collect::<Vec<_>>(), exec)?;
    match means {
        Some(m) => Ok(nearest_rows(&f, m)),
        None => {
            let logits = model.embeddings.logits_eval(&f, &model.table.vectors)?;
            Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
        }
    }
}

/// Classifies every test sample of `split` over all its classes.
pub fn evaluate_generalized(model: &Model, split: &DatasetSplit, mode: GeneralizedMode, exec: Exec) -> Result<GeneralizedMetrics> {
    model.check_split(split)?;
    if split.test.is_empty() {
        return Err(Error::Contract("generalized evaluation needs a nonempty test split".into()));
    }
    let means = match mode {
        GeneralizedMode::Registration => None,
        GeneralizedMode::ClassMeans => Some(class_means(split, &train_features(&model.extractor, split, exec)?)?),
    };
    let mut preds = Vec::with_capacity(split.test.len());
    for chunk in split.test.chunks(256) {
        preds.extend(predict_generalized_batch(model, chunk, means.as_ref(), exec)?);
    }
    let labels: Vec<usize> = split.test.iter().map(|s| s.label).collect();
    metrics_from_predictions(split, &labels, &preds)
}

/// Accuracies and confusion counts from true and predicted class indices.
pub fn metrics_from_predictions(split: &DatasetSplit, labels: &[usize], preds: &[usize]) -> Result<GeneralizedMetrics> {
    if labels.is_empty() || labels.len() != preds.len() {
        return Err(Error::Contract("need one prediction per test sample and at least one sample".into()));
    }
    let n = split.num_classes();
    let mut confusion = vec![vec![0u64; n]; n];
    let (mut cb, mut tb, mut cn, mut tn) = (0, 0, 0, 0);
    for (&y, &p) in labels.iter().zip(preds) {
        confusion[y][p] += 1;
        let hit = (y == p) as u64;
        match split.classes[y].partition {
            Partition::Base => {
                tb += 1;
                cb += hit;
            }
            Partition::Novel => {
                tn += 1;
                cn += hit;
            }
        }
    }
    let ratio = |c: u64, t: u64| if t == 0 { 0.0 } else { c as f64 / t as f64 };
    Ok(GeneralizedMetrics {
        acc_a: ratio(cb + cn, tb + tn),
        acc_b: ratio(cb, tb),
        acc_n: ratio(cn, tn),
        correct_base: cb,
        total_base: tb,
        correct_novel: cn,
        total_novel: tn,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_three_episodes() {
        let s = summarize(vec![1.0, 0.5, 0.75]);
        assert!((s.mean - 0.75).abs() < 1e-15);
        // population variance: (0.0625 + 0.0625 + 0) / 3
        assert!((s.std - (0.125f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.ci95 - 1.96 * s.std / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn nearest_rows_picks_closest() {
        let refs = Tensor::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0]]);
        let x = Tensor::from_rows(&[vec![4.0, 4.0], vec![0.5, -1.0]]);
        assert_eq!(nearest_rows(&x, &refs), vec![1, 0]);
    }
}
