//! The registration module: compares (episodic) representations with every
//! global class representation in a learned embedding space.
//!
//! For a representation `r` and table entries `g_1..g_N`,
//! `d_j = -|theta(r) - phi(g_j)|` (Euclidean, not squared) and the
//! similarity vector is `softmax(d)`. Registration loss is the cross-entropy
//! of that vector against the true class; soft selection returns
//! `sum_j v_j g_j`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Tape, Var};
use crate::data::{ClassId, ClassInfo};
use crate::error::{Error, Result};
use crate::features::{bn_layer, init_bn, Mode, StatsSink};
use crate::params::{gaussian, Bound, ParamStore};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian initialization of `theta` / `phi`.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingKind {
    /// `theta = phi = id`; for hand-checkable fixtures.
    Identity,
    /// Fully-connected layer, batch norm, ReLU.
    Mlp { width: usize },
}

impl Default for EmbeddingKind {
    fn default() -> Self {
        EmbeddingKind::Mlp { width: 512 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    /// `theta`, applied to features and episodic representations.
    Theta,
    /// `phi`, applied to global representations.
    Phi,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Theta => "theta",
            Side::Phi => "phi",
        }
    }
}

/// The two embedding maps. Same architecture, independent weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub kind: EmbeddingKind,
    pub input_dim: usize,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

impl Embeddings {
    pub fn new(kind: EmbeddingKind, input_dim: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        if let EmbeddingKind::Mlp { width } = kind {
            for side in [Side::Theta, Side::Phi] {
                let p = side.prefix();
                params.insert(format!("{p}.fc.weight"), gaussian([input_dim, width], EMBEDDING_INIT_STD, rng));
                params.insert(format!("{p}.fc.bias"), Tensor::zeros([width]));
                init_bn(&mut params, &mut buffers, &format!("{p}.bn"), width);
            }
        }
        Self { kind, input_dim, params, buffers }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            EmbeddingKind::Identity => self.input_dim,
            EmbeddingKind::Mlp { width } => width,
        }
    }

    /// Embeds the rows of `x` with `theta` or `phi`.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, side: Side, x: Var, mode: Mode, sink: &mut StatsSink) -> Var {
        match self.kind {
            EmbeddingKind::Identity => x,
            EmbeddingKind::Mlp { .. } => {
                let p = side.prefix();
                let h = tape.linear(x, bound.var(&format!("{p}.fc.weight")), bound.var(&format!("{p}.fc.bias")));
                let h = bn_layer(tape, h, bound, &self.buffers, &format!("{p}.bn"), mode, sink);
                tape.relu(h)
            }
        }
    }

    /// `[m, n]` matrix of `-|theta(rep_i) - phi(g_j)|`.
    #[allow(clippy::too_many_arguments)]
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, reps: Var, table: Var, mode: Mode, sink: &mut StatsSink) -> Var {
        let a = self.embed(tape, bound, Side::Theta, reps, mode, sink);
        let b = self.embed(tape, bound, Side::Phi, table, mode, sink);
        let d = tape.pairwise_dist(a, b);
        tape.neg(d)
    }

    /// Eval-mode logits for plain tensors.
    pub fn logits_eval(&self, reps: &Tensor, table: &Tensor) -> Result<Tensor> {
        if reps.row_len() != self.input_dim || table.row_len() != self.input_dim {
            return Err(Error::Contract(format!(
                "registration expects {}-dimensional inputs, got {} and {}",
                self.input_dim,
                reps.row_len(),
                table.row_len()
            )));
        }
        let mut tape = Tape::default();
        let bound = self.params.bind(&mut tape, |_| false);
        let r = tape.constant(reps.clone());
        let t = tape.constant(table.clone());
        let l = self.logits(&mut tape, &bound, r, t, Mode::Eval, &mut StatsSink::new());
        Ok(tape.value(l).clone())
    }
}

/// Trainable map from every class (base and novel) to its global
/// representation. Row `i` of `vectors` belongs to `classes[i]`; the order is
/// fixed for the lifetime of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalRepresentationTable {
    pub classes: Vec<ClassInfo>,
    pub vectors: Tensor,
}

impl GlobalRepresentationTable {
    pub fn new(classes: Vec<ClassInfo>, vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != classes.len() {
            return Err(Error::Contract(format!(
                "table of {} classes needs a [{}, d] matrix, got {:?}",
                classes.len(),
                classes.len(),
                vectors.shape()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::Contract("global representations must be finite".into()));
        }
        Ok(Self { classes, vectors })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.row_len()
    }

    pub fn index_of(&self, id: &ClassId) -> Option<usize> {
        self.classes.iter().position(|c| &c.id == id)
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }
}

/// Similarity of one representation to every table entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityVector {
    /// Softmax of `neg_distances`, in table order.
    pub probabilities: Vec<f64>,
    /// `-|theta(f) - phi(g_j)|` for each class `j`.
    pub neg_distances: Vec<f64>,
}

impl SimilarityVector {
    pub fn from_neg_distances(neg_distances: Vec<f64>) -> Self {
        let n = neg_distances.len();
        let probabilities = softmax_rows(&Tensor::new([1, n], neg_distances.clone())).into_data();
        Self { probabilities, neg_distances }
    }

    /// Most similar class. Identical to the argmin of embedded distance.
    pub fn argmax(&self) -> usize {
        argmax(&self.neg_distances)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode similarity of a single feature against the whole table.
pub fn similarity(feature: &[f64], table: &GlobalRepresentationTable, emb: &Embeddings) -> Result<SimilarityVector> {
    if feature.len() != table.dim() {
        return Err(Error::Contract(format!("feature has {} dimensions, table entries have {}", feature.len(), table.dim())));
    }
    let l = emb.logits_eval(&Tensor::new([1, feature.len()], feature.to_vec()), &table.vectors)?;
    Ok(SimilarityVector::from_neg_distances(l.into_data()))
}

/// Similarity vectors for every row of `features`.
pub fn similarity_batch(features: &Tensor, table: &GlobalRepresentationTable, emb: &Embeddings) -> Result<Vec<SimilarityVector>> {
    let l = emb.logits_eval(features, &table.vectors)?;
    Ok((0..l.rows()).map(|i| SimilarityVector::from_neg_distances(l.row(i).to_vec())).collect())
}

/// Cross-entropy between the one-hot `true_class` and the similarity vector
/// of `rep`.
pub fn registration_loss(rep: &[f64], true_class: &ClassId, table: &GlobalRepresentationTable, emb: &Embeddings) -> Result<f64> {
    let t = table.index_of(true_class).ok_or_else(|| Error::Contract(format!("class `{true_class}` is not in the table")))?;
    let v = similarity(rep, table, emb)?;
    Ok(cross_entropy_from_logits(&v.neg_distances, t))
}

pub(crate) fn cross_entropy_from_logits(logits: &[f64], target: usize) -> f64 {
    crate::autograd::log_sum_exp(logits) - logits[target]
}

/// Summed registration loss on the tape for a batch of representations.
#[allow(clippy::too_many_arguments)]
pub fn registration_loss_on_tape(
    tape: &mut Tape,
    emb: &Embeddings,
    bound: &Bound,
    reps: Var,
    table: Var,
    targets: &[usize],
    mode: Mode,
    sink: &mut StatsSink,
) -> (Var, Var) {
    let logits = emb.logits(tape, bound, reps, table, mode, sink);
    let loss = tape.cross_entropy(logits, targets);
    (loss, logits)
}

/// Soft selection `xi = sum_j v_j g_j`.
pub fn select_global(v: &[f64], table: &GlobalRepresentationTable) -> Result<Vec<f64>> {
    if v.len() != table.len() {
        return Err(Error::Contract(format!("similarity vector has {} entries, table has {}", v.len(), table.len())));
    }
    let mut xi = vec![0.0; table.dim()];
    for (j, &w) in v.iter().enumerate() {
        for (x, g) in xi.iter_mut().zip(table.entry(j)) {
            *x += w * g;
        }
    }
    Ok(xi)
}

/// Fraction of representations whose most similar table entry is their own
/// class.
pub fn registration_accuracy(reps: &[(Vec<f64>, ClassId)], table: &GlobalRepresentationTable, emb: &Embeddings) -> Result<f64> {
    if reps.is_empty() {
        return Err(Error::Contract("registration accuracy of an empty list".into()));
    }
    let targets = reps
        .iter()
        .map(|(_, c)| table.index_of(c).ok_or_else(|| Error::Contract(format!("class `{c}` is not in the table"))))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<&[f64]> = reps.iter().map(|(v, _)| v.as_slice()).collect();
    let sims = similarity_batch(&Tensor::from_rows(&rows), table, emb)?;
    Ok(accuracy_of(&sims, &targets))
}

pub(crate) fn accuracy_of(sims: &[SimilarityVector], targets: &[usize]) -> f64 {
    let hits = sims.iter().zip(targets).filter(|(s, &t)| s.argmax() == t).count();
    hits as f64 / targets.len() as f64
}
