//! The feature extractor `F` and its supervised pretraining on base classes.
//!
//! Three families share one interface:
//! * `conv4`: four blocks of 3x3 same-padding convolution, batch norm, ReLU
//!   and 2x2 floor max-pooling (28x28 -> 64 dims, 84x84 -> 1600 dims with 64
//!   filters);
//! * `mlp`: two fully-connected layers with a ReLU in between, output width
//!   equal to the input width (synthetic profile);
//! * `identity`: returns the input vector, used by hand-checkable fixtures.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, BnMode, Tape, Var};
use crate::data::{DatasetSplit, Image, ImageShape, Partition, Profile};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optim::Sgd;
use crate::params::{he_normal, Bound, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Momentum of running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ExtractorKind {
    Identity,
    Mlp { hidden: usize },
    Conv4 { filters: usize },
}

impl ExtractorKind {
    /// The full-size default for a profile.
    pub fn default_for(profile: Profile) -> Self {
        match profile {
            Profile::Omniglot | Profile::MiniImageNet => ExtractorKind::Conv4 { filters: 64 },
            Profile::Synthetic { dim } => ExtractorKind::Mlp { hidden: dim },
        }
    }
}

/// Batch statistics gathered during a train-mode forward pass, keyed by the
/// batch-norm layer prefix.
pub type StatsSink = Vec<(String, BatchStats)>;

/// Folds observed batch statistics into the running averages held in
/// `buffers` (`<layer>.running_mean` / `<layer>.running_var`).
pub fn apply_running_stats(buffers: &mut ParamStore, sink: &StatsSink) {
    for (layer, stats) in sink {
        for (suffix, observed) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let t = buffers.get_mut(&format!("{layer}.{suffix}")).unwrap_or_else(|| panic!("no running statistics for `{layer}`"));
            for (r, o) in t.data_mut().iter_mut().zip(observed) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
            }
        }
    }
}

pub(crate) fn init_bn(params: &mut ParamStore, buffers: &mut ParamStore, prefix: &str, c: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::full([c], 1.0));
    params.insert(format!("{prefix}.beta"), Tensor::zeros([c]));
    buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros([c]));
    buffers.insert(format!("{prefix}.running_var"), Tensor::full([c], 1.0));
}

/// Batch norm layer `prefix` in the given mode; train-mode statistics go to
/// `sink`.
pub(crate) fn bn_layer(
    tape: &mut Tape,
    x: Var,
    bound: &Bound,
    buffers: &ParamStore,
    prefix: &str,
    mode: Mode,
    sink: &mut StatsSink,
) -> Var {
    let gamma = bound.var(&format!("{prefix}.gamma"));
    let beta = bound.var(&format!("{prefix}.beta"));
    match mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm(x, gamma, beta, BnMode::Train);
            sink.push((prefix.to_string(), stats.expect("train mode yields stats")));
            y
        }
        Mode::Eval => {
            let mean = buffers.expect(&format!("{prefix}.running_mean")).data();
            let var = buffers.expect(&format!("{prefix}.running_var")).data();
            tape.batch_norm(x, gamma, beta, BnMode::Eval { mean, var }).0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub kind: ExtractorKind,
    pub input: ImageShape,
    /// Trainable weights, all named `extractor.*`.
    pub params: ParamStore,
    /// Running batch-norm statistics and per-channel input normalization
    /// (`extractor.input.mean` / `extractor.input.std`).
    pub buffers: ParamStore,
}

impl Extractor {
    pub fn new(kind: ExtractorKind, input: ImageShape, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        buffers.insert("extractor.input.mean", Tensor::zeros([input.channels]));
        buffers.insert("extractor.input.std", Tensor::full([input.channels], 1.0));
        match kind {
            ExtractorKind::Identity => {}
            ExtractorKind::Mlp { hidden } => {
                if input.height != 1 || input.width != 1 {
                    return Err(Error::Config("the mlp extractor needs vector (d x 1 x 1) inputs".into()));
                }
                let d = input.channels;
                params.insert("extractor.fc1.weight", he_normal([d, hidden], d, rng));
                params.insert("extractor.fc1.bias", Tensor::zeros([hidden]));
                params.insert("extractor.fc2.weight", he_normal([hidden, d], hidden, rng));
                params.insert("extractor.fc2.bias", Tensor::zeros([d]));
            }
            ExtractorKind::Conv4 { filters } => {
                let mut cin = input.channels;
                for b in 0..4 {
                    params.insert(format!("extractor.conv{b}.weight"), he_normal([filters, cin, 3, 3], cin * 9, rng));
                    params.insert(format!("extractor.conv{b}.bias"), Tensor::zeros([filters]));
                    init_bn(&mut params, &mut buffers, &format!("extractor.bn{b}"), filters);
                    cin = filters;
                }
                if conv4_spatial(input.height) == 0 || conv4_spatial(input.width) == 0 {
                    return Err(Error::Config(format!("input {}x{} is too small for four 2x2 pools", input.height, input.width)));
                }
            }
        }
        Ok(Self { kind, input, params, buffers })
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            ExtractorKind::Identity | ExtractorKind::Mlp { .. } => self.input.numel(),
            ExtractorKind::Conv4 { filters } => filters * conv4_spatial(self.input.height) * conv4_spatial(self.input.width),
        }
    }

    /// Stacks images into a normalized `[b, c, h, w]` input tensor.
    pub fn input_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Contract("cannot extract features of an empty batch".into()));
        }
        let s = self.input;
        let mean = self.buffers.expect("extractor.input.mean").data();
        let std = self.buffers.expect("extractor.input.std").data();
        let hw = s.height * s.width;
        let mut data = Vec::with_capacity(images.len() * s.numel());
        for img in images {
            if img.shape() != s {
                return Err(Error::Contract(format!("image shape {:?} does not match extractor input {:?}", img.shape(), s)));
            }
            for (i, &v) in img.data().iter().enumerate() {
                let c = i / hw;
                data.push((v as f64 - mean[c]) / std[c]);
            }
        }
        Ok(Tensor::new([images.len(), s.channels, s.height, s.width], data))
    }

    /// Forward pass on the tape; returns `[b, output_dim]` features.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode, sink: &mut StatsSink) -> Var {
        let b = tape.value(x).shape()[0];
        match self.kind {
            ExtractorKind::Identity => tape.reshape(x, [b, self.input.numel()]),
            ExtractorKind::Mlp { .. } => {
                let x = tape.reshape(x, [b, self.input.numel()]);
                let h = tape.linear(x, bound.var("extractor.fc1.weight"), bound.var("extractor.fc1.bias"));
                let h = tape.relu(h);
                tape.linear(h, bound.var("extractor.fc2.weight"), bound.var("extractor.fc2.bias"))
            }
            ExtractorKind::Conv4 { .. } => {
                let mut h = x;
                for blk in 0..4 {
                    h = tape.conv3x3(h, bound.var(&format!("extractor.conv{blk}.weight")), bound.var(&format!("extractor.conv{blk}.bias")));
                    h = bn_layer(tape, h, bound, &self.buffers, &format!("extractor.bn{blk}"), mode, sink);
                    h = tape.relu(h);
                    h = tape.max_pool2(h);
                }
                tape.reshape(h, [b, self.output_dim()])
            }
        }
    }

    /// Features of `images`, one row per image in input order. Eval mode is a
    /// pure function of the parameters and inputs; train mode normalizes with
    /// batch statistics but does not touch the running averages.
    pub fn extract(&self, images: &[&Image], mode: Mode, exec: Exec) -> Result<Tensor> {
        let x = self.input_tensor(images)?;
        let mut tape = Tape::new(exec);
        let bound = self.params.bind(&mut tape, |_| false);
        let xv = tape.constant(x);
        let mut sink = StatsSink::new();
        let f = self.forward(&mut tape, &bound, xv, mode, &mut sink);
        Ok(tape.value(f).clone())
    }

    /// Eval-mode extraction in fixed-size chunks, for datasets too large for
    /// one batch.
    pub fn extract_all(&self, images: &[&Image], exec: Exec) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let d = self.output_dim();
        let mut out = Vec::with_capacity(images.len() * d);
        for chunk in images.chunks(CHUNK) {
            out.extend_from_slice(self.extract(chunk, Mode::Eval, exec)?.data());
        }
        Ok(Tensor::new([images.len(), d], out))
    }

    /// Sets the per-channel input normalization from a set of images.
    pub fn fit_input_normalization(&mut self, images: &[&Image]) {
        let c = self.input.channels;
        let hw = self.input.height * self.input.width;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0.0;
        for img in images {
            for (i, &v) in img.data().iter().enumerate() {
                sum[i / hw] += v as f64;
                sq[i / hw] += (v as f64) * (v as f64);
            }
            n += hw as f64;
        }
        if n == 0.0 {
            return;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        self.buffers.insert("extractor.input.mean", Tensor::new([c], mean));
        self.buffers.insert("extractor.input.std", Tensor::new([c], std));
    }
}

fn conv4_spatial(mut s: usize) -> usize {
    for _ in 0..4 {
        s /= 2;
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 64, lr: 0.05, momentum: 0.9, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean per-sample cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Supervised softmax classification over the base classes of `split`
/// with a temporary linear head, which is discarded afterwards. Input
/// normalization is fitted on the base-class training images first.
pub fn pretrain_base_classifier(
    extractor: &mut Extractor,
    split: &DatasetSplit,
    cfg: &PretrainConfig,
    exec: Exec,
) -> Result<PretrainReport> {
    let base = split.classes_in(Partition::Base);
    if base.is_empty() {
        return Err(Error::Config("pretraining needs at least one base class".into()));
    }
    if cfg.epochs == 0 {
        return Ok(PretrainReport { epoch_loss: Vec::new() });
    }
    let head_index: Vec<Option<usize>> = {
        let mut m = vec![None; split.num_classes()];
        for (k, &c) in base.iter().enumerate() {
            m[c] = Some(k);
        }
        m
    };
    let samples: Vec<(usize, usize)> = split.train.iter().enumerate().filter_map(|(i, s)| head_index[s.label].map(|k| (i, k))).collect();
    let images: Vec<&Image> = samples.iter().map(|&(i, _)| split.train[i].image.as_ref()).collect();
    extractor.fit_input_normalization(&images);

    let d = extractor.output_dim();
    let mut init_rng = rng::stream(cfg.seed, "pretrain-head", 0);
    let mut head = ParamStore::new();
    head.insert("head.weight", crate::params::gaussian([d, base.len()], (1.0 / d as f64).sqrt(), &mut init_rng));
    head.insert("head.bias", Tensor::zeros([base.len()]));

    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "pretrain-order", epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(bs) {
            let imgs: Vec<&Image> = batch.iter().map(|&j| images[j]).collect();
            let targets: Vec<usize> = batch.iter().map(|&j| samples[j].1).collect();
            let x = extractor.input_tensor(&imgs)?;

            let mut tape = Tape::new(exec);
            let eb = extractor.params.bind(&mut tape, |_| true);
            let hb = head.bind(&mut tape, |_| true);
            let xv = tape.constant(x);
            let mut sink = StatsSink::new();
            let f = extractor.forward(&mut tape, &eb, xv, Mode::Train, &mut sink);
            let logits = tape.linear(f, hb.var("head.weight"), hb.var("head.bias"));
            let loss = tape.cross_entropy(logits, &targets);
            let mean_loss = tape.scale(loss, 1.0 / batch.len() as f64);
            let value = tape.value(mean_loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { episode: epoch as u64, classes: Vec::new(), seed: cfg.seed });
            }
            total += tape.value(loss).item();
            let mut grads = tape.backward(mean_loss);
            opt.step(&mut extractor.params, &eb, &mut grads);
            opt.step(&mut head, &hb, &mut grads);
            apply_running_stats(&mut extractor.buffers, &sink);
        }
        epoch_loss.push(total / samples.len() as f64);
    }
    Ok(PretrainReport { epoch_loss })
}
