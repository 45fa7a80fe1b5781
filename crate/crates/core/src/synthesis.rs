//! Two-step sample synthesis for novel classes.
//!
//! Step 1 grows the `n_few` originals of a class to `k_t` variants with
//! image-level augmenters (and an optional feature-space jitter that is
//! resolved after extraction). Step 2 forms a random convex combination of a
//! random subset of features.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, LabeledSample};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Variants per novel class after step 1.
    pub k_t: usize,
    /// Applied in order to each new variant.
    pub augmenters: Vec<String>,
    /// Feature-jitter noise, in units of the per-dimension base-class feature
    /// std.
    pub jitter_std: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { k_t: 20, augmenters: vec!["random_crop".into(), "random_flip".into(), "feature_jitter".into()], jitter_std: 0.1 }
    }
}

impl SynthesisConfig {
    pub fn validate(&self, n_few: usize) -> Result<()> {
        if self.k_t == 0 {
            return Err(Error::Config("synthesis.k_t must be at least 1".into()));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::Config("synthesis.jitter_std must be a non-negative number".into()));
        }
        if n_few < self.k_t && self.augmenters.is_empty() {
            return Err(Error::Config(format!("synthesis.augmenters is empty but n_few = {n_few} < k_t = {}", self.k_t)));
        }
        self.build_augmenters().map(|_| ())
    }

    pub fn build_augmenters(&self) -> Result<Vec<Box<dyn Augmenter>>> {
        self.augmenters.iter().map(|n| builtin_augmenter(n, self.jitter_std)).collect()
    }
}

/// Pending feature-space noise for a variant, drawn once the feature is known.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureNoise {
    pub seed: u64,
    pub std: f64,
}

impl FeatureNoise {
    /// Adds `std * scale_i * z_i` to every dimension, with `z` drawn from the
    /// variant's own stream.
    pub fn apply(&self, feature: &mut [f64], scale: &[f64]) {
        let mut r = rng::stream(self.seed, "feature-jitter", 0);
        for (f, s) in feature.iter_mut().zip(scale) {
            let z: f64 = StandardNormal.sample(&mut r);
            *f += self.std * s * z;
        }
    }
}

/// One step-1 output.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub sample: LabeledSample,
    /// Index of the original it was derived from.
    pub source: usize,
    /// False for the untouched originals.
    pub augmented: bool,
    pub noise: Vec<FeatureNoise>,
}

impl AugmentedSample {
    pub fn original(sample: LabeledSample, source: usize) -> Self {
        Self { sample, source, augmented: false, noise: Vec::new() }
    }

    /// Applies any pending feature noise to an extracted feature.
    pub fn finish_feature(&self, feature: &mut [f64], scale: &[f64]) {
        for n in &self.noise {
            n.apply(feature, scale);
        }
    }
}

pub trait Augmenter: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, variant: &mut AugmentedSample, rng: &mut dyn RngCore);
}

/// Zero-filled translation by up to `max(1, side / 14)` pixels per axis
/// (2 for 28x28, 6 for 84x84).
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomCrop;

impl Augmenter for RandomCrop {
    fn name(&self) -> &str {
        "random_crop"
    }

    fn apply(&self, v: &mut AugmentedSample, rng: &mut dyn RngCore) {
        let shape = v.sample.image.shape();
        if shape.height == 1 && shape.width == 1 {
            return;
        }
        let py = (shape.height / 14).max(1) as i64;
        let px = (shape.width / 14).max(1) as i64;
        let dy = rng.random_range(-py..=py);
        let dx = rng.random_range(-px..=px);
        v.sample.image = Arc::new(v.sample.image.shift(dy as isize, dx as isize));
    }
}

/// Horizontal mirror with probability one half.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomFlip;

impl Augmenter for RandomFlip {
    fn name(&self) -> &str {
        "random_flip"
    }

    fn apply(&self, v: &mut AugmentedSample, rng: &mut dyn RngCore) {
        if rng.random_bool(0.5) {
            v.sample.image = Arc::new(v.sample.image.flip_horizontal());
        }
    }
}

/// Gaussian noise in feature space; scaled per dimension by the base-class
/// feature std at extraction time.
#[derive(Clone, Copy, Debug)]
pub struct FeatureJitter {
    pub std: f64,
}

impl Augmenter for FeatureJitter {
    fn name(&self) -> &str {
        "feature_jitter"
    }

    fn apply(&self, v: &mut AugmentedSample, rng: &mut dyn RngCore) {
        v.noise.push(FeatureNoise { seed: rng.next_u64(), std: self.std });
    }
}

pub fn builtin_augmenter(name: &str, jitter_std: f64) -> Result<Box<dyn Augmenter>> {
    match name {
        "random_crop" => Ok(Box::new(RandomCrop)),
        "random_flip" => Ok(Box::new(RandomFlip)),
        "feature_jitter" => Ok(Box::new(FeatureJitter { std: jitter_std })),
        other => Err(Error::Config(format!("unknown augmenter `{other}` (expected random_crop, random_flip or feature_jitter)"))),
    }
}

/// Grows one class's originals to exactly `k_t` items. The originals come
/// first, in order; every further item applies all `augmenters` in sequence
/// to a uniformly chosen original and gets the id `<original>~aug<k>`.
pub fn augment_step1(
    samples: &[LabeledSample],
    k_t: usize,
    augmenters: &[Box<dyn Augmenter>],
    rng: &mut dyn RngCore,
) -> Result<Vec<AugmentedSample>> {
    if samples.is_empty() {
        return Err(Error::Contract("augment_step1 needs at least one original".into()));
    }
    if samples.iter().any(|s| s.label != samples[0].label) {
        return Err(Error::Contract("augment_step1 originals must share a class".into()));
    }
    if k_t < samples.len() {
        return Err(Error::Contract(format!("k_t = {k_t} is smaller than the {} originals; originals are never discarded", samples.len())));
    }
    if k_t > samples.len() && augmenters.is_empty() {
        return Err(Error::Contract("no augmenter enabled but more variants were requested".into()));
    }
    let mut out: Vec<AugmentedSample> = samples.iter().enumerate().map(|(i, s)| AugmentedSample::original(s.clone(), i)).collect();
    for k in samples.len()..k_t {
        let src = rng.random_range(0..samples.len());
        let mut v = AugmentedSample::original(samples[src].clone(), src);
        v.sample.sample_id = format!("{}~aug{k}", samples[src].sample_id);
        v.augmented = true;
        for a in augmenters {
            a.apply(&mut v, rng);
        }
        out.push(v);
    }
    Ok(out)
}

/// Pads a class to `k_t` items by cycling through the originals without any
/// transformation; used by variants that disable step 1.
pub fn duplicate_to(samples: &[LabeledSample], k_t: usize) -> Result<Vec<AugmentedSample>> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot pad an empty class".into()));
    }
    Ok((0..k_t.max(samples.len()))
        .map(|k| {
            let src = k % samples.len();
            let mut v = AugmentedSample::original(samples[src].clone(), src);
            if k >= samples.len() {
                v.sample.sample_id = format!("{}#dup{k}", samples[src].sample_id);
            }
            v
        })
        .collect())
}

/// A random convex combination over a pool of `k_t` features.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexDraw {
    pub k_t: usize,
    pub k_r: usize,
    /// Nonnegative, summing to one.
    pub weights: Vec<f64>,
    /// Distinct indices into the pool.
    pub selected_indices: Vec<usize>,
}

impl ConvexDraw {
    /// Builds a draw from raw (unnormalized) weights.
    pub fn from_raw(k_t: usize, selected_indices: Vec<usize>, raw: &[f64]) -> Result<Self> {
        if selected_indices.is_empty() || selected_indices.len() != raw.len() || selected_indices.len() > k_t {
            return Err(Error::Contract("convex draw needs 1..=k_t indices with one weight each".into()));
        }
        let mut seen = vec![false; k_t];
        for &i in &selected_indices {
            if i >= k_t || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("convex draw index {i} is out of range or repeated")));
            }
        }
        if raw.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Contract("convex draw weights must be finite and nonnegative".into()));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::Contract("convex draw weights sum to zero".into()));
        }
        Ok(Self { k_t, k_r: selected_indices.len(), weights: raw.iter().map(|w| w / total).collect(), selected_indices })
    }

    /// Dense weight vector over the whole pool.
    pub fn dense(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.k_t];
        for (&i, &v) in self.selected_indices.iter().zip(&self.weights) {
            w[i] = v;
        }
        w
    }
}

/// `k_r = ceil(U(0, k_t])`, `k_r` indices without replacement and raw
/// weights from `U(0, 1]`, normalized.
pub fn draw_convex(k_t: usize, rng: &mut dyn RngCore) -> ConvexDraw {
    assert!(k_t >= 1, "draw_convex needs k_t >= 1");
    let u = 1.0 - rng.random::<f64>();
    let k_r = ((u * k_t as f64).ceil() as usize).clamp(1, k_t);
    let selected = rand::seq::index::sample(rng, k_t, k_r).into_vec();
    let raw: Vec<f64> = (0..k_r).map(|_| 1.0 - rng.random::<f64>()).collect();
    ConvexDraw::from_raw(k_t, selected, &raw).expect("valid by construction")
}

/// `sum_i weights_i * features[selected_i]`.
pub fn synthesize(features: &[Vec<f64>], draw: &ConvexDraw) -> Result<Vec<f64>> {
    if features.len() != draw.k_t {
        return Err(Error::Contract(format!("draw is over {} features but {} were given", draw.k_t, features.len())));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Contract("synthesize features differ in dimension".into()));
    }
    let mut out = vec![0.0; d];
    for (&i, &w) in draw.selected_indices.iter().zip(&draw.weights) {
        for (o, x) in out.iter_mut().zip(&features[i]) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Replaces an image; convenience for custom augmenters.
pub fn replace_image(v: &mut AugmentedSample, image: Image) {
    v.sample.image = Arc::new(image);
}
