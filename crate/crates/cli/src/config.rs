//! Experiment configuration: one TOML file per run.
//!
//! Every optional key is filled in by [`ExperimentConfig::resolve`], and the
//! resolved copy is written next to the outputs, so the saved file alone
//! reproduces the run.

use std::path::{Path, PathBuf};

use gcr_core::data::Profile;
use gcr_core::error::{Error, Result};
use gcr_core::evaluation::{EpisodeClasses, GeneralizedMode, Selection, StandardEvalConfig};
use gcr_core::features::{ExtractorKind, PretrainConfig};
use gcr_core::optim::OptimizerConfig;
use gcr_core::registration::EmbeddingKind;
use gcr_core::synthesis::SynthesisConfig;
use gcr_core::trainer::{Ablation, TrainingConfig};
use serde::{Deserialize, Serialize};

/// Overrides `dataset.root` when set.
pub const ROOT_ENV: &str = "GCR_DATASET_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Data-parallel feature extraction and evaluation.
    #[serde(default = "yes")]
    pub parallel: bool,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extend: Option<ExtendSection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Omniglot,
    MiniImageNet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// All base samples train; novel classes keep `n_few` shots.
    #[default]
    Standard,
    /// Fixed train and test counts for every class.
    Generalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    /// Labeled shots per novel class.
    pub n_few: usize,
    #[serde(default)]
    pub setting: Setting,
    /// Directory holding `split.txt` and one folder per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub include_validation: bool,
    /// Generalized setting only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_base_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_test: Option<usize>,
    /// Keep only the first classes of each partition (counted before the
    /// omniglot rotations are expanded).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_base_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_novel_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_base: usize,
    pub n_novel: usize,
    pub dim: usize,
    pub samples_per_base: usize,
    pub test_per_class: usize,
    pub class_separation: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Defaults to the profile's extractor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<ExtractorKind>,
    #[serde(default)]
    pub embedding: EmbeddingKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self { epochs: d.epochs, batch_size: d.batch_size, lr: d.lr, momentum: d.momentum }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub n_train: usize,
    /// Defaults to `dataset.n_few`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_s: Option<usize>,
    pub n_q: usize,
    pub ablation: Ablation,
    pub total_episodes: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Standard evaluation every this many episodes; 0 disables it.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_checkpoint_every() -> u64 {
    1000
}

/// Unset keys take the library defaults; setting augmenters or jitter under
/// a variant without step 1 is rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmenters: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter_std: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneralizedChoice {
    /// Registration for variants with R, class means otherwise.
    #[default]
    Auto,
    Registration,
    ClassMeans,
}

impl GeneralizedChoice {
    pub fn mode_for(self, ablation: Ablation) -> GeneralizedMode {
        match self {
            GeneralizedChoice::Registration => GeneralizedMode::Registration,
            GeneralizedChoice::ClassMeans => GeneralizedMode::ClassMeans,
            GeneralizedChoice::Auto if ablation.r() => GeneralizedMode::Registration,
            GeneralizedChoice::Auto => GeneralizedMode::ClassMeans,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub standard: bool,
    pub n_test: usize,
    pub n_q_test: usize,
    pub episodes: usize,
    pub classes: EpisodeClasses,
    pub selection: Selection,
    pub test_synthesis: bool,
    /// Defaults to true for synthetic data and the generalized setting.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generalized: Option<bool>,
    pub generalized_mode: GeneralizedChoice,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = StandardEvalConfig::default();
        Self {
            standard: true,
            n_test: d.n_test,
            n_q_test: d.n_q_test,
            episodes: d.episodes,
            classes: d.classes,
            selection: d.selection,
            test_synthesis: false,
            generalized: None,
            generalized_mode: GeneralizedChoice::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<Ablation>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { variants: Ablation::ALL.to_vec() }
    }
}

/// New classes for `extend`: an image directory or freshly drawn synthetic
/// classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_classes: Option<usize>,
    #[serde(default = "default_extend_episodes")]
    pub episodes: u64,
    /// Optimizer for the new table rows; defaults to `training.optimizer`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
}

fn default_extend_episodes() -> u64 {
    1000
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Validates and fills every optional key. `root_override` replaces
    /// `dataset.root`; relative paths are taken against `base_dir`.
    pub fn resolve(mut self, root_override: Option<PathBuf>, base_dir: &Path) -> Result<Self> {
        let d = &mut self.dataset;
        if d.n_few == 0 {
            return Err(Error::Config("dataset.n_few must be at least 1".into()));
        }
        match d.source {
            Source::Synthetic => {
                let Some(s) = d.synthetic else {
                    return Err(Error::Config("dataset.source = \"synthetic\" needs a [dataset.synthetic] section".into()));
                };
                if d.root.is_some() || d.setting == Setting::Generalized {
                    return Err(Error::Config(
                        "synthetic data is generated with test samples for every class; remove dataset.root and dataset.setting".into(),
                    ));
                }
                if d.max_base_classes.is_some() || d.max_novel_classes.is_some() {
                    return Err(Error::Config("max_base_classes / max_novel_classes apply to image datasets only".into()));
                }
                if s.dim == 0 {
                    return Err(Error::Config("dataset.synthetic.dim must be positive".into()));
                }
            }
            Source::Omniglot | Source::MiniImageNet => {
                if d.synthetic.is_some() {
                    return Err(Error::Config("[dataset.synthetic] is only valid with source = \"synthetic\"".into()));
                }
                if let Some(r) = root_override {
                    d.root = Some(r);
                }
                let Some(root) = d.root.as_mut() else {
                    return Err(Error::Config(format!("dataset.root is required (or set {ROOT_ENV})")));
                };
                *root = absolute(base_dir, root);
                if !root.is_dir() {
                    return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
                }
                match d.setting {
                    Setting::Generalized if d.per_base_train.is_none() || d.per_class_test.is_none() => {
                        return Err(Error::Config(
                            "the generalized setting needs dataset.per_base_train and dataset.per_class_test".into(),
                        ));
                    }
                    Setting::Standard if d.per_base_train.is_some() || d.per_class_test.is_some() => {
                        return Err(Error::Config("per_base_train / per_class_test apply to the generalized setting only".into()));
                    }
                    _ => {}
                }
            }
        }
        let profile = self.profile();

        if self.model.extractor.is_none() {
            self.model.extractor = Some(ExtractorKind::default_for(profile));
        }
        let t = &mut self.training;
        t.n_s.get_or_insert(self.dataset.n_few);
        if t.checkpoint_every == 0 {
            return Err(Error::Config("training.checkpoint_every must be at least 1".into()));
        }

        let s1 = t.ablation.s1();
        let syn = &mut self.synthesis;
        if !s1 && (syn.augmenters.is_some() || syn.jitter_std.is_some()) {
            return Err(Error::Config(format!(
                "synthesis.augmenters / synthesis.jitter_std have no effect under ablation {}; remove them or pick a variant with S1",
                t.ablation
            )));
        }
        if self.eval.test_synthesis && !(s1 || t.ablation.s2()) {
            return Err(Error::Config(format!(
                "eval.test_synthesis needs a variant with synthesis, but training.ablation is {}",
                t.ablation
            )));
        }
        let dflt = SynthesisConfig::default();
        syn.k_t.get_or_insert(dflt.k_t);
        if s1 {
            syn.augmenters.get_or_insert(dflt.augmenters);
            syn.jitter_std.get_or_insert(dflt.jitter_std);
        }
        self.synthesis_config(Ablation::Full).validate(self.dataset.n_few)?;

        let generalized = self.dataset.source == Source::Synthetic || self.dataset.setting == Setting::Generalized;
        self.eval.generalized.get_or_insert(generalized);
        if self.ablate.variants.is_empty() {
            return Err(Error::Config("ablate.variants must list at least one variant".into()));
        }
        if let Some(x) = self.extend.as_mut() {
            x.optimizer.get_or_insert(self.training.optimizer);
            match (&mut x.root, x.synthetic_classes) {
                (Some(root), None) => {
                    *root = absolute(base_dir, root);
                    if !root.is_dir() {
                        return Err(Error::Config(format!("extend.root {} does not exist", root.display())));
                    }
                }
                (None, Some(n)) if n > 0 => {
                    if self.dataset.source != Source::Synthetic {
                        return Err(Error::Config("extend.synthetic_classes needs a synthetic dataset".into()));
                    }
                }
                _ => {
                    return Err(Error::Config("[extend] needs exactly one of root or synthetic_classes (> 0)".into()));
                }
            }
        }
        Ok(self)
    }

    pub fn profile(&self) -> Profile {
        match self.dataset.source {
            Source::Omniglot => Profile::Omniglot,
            Source::MiniImageNet => Profile::MiniImageNet,
            Source::Synthetic => Profile::Synthetic { dim: self.dataset.synthetic.map_or(0, |s| s.dim) },
        }
    }

    pub fn extractor(&self) -> ExtractorKind {
        self.model.extractor.unwrap_or_else(|| ExtractorKind::default_for(self.profile()))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = self.pretrain;
        PretrainConfig { epochs: p.epochs, batch_size: p.batch_size, lr: p.lr, momentum: p.momentum, seed: self.seed }
    }

    /// Synthesis settings as seen by `ablation`.
    pub fn synthesis_config(&self, ablation: Ablation) -> SynthesisConfig {
        let d = SynthesisConfig::default();
        let s = &self.synthesis;
        let augmenters = if ablation.s1() { s.augmenters.clone().unwrap_or(d.augmenters) } else { Vec::new() };
        SynthesisConfig { k_t: s.k_t.unwrap_or(d.k_t), augmenters, jitter_std: s.jitter_std.unwrap_or(d.jitter_std) }
    }

    pub fn training_config(&self, ablation: Ablation) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            n_train: t.n_train,
            n_s: t.n_s.unwrap_or(self.dataset.n_few),
            n_q: t.n_q,
            synthesis: self.synthesis_config(ablation),
            ablation,
            optimizer: t.optimizer,
            total_episodes: t.total_episodes,
            checkpoint_every: t.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn standard_eval(&self) -> StandardEvalConfig {
        let e = &self.eval;
        StandardEvalConfig {
            n_test: e.n_test,
            n_few: self.dataset.n_few,
            n_q_test: e.n_q_test,
            episodes: e.episodes,
            seed: self.seed,
            classes: e.classes,
            selection: e.selection,
        }
    }

    pub fn generalized_enabled(&self) -> bool {
        self.eval.generalized.unwrap_or(false)
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}
