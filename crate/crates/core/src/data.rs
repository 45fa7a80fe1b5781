//! Datasets, base/novel splits and the synthetic Gaussian benchmark.
//!
//! Images are stored channel-major (`[channels, height, width]`, `f32` in
//! `[0, 1]`). The synthetic profile stores each vector as a `d x 1 x 1` image
//! so downstream code never special-cases it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::store::ArrayFile;
use crate::tensor::Tensor;

/// Name of the split manifest expected at the dataset root.
pub const MANIFEST: &str = "split.txt";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub String);

impl ClassId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Base,
    Novel,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Base => "base",
            Partition::Novel => "novel",
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Partition::Base),
            "novel" => Ok(Partition::Novel),
            other => Err(Error::Config(format!("unknown partition `{other}` (expected base|novel)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub partition: Partition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Input profile of a dataset; fixes image shape and extractor family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Profile {
    /// 28x28 grayscale characters.
    Omniglot,
    /// 84x84 RGB.
    MiniImageNet,
    /// `dim`-dimensional vectors.
    Synthetic { dim: usize },
}

impl Profile {
    pub fn image_shape(&self) -> ImageShape {
        match *self {
            Profile::Omniglot => ImageShape { channels: 1, height: 28, width: 28 },
            Profile::MiniImageNet => ImageShape { channels: 3, height: 84, width: 84 },
            Profile::Synthetic { dim } => ImageShape { channels: dim, height: 1, width: 1 },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Profile::Omniglot => "omniglot",
            Profile::MiniImageNet => "miniimagenet",
            Profile::Synthetic { .. } => "synthetic",
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    data: Vec<f32>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f32>) -> Self {
        assert_eq!(shape.numel(), data.len(), "image data does not match shape");
        Self { shape, data }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        let shape = ImageShape { channels: v.len(), height: 1, width: 1 };
        Self::new(shape, v.iter().map(|&x| x as f32).collect())
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Rotates every channel 90 degrees clockwise.
    pub fn rot90(&self) -> Image {
        let ImageShape { channels, height, width } = self.shape;
        let mut out = vec![0.0; self.data.len()];
        // out is width x height; out[i][j] = in[h - 1 - j][i]
        for c in 0..channels {
            let src = &self.data[c * height * width..][..height * width];
            let dst = &mut out[c * height * width..][..height * width];
            for i in 0..width {
                for j in 0..height {
                    dst[i * height + j] = src[(height - 1 - j) * width + i];
                }
            }
        }
        Image::new(ImageShape { channels, height: width, width: height }, out)
    }

    /// Mirror along the vertical axis.
    pub fn flip_horizontal(&self) -> Image {
        let ImageShape { height, width, .. } = self.shape;
        let mut out = self.data.clone();
        for row in out.chunks_mut(width) {
            row.reverse();
        }
        debug_assert_eq!(out.len() % (height * width), 0);
        Image::new(self.shape, out)
    }

    /// Translates the content by `(dy, dx)` pixels, filling with zeros; the
    /// pad-then-crop formulation of random cropping at fixed output size.
    pub fn shift(&self, dy: isize, dx: isize) -> Image {
        let ImageShape { channels, height, width } = self.shape;
        let mut out = vec![0.0; self.data.len()];
        for c in 0..channels {
            for y in 0..height as isize {
                let sy = y - dy;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for x in 0..width as isize {
                    let sx = x - dx;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    out[(c * height + y as usize) * width + x as usize] = self.data[(c * height + sy as usize) * width + sx as usize];
                }
            }
        }
        Image::new(self.shape, out)
    }
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{}x{})", self.shape.channels, self.shape.height, self.shape.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub sample_id: String,
    /// Index into the owning dataset's class list.
    pub label: usize,
    pub image: Arc<Image>,
}

/// Ground truth kept for synthetic datasets so accuracies can be compared
/// against the Bayes-optimal classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    /// One true mean per class, in class order.
    pub means: Vec<Vec<f64>>,
}

impl SyntheticTruth {
    /// Index (into `candidates`) of the candidate class whose true mean is
    /// nearest to `x`. With equal priors and a shared isotropic covariance
    /// this is the Bayes decision.
    pub fn nearest(&self, x: &[f64], candidates: &[usize]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, &c) in candidates.iter().enumerate() {
            let d: f64 = self.means[c].iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Bayes accuracy over `samples` when choosing among `candidates`.
    pub fn accuracy(&self, samples: &[&LabeledSample], candidates: &[usize]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let correct = samples.iter().filter(|s| candidates[self.nearest(&s.image.to_f64(), candidates)] == s.label).count();
        correct as f64 / samples.len() as f64
    }
}

/// A train/test split over a fixed class list.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub profile: Profile,
    pub classes: Vec<ClassInfo>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    /// Labeled training samples per novel class.
    pub n_few: usize,
    pub truth: Option<SyntheticTruth>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, id: &ClassId) -> Option<usize> {
        self.classes.iter().position(|c| &c.id == id)
    }

    pub fn classes_in(&self, partition: Partition) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| self.classes[i].partition == partition).collect()
    }

    pub fn train_by_class(&self) -> Vec<Vec<usize>> {
        group(&self.train, self.classes.len())
    }

    pub fn test_by_class(&self) -> Vec<Vec<usize>> {
        group(&self.test, self.classes.len())
    }

    /// Checks the split invariants: unique class ids, labels in range, image
    /// shapes matching the profile, disjoint train/test ids and exactly
    /// `n_few` training samples per novel class.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for c in &self.classes {
            if !ids.insert(&c.id) {
                return Err(Error::Integrity(format!("duplicate class id `{}`", c.id)));
            }
        }
        let shape = self.profile.image_shape();
        let mut seen = HashSet::new();
        for s in self.train.iter().chain(&self.test) {
            if s.label >= self.classes.len() {
                return Err(Error::Integrity(format!("sample `{}` has out-of-range label", s.sample_id)));
            }
            if s.image.shape() != shape {
                return Err(Error::Integrity(format!(
                    "sample `{}` has shape {:?}, profile expects {:?}",
                    s.sample_id,
                    s.image.shape(),
                    shape
                )));
            }
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::Integrity(format!("sample id `{}` appears twice", s.sample_id)));
            }
        }
        for (c, idx) in self.train_by_class().iter().enumerate() {
            if self.classes[c].partition == Partition::Novel && idx.len() != self.n_few {
                return Err(Error::Integrity(format!(
                    "novel class `{}` has {} training samples, expected n_few = {}",
                    self.classes[c].id,
                    idx.len(),
                    self.n_few
                )));
            }
        }
        Ok(())
    }

    /// Restricts the split to `keep` (indices into `classes`), relabeling in
    /// the given order.
    pub fn subset(&self, keep: &[usize]) -> DatasetSplit {
        let remap: HashMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let pick =
            |v: &[LabeledSample]| v.iter().filter_map(|s| remap.get(&s.label).map(|&l| LabeledSample { label: l, ..s.clone() })).collect();
        DatasetSplit {
            profile: self.profile,
            classes: keep.iter().map(|&i| self.classes[i].clone()).collect(),
            train: pick(&self.train),
            test: pick(&self.test),
            n_few: self.n_few,
            truth: self.truth.as_ref().map(|t| SyntheticTruth { means: keep.iter().map(|&i| t.means[i].clone()).collect() }),
        }
    }

    /// Union of two splits with disjoint class sets (`other`'s classes are
    /// appended after `self`'s).
    pub fn merge(&self, other: &DatasetSplit) -> Result<DatasetSplit> {
        if self.profile != other.profile {
            return Err(Error::Contract("cannot merge splits of different profiles".into()));
        }
        for c in &other.classes {
            if self.class_index(&c.id).is_some() {
                return Err(Error::Contract(format!("class id `{}` already exists", c.id)));
            }
        }
        let offset = self.classes.len();
        let shifted = |v: &[LabeledSample]| -> Vec<LabeledSample> {
            v.iter().map(|s| LabeledSample { label: s.label + offset, ..s.clone() }).collect()
        };
        let mut merged = self.clone();
        merged.classes.extend(other.classes.iter().cloned());
        merged.train.extend(shifted(&other.train));
        merged.test.extend(shifted(&other.test));
        merged.truth = match (&self.truth, &other.truth) {
            (Some(a), Some(b)) => Some(SyntheticTruth { means: a.means.iter().chain(&b.means).cloned().collect() }),
            _ => None,
        };
        Ok(merged)
    }

    /// Writes a synthetic split as one array container (`train.x`, `train.y`,
    /// `test.x`, `test.y`, `means`) plus a JSON sidecar with class metadata.
    pub fn save_synthetic(&self, path: &Path) -> Result<()> {
        let Profile::Synthetic { dim } = self.profile else {
            return Err(Error::Contract("only synthetic splits can be exported".into()));
        };
        let mut f = ArrayFile::new();
        for (name, samples) in [("train", &self.train), ("test", &self.test)] {
            let x: Vec<f64> = samples.iter().flat_map(|s| s.image.to_f64()).collect();
            f.insert(format!("{name}.x"), Tensor::new([samples.len(), dim], x));
            f.insert(format!("{name}.y"), Tensor::new([samples.len()], samples.iter().map(|s| s.label as f64).collect()));
        }
        if let Some(t) = &self.truth {
            f.insert("means", Tensor::from_rows(&t.means));
        }
        f.meta("profile", "synthetic");
        f.meta("n_few", self.n_few);
        f.save(path)?;
        let sidecar = SyntheticSidecar {
            dim,
            n_few: self.n_few,
            classes: self.classes.clone(),
            train_ids: self.train.iter().map(|s| s.sample_id.clone()).collect(),
            test_ids: self.test.iter().map(|s| s.sample_id.clone()).collect(),
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        let side = sidecar_path(path);
        std::fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    pub fn load_synthetic(path: &Path) -> Result<DatasetSplit> {
        let f = ArrayFile::load(path)?;
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: SyntheticSidecar =
            serde_json::from_str(&text).map_err(|e| Error::Ingestion { path: side.clone(), reason: e.to_string() })?;
        let read = |name: &str, ids: &[String]| -> Result<Vec<LabeledSample>> {
            let x = f.tensor(path, &format!("{name}.x"))?;
            let y = f.tensor(path, &format!("{name}.y"))?;
            if x.rows() != ids.len() || y.len() != ids.len() {
                return Err(Error::Integrity(format!("`{name}` arrays disagree with the sidecar")));
            }
            Ok(ids
                .iter()
                .enumerate()
                .map(|(i, id)| LabeledSample {
                    sample_id: id.clone(),
                    label: y.data()[i] as usize,
                    image: Arc::new(Image::from_vector(x.row(i))),
                })
                .collect())
        };
        let split = DatasetSplit {
            profile: Profile::Synthetic { dim: meta.dim },
            train: read("train", &meta.train_ids)?,
            test: read("test", &meta.test_ids)?,
            classes: meta.classes,
            n_few: meta.n_few,
            truth: f.tensors.get("means").map(|m| SyntheticTruth { means: (0..m.rows()).map(|i| m.row(i).to_vec()).collect() }),
        };
        split.validate()?;
        Ok(split)
    }
}

#[derive(Serialize, Deserialize)]
struct SyntheticSidecar {
    dim: usize,
    n_few: usize,
    classes: Vec<ClassInfo>,
    train_ids: Vec<String>,
    test_ids: Vec<String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn group(samples: &[LabeledSample], n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n];
    for (i, s) in samples.iter().enumerate() {
        out[s.label].push(i);
    }
    out
}

/// Which benchmark split a class came from, as recorded in the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub class_name: String,
    pub partition: Partition,
    pub origin: Origin,
}

/// Parses `class_name<TAB>partition<TAB>train|test` lines. Blank lines and
/// lines starting with `#` are ignored; `val` is accepted as an origin for
/// validation classes.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, partition, origin] = fields[..] else {
            return Err(Error::Config(format!("manifest line {}: expected 3 tab-separated fields, got {}", lineno + 1, fields.len())));
        };
        let origin = match origin {
            "train" => Origin::Train,
            "val" => Origin::Val,
            "test" => Origin::Test,
            other => return Err(Error::Config(format!("manifest line {}: unknown split `{other}`", lineno + 1))),
        };
        if !seen.insert(name.to_string()) {
            return Err(Error::Config(format!("manifest line {}: class `{name}` listed twice", lineno + 1)));
        }
        out.push(ManifestEntry { class_name: name.to_string(), partition: partition.parse()?, origin });
    }
    Ok(out)
}

/// Every sample of every class, before any train/test allocation.
#[derive(Clone, Debug)]
pub struct ClassPool {
    pub profile: Profile,
    pub classes: Vec<ClassInfo>,
    pub samples: Vec<Vec<LabeledSample>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Keep classes whose manifest split is `val`.
    pub include_validation: bool,
    pub exec: Exec,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif"];

/// Reads `<root>/split.txt` and every listed `<root>/<class>/` directory.
///
/// Files are taken in lexicographic order and decoded in parallel. For the
/// omniglot profile each class is expanded into four classes, one per
/// 90-degree rotation, which share the original's partition.
pub fn load_class_pool(root: &Path, profile: Profile, opts: LoadOptions) -> Result<ClassPool> {
    if let Profile::Synthetic { .. } = profile {
        return Err(Error::Config("synthetic datasets are generated, not loaded from a directory".into()));
    }
    let manifest_path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let entries: Vec<ManifestEntry> =
        parse_manifest(&text)?.into_iter().filter(|e| opts.include_validation || e.origin != Origin::Val).collect();

    let mut files = Vec::new();
    for (ci, e) in entries.iter().enumerate() {
        let dir = root.join(&e.class_name);
        let listing = std::fs::read_dir(&dir)
            .map_err(|err| Error::Ingestion { path: dir.clone(), reason: format!("class directory unreadable: {err}") })?;
        let mut paths: Vec<PathBuf> = listing
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| p.extension().and_then(|x| x.to_str()).is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str())))
            .collect();
        paths.sort();
        files.extend(paths.into_iter().map(|p| (ci, p)));
    }

    let decoded = opts.exec.map(files.len(), |i| decode_image(&files[i].1, profile));
    let mut per_class: Vec<Vec<(String, Image)>> = vec![Vec::new(); entries.len()];
    for ((ci, path), img) in files.iter().zip(decoded) {
        let img = img?;
        let stem = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        per_class[*ci].push((format!("{}/{}", entries[*ci].class_name, stem), img));
    }

    let rotations = if profile == Profile::Omniglot { 4 } else { 1 };
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for (e, imgs) in entries.iter().zip(per_class) {
        let mut current: Vec<(String, Image)> = imgs;
        for r in 0..rotations {
            let suffix = if rotations > 1 { format!("@rot{}", r * 90) } else { String::new() };
            let label = classes.len();
            classes.push(ClassInfo { id: ClassId(format!("{}{}", e.class_name, suffix)), partition: e.partition });
            samples.push(
                current
                    .iter()
                    .map(|(id, img)| LabeledSample { sample_id: format!("{id}{suffix}"), label, image: Arc::new(img.clone()) })
                    .collect(),
            );
            if r + 1 < rotations {
                current = current.into_iter().map(|(id, img)| (id, img.rot90())).collect();
            }
        }
    }
    Ok(ClassPool { profile, classes, samples })
}

fn decode_image(path: &Path, profile: Profile) -> Result<Image> {
    use image::imageops::FilterType;
    let err = |reason: String| Error::Ingestion { path: path.to_path_buf(), reason };
    let img = image::open(path).map_err(|e| err(e.to_string()))?;
    let shape = profile.image_shape();
    let (w, h) = (shape.width as u32, shape.height as u32);
    let data = match shape.channels {
        1 => {
            let g = image::imageops::resize(&img.to_luma32f(), w, h, FilterType::Triangle);
            g.into_raw()
        }
        3 => {
            let rgb = image::imageops::resize(&img.to_rgb32f(), w, h, FilterType::Triangle);
            // interleaved HWC -> planar CHW
            let raw = rgb.into_raw();
            let hw = (w * h) as usize;
            let mut planar = vec![0.0f32; raw.len()];
            for (p, px) in raw.chunks(3).enumerate() {
                for c in 0..3 {
                    planar[c * hw + p] = px[c];
                }
            }
            planar
        }
        c => return Err(err(format!("unsupported channel count {c}"))),
    };
    Ok(Image::new(shape, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
}

impl ClassPool {
    /// Standard few-shot allocation: every base-class sample goes to train;
    /// each novel class contributes `n_few` randomly chosen shots to train
    /// and the rest to test.
    pub fn standard_split(&self, n_few: usize, seed: u64) -> Result<DatasetSplit> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (ci, class) in self.classes.iter().enumerate() {
            let samples = &self.samples[ci];
            match class.partition {
                Partition::Base => {
                    if samples.is_empty() {
                        return Err(Error::Integrity(format!("base class `{}` has no images", class.id)));
                    }
                    train.extend(samples.iter().cloned());
                }
                Partition::Novel => {
                    if samples.len() <= n_few {
                        return Err(Error::Integrity(format!(
                            "novel class `{}` has {} images; needs more than n_few = {n_few}",
                            class.id,
                            samples.len()
                        )));
                    }
                    let order = shuffled(samples.len(), seed, ci);
                    train.extend(order[..n_few].iter().map(|&i| samples[i].clone()));
                    test.extend(order[n_few..].iter().map(|&i| samples[i].clone()));
                }
            }
        }
        let split = DatasetSplit { profile: self.profile, classes: self.classes.clone(), train, test, n_few, truth: None };
        split.validate()?;
        Ok(split)
    }
}

fn shuffled(n: usize, seed: u64, class: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", class as u64));
    order
}

/// Loads a directory dataset and applies the standard few-shot allocation.
pub fn load_image_dataset(root: &Path, profile: Profile, n_few: usize, seed: u64, opts: LoadOptions) -> Result<DatasetSplit> {
    load_class_pool(root, profile, opts)?.standard_split(n_few, seed)
}

/// Generalized few-shot allocation: `per_base_train` samples per base class
/// and `n_few` per novel class for training; `per_class_test` further
/// samples of every class for testing.
pub fn make_generalized_split(
    pool: &ClassPool,
    n_few: usize,
    per_base_train: usize,
    per_class_test: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (ci, class) in pool.classes.iter().enumerate() {
        let samples = &pool.samples[ci];
        let n_train = match class.partition {
            Partition::Base => per_base_train,
            Partition::Novel => n_few,
        };
        if n_train + per_class_test > samples.len() {
            return Err(Error::Integrity(format!(
                "class `{}` has {} samples but {} train + {} test were requested",
                class.id,
                samples.len(),
                n_train,
                per_class_test
            )));
        }
        let order = shuffled(samples.len(), seed, ci);
        train.extend(order[..n_train].iter().map(|&i| samples[i].clone()));
        test.extend(order[n_train..n_train + per_class_test].iter().map(|&i| samples[i].clone()));
    }
    let split = DatasetSplit { profile: pool.profile, classes: pool.classes.clone(), train, test, n_few, truth: None };
    split.validate()?;
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_base: usize,
    pub n_novel: usize,
    pub dim: usize,
    pub samples_per_base: usize,
    pub n_few: usize,
    pub test_per_class: usize,
    pub class_separation: f64,
    pub seed: u64,
}

/// Isotropic unit-variance Gaussian classes whose means are drawn uniformly
/// from `[0, class_separation]^dim`. Base classes get `samples_per_base`
/// training samples, novel classes `n_few`; every class gets
/// `test_per_class` test samples.
pub fn make_synthetic_gaussian(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    let SyntheticSpec { n_base, n_novel, dim, samples_per_base, n_few, test_per_class, class_separation, seed } = *spec;
    if n_base + n_novel == 0 || dim == 0 || samples_per_base == 0 || n_few == 0 {
        return Err(Error::Config("synthetic dataset counts must be positive".into()));
    }
    if !(class_separation > 0.0 && class_separation.is_finite()) {
        return Err(Error::Config("class_separation must be a positive finite number".into()));
    }
    let mut classes = Vec::new();
    for i in 0..n_base {
        classes.push(ClassInfo { id: ClassId(format!("base_{i:03}")), partition: Partition::Base });
    }
    for i in 0..n_novel {
        classes.push(ClassInfo { id: ClassId(format!("novel_{i:03}")), partition: Partition::Novel });
    }
    let mut mean_rng = rng::stream(seed, "synthetic-means", 0);
    let means: Vec<Vec<f64>> =
        (0..classes.len()).map(|_| (0..dim).map(|_| mean_rng.random::<f64>() * class_separation).collect()).collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let mut r = rng::stream(seed, "synthetic-samples", ci as u64);
        let n_train = if class.partition == Partition::Base { samples_per_base } else { n_few };
        let mut draw = |k: usize| {
            let v: Vec<f64> = means[ci]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    m + z
                })
                .collect();
            LabeledSample { sample_id: format!("{}#{k}", class.id), label: ci, image: Arc::new(Image::from_vector(&v)) }
        };
        for k in 0..n_train {
            train.push(draw(k));
        }
        for k in 0..test_per_class {
            test.push(draw(n_train + k));
        }
    }
    let split = DatasetSplit { profile: Profile::Synthetic { dim }, classes, train, test, n_few, truth: Some(SyntheticTruth { means }) };
    split.validate()?;
    Ok(split)
}

/// Per-class counts of a sample list, keyed by class id.
pub fn count_by_class(split: &DatasetSplit, samples: &[LabeledSample]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(split.classes[s.label].id.0.clone()).or_insert(0) += 1;
    }
    m
}
