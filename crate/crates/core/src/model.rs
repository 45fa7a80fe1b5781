//! The trainable model: extractor, registration embeddings and the global
//! representation table.

use rand::Rng;

use crate::data::{DatasetSplit, Image, Partition};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::Extractor;
use crate::params::ParamStore;
use crate::registration::{EmbeddingKind, Embeddings, GlobalRepresentationTable};
use crate::synthesis::AugmentedSample;
use crate::tensor::Tensor;

/// Name of the table tensor in checkpoints and gradient maps.
pub const TABLE: &str = "table";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub extractor: Extractor,
    pub embeddings: Embeddings,
    pub table: GlobalRepresentationTable,
    /// Per-dimension std of base-class features; the unit of feature jitter.
    pub feature_scale: Vec<f64>,
}

impl Model {
    /// Table from class feature means, fresh embeddings and the jitter scale
    /// measured on the (pretrained) extractor.
    pub fn initialize(
        extractor: Extractor,
        embedding: EmbeddingKind,
        split: &DatasetSplit,
        rng: &mut impl Rng,
        exec: Exec,
    ) -> Result<Self> {
        let features = train_features(&extractor, split, exec)?;
        let table = table_from_features(split, &features)?;
        let feature_scale = base_feature_std(split, &features);
        let embeddings = Embeddings::new(embedding, extractor.output_dim(), rng);
        Ok(Self { extractor, embeddings, table, feature_scale })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    /// Names of every trainable tensor.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.extractor.params.names().map(str::to_owned).collect();
        names.extend(self.embeddings.params.names().map(str::to_owned));
        names.push(TABLE.to_owned());
        names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        if name == TABLE {
            return Some(&self.table.vectors);
        }
        self.extractor.params.get(name).or_else(|| self.embeddings.params.get(name))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name == TABLE {
            return Some(&mut self.table.vectors);
        }
        if self.extractor.params.contains(name) {
            return self.extractor.params.get_mut(name);
        }
        self.embeddings.params.get_mut(name)
    }

    pub fn all_finite(&self) -> bool {
        self.extractor.params.all_finite() && self.embeddings.params.all_finite() && self.table.vectors.is_finite()
    }

    /// Eval-mode features of augmented items, with pending jitter applied.
    pub fn features_of(&self, items: &[&AugmentedSample], exec: Exec) -> Result<Tensor> {
        let images: Vec<&Image> = items.iter().map(|a| a.sample.image.as_ref()).collect();
        let mut f = self.extractor.extract_all(&images, exec)?;
        for (i, a) in items.iter().enumerate() {
            a.finish_feature(f.row_mut(i), &self.feature_scale);
        }
        Ok(f)
    }

    /// Checks that the table rows line up with the split's classes.
    pub fn check_split(&self, split: &DatasetSplit) -> Result<()> {
        let same =
            self.table.classes.len() == split.classes.len() && self.table.classes.iter().zip(&split.classes).all(|(a, b)| a.id == b.id);
        if same {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "model table has {} classes that do not match the {} classes of the dataset",
                self.table.len(),
                split.num_classes()
            )))
        }
    }

    /// All running statistics (extractor and embeddings).
    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.extractor.buffers.iter().chain(self.embeddings.buffers.iter())
    }

    pub fn buffer_store_mut(&mut self, name: &str) -> Option<&mut ParamStore> {
        if self.extractor.buffers.contains(name) {
            Some(&mut self.extractor.buffers)
        } else if self.embeddings.buffers.contains(name) {
            Some(&mut self.embeddings.buffers)
        } else {
            None
        }
    }
}

/// Eval-mode features of every training sample, in `split.train` order.
pub fn train_features(extractor: &Extractor, split: &DatasetSplit, exec: Exec) -> Result<Tensor> {
    let images: Vec<&Image> = split.train.iter().map(|s| s.image.as_ref()).collect();
    if images.is_empty() {
        return Err(Error::Integrity("the training split is empty".into()));
    }
    extractor.extract_all(&images, exec)
}

/// `g_c` = mean eval-mode feature of the training samples of class `c`.
pub fn init_global_representations(extractor: &Extractor, split: &DatasetSplit, exec: Exec) -> Result<GlobalRepresentationTable> {
    table_from_features(split, &train_features(extractor, split, exec)?)
}

/// Per-class means of precomputed training features.
pub fn table_from_features(split: &DatasetSplit, features: &Tensor) -> Result<GlobalRepresentationTable> {
    let means = class_means(split, features)?;
    GlobalRepresentationTable::new(split.classes.clone(), means)
}

pub fn class_means(split: &DatasetSplit, features: &Tensor) -> Result<Tensor> {
    let d = features.row_len();
    let mut out = Tensor::zeros([split.num_classes(), d]);
    for (c, members) in split.train_by_class().iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Integrity(format!("class `{}` has no training samples", split.classes[c].id)));
        }
        let row = out.row_mut(c);
        for &i in members {
            for (o, x) in row.iter_mut().zip(features.row(i)) {
                *o += x;
            }
        }
        let n = members.len() as f64;
        row.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

/// Population std per dimension over base-class features (all classes when
/// there are no base classes); floored at 1e-6.
fn base_feature_std(split: &DatasetSplit, features: &Tensor) -> Vec<f64> {
    let d = features.row_len();
    let mut rows: Vec<usize> =
        (0..split.train.len()).filter(|&i| split.classes[split.train[i].label].partition == Partition::Base).collect();
    if rows.is_empty() {
        rows = (0..split.train.len()).collect();
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &rows {
        mean.iter_mut().zip(features.row(i)).for_each(|(m, x)| *m += x / n);
    }
    let mut var = vec![0.0; d];
    for &i in &rows {
        var.iter_mut().zip(features.row(i)).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m) / n);
    }
    var.into_iter().map(|v| v.sqrt().max(1e-6)).collect()
}
