//! CSV logs and result tables.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use gcr_core::error::{Error, Result};
use gcr_core::evaluation::{AccuracySummary, GeneralizedMetrics};
use gcr_core::trainer::EpisodeRecord;
use serde::{Deserialize, Serialize};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Ingestion { path: path.to_owned(), reason: format!("{other:?}") },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: u64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_fsl")]
    pub l_fsl: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

impl From<&EpisodeRecord> for LogRow {
    fn from(r: &EpisodeRecord) -> Self {
        Self { episode: r.episode, l_reg: r.losses.reg, l_fsl: r.losses.fsl, l_total: r.losses.total, lr: r.lr, wall_time: r.wall_time }
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>().map_err(|e| csv_err(path, e))
}

/// Append-only training log. Opening it for a run that starts at episode
/// `start` drops any rows at or after `start` left by an interrupted run.
pub struct TrainLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl TrainLog {
    pub fn open(path: &Path, start: u64) -> Result<Self> {
        let kept =
            if start > 0 && path.exists() { read_log(path)?.into_iter().filter(|r| r.episode < start).collect() } else { Vec::new() };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(["episode", "L_reg", "L_fsl", "L_total", "lr", "wall_time"]).map_err(|e| csv_err(path, e))?;
        let mut log = Self { path: path.to_owned(), writer };
        for r in &kept {
            log.push(r)?;
        }
        log.flush()?;
        Ok(log)
    }

    pub fn push(&mut self, row: &LogRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Appends rows to a headed CSV, writing the header only for a new file.
pub fn append_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Replaces `path`; with no rows the file is removed, since the header is
/// taken from the first row.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    if rows.is_empty() {
        return Ok(());
    }
    append_rows(path, rows)
}

/// All rows of a headed CSV; a missing file reads as empty.
pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| csv_err(path, e))
}

/// One line of the results file. Columns that do not apply to a setting are
/// left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub setting: String,
    pub way: Option<usize>,
    pub shot: Option<usize>,
    pub episodes: Option<usize>,
    pub mean_acc: Option<f64>,
    pub std: Option<f64>,
    pub ci95: Option<f64>,
    pub acc_a: Option<f64>,
    pub acc_b: Option<f64>,
    pub acc_n: Option<f64>,
    pub checkpoint_id: String,
    pub seed: u64,
}

impl ResultRow {
    pub fn standard(setting: String, way: usize, shot: usize, s: &AccuracySummary, checkpoint_id: String, seed: u64) -> Self {
        Self {
            setting,
            way: Some(way),
            shot: Some(shot),
            episodes: Some(s.per_episode.len()),
            mean_acc: Some(s.mean),
            std: Some(s.std),
            ci95: Some(s.ci95),
            acc_a: None,
            acc_b: None,
            acc_n: None,
            checkpoint_id,
            seed,
        }
    }

    pub fn generalized(setting: String, way: usize, shot: usize, g: &GeneralizedMetrics, checkpoint_id: String, seed: u64) -> Self {
        Self {
            setting,
            way: Some(way),
            shot: Some(shot),
            episodes: None,
            mean_acc: None,
            std: None,
            ci95: None,
            acc_a: Some(g.acc_a),
            acc_b: Some(g.acc_b),
            acc_n: Some(g.acc_n),
            checkpoint_id,
            seed,
        }
    }
}

/// `(episode, mean accuracy)` from evaluations during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressRow {
    pub episode: u64,
    pub mean_acc: f64,
    pub ci95: f64,
}
