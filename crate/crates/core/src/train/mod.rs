pub mod checkpoint;
pub mod finetune;
pub mod optim;
pub mod pretrain;

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Site, Streams};

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub split: String,
    pub loss: f32,
    pub accuracy: f64,
    pub lr: f64,
    pub seed: u64,
}

/// Append-only metrics CSV.
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl MetricsLog {
    /// Start a new file, or continue an existing one when `append` is set.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let existing = append && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(existing)
            .write(true)
            .truncate(!existing)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(!existing).from_writer(file);
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer
            .serialize(row)
            .map_err(|e| Error::format(&self.path, e.to_string()))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Dataset indices for `step`: consecutive slices of per-epoch
/// permutations, so the order depends only on (seed, step).
pub fn batch_indices(streams: &Streams, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for i in 0..batch as u64 {
        let global = step * batch as u64 + i;
        let (epoch, pos) = (global / n as u64, (global % n as u64) as usize);
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut streams.stream(Site::Shuffle, epoch));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[pos]);
    }
    out
}
