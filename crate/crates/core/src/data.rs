//! Datasets: CIFAR-10 binary batches, raw tensor files, labeled subsets and a
//! synthetic jigsaw generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{Site, Streams};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

const RAW_MAGIC: &[u8; 4] = b"IMGT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N×H×W×C]`, values in [−1, 1].
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub split: Split,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<usize>>, split: Split, class_count: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::invalid("dataset", format!("images must be N×H×W×C, got {:?}", images.shape())));
        }
        if let Some(labels) = &labels {
            if labels.len() != images.shape()[0] {
                return Err(Error::invalid(
                    "dataset",
                    format!("{} labels for {} images", labels.len(), images.shape()[0]),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
                return Err(Error::invalid(
                    "dataset",
                    format!("label {bad} outside [0, {class_count})"),
                ));
            }
        }
        Ok(Self {
            images,
            labels,
            split,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W, C)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.index_first(i).expect("index within dataset")
    }

    pub fn images_at(&self, indices: &[usize]) -> Vec<Tensor> {
        indices.iter().map(|&i| self.image(i)).collect()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid("dataset", "dataset has no labels"))
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let images = Tensor::stack(&self.images_at(indices))?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset::new(images, labels, self.split, self.class_count)
    }

    pub fn class_histogram(&self) -> Result<Vec<usize>> {
        let mut hist = vec![0; self.class_count];
        for &y in self.labels()? {
            hist[y] += 1;
        }
        Ok(hist)
    }
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Parse one CIFAR-10 binary batch: records of a label byte then planar
/// 32×32 R, G, B planes.
pub fn read_cifar10_file(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(path, format!("label byte {label} out of range")));
        }
        labels.push(label);
        let planes = &record[1..];
        for p in 0..plane {
            for ch in 0..3 {
                pixels.push(byte_to_unit(planes[ch * plane + p]));
            }
        }
    }
    let images = Tensor::new(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], pixels)?;
    Dataset::new(images, Some(labels), split, CIFAR_CLASSES)
}

/// Read the five training batches and the test batch from `dir`.
pub fn read_cifar10_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut parts = Vec::with_capacity(CIFAR_TRAIN_FILES.len());
    for name in CIFAR_TRAIN_FILES {
        parts.push(read_cifar10_file(&dir.join(name), Split::Train)?);
    }
    let test = read_cifar10_file(&dir.join(CIFAR_TEST_FILE), Split::Test)?;
    Ok((concat(parts)?, test))
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "no datasets"))?;
    let (split, classes) = (first.split, first.class_count);
    let mut shape = first.images.shape().to_vec();
    shape[0] = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut labels = Vec::with_capacity(shape[0]);
    for part in parts {
        labels.extend(part.labels.unwrap_or_default());
        data.extend(part.images.into_data());
    }
    let labels = (labels.len() == shape[0]).then_some(labels);
    Dataset::new(Tensor::new(shape, data)?, labels, split, classes)
}

pub fn labels_path(path: &Path) -> PathBuf {
    path.with_extension("lbl")
}

/// Write `IMGT` + u32 N,H,W,C + f32 payload, plus a `.lbl` u16 file when
/// labels are present.
pub fn write_raw(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 4 * ds.images.len());
    out.extend_from_slice(RAW_MAGIC);
    for &d in ds.images.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in ds.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    if let Some(labels) = &ds.labels {
        let lbl = labels_path(path);
        let mut out = Vec::with_capacity(2 * labels.len());
        for &y in labels {
            let y = u16::try_from(y).map_err(|_| Error::format(&lbl, format!("label {y} exceeds u16")))?;
            out.extend_from_slice(&y.to_le_bytes());
        }
        fs::write(&lbl, out).map_err(|e| Error::io(&lbl, e))?;
    }
    Ok(())
}

/// Read a raw tensor file. Labels are loaded from the adjacent `.lbl` file
/// when it exists; `class_count` defaults to `max label + 1`.
pub fn read_raw(path: &Path, split: Split, class_count: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::format(path, "missing IMGT header"));
    }
    let dims: Vec<usize> = bytes[4..20]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if count == 0 || bytes.len() != 20 + 4 * count {
        return Err(Error::format(
            path,
            format!("payload of {} bytes does not match shape {dims:?}", bytes.len() - 20),
        ));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let images = Tensor::new(dims.clone(), data)?;

    let lbl = labels_path(path);
    let labels = if lbl.exists() {
        let raw = fs::read(&lbl).map_err(|e| Error::io(&lbl, e))?;
        if raw.len() != 2 * dims[0] {
            return Err(Error::format(&lbl, format!("expected {} labels", dims[0])));
        }
        Some(
            raw.chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let classes = class_count.unwrap_or_else(|| {
        labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(1, |m| m + 1)
    });
    Dataset::new(images, labels, split, classes)
}

/// Class-balanced subset without replacement: `round(fraction·N/K)` images
/// per class, kept in dataset order. `fraction == 1.0` returns the dataset
/// unchanged.
pub fn subset_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subset fraction {fraction} must lie in (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let labels = ds.labels()?;
    let k = ds.class_count;
    let per_class = (fraction * ds.len() as f64 / k as f64).round() as usize;
    if per_class == 0 {
        return Err(Error::Config(format!(
            "fraction {fraction} of {} images over {k} classes leaves zero examples per class",
            ds.len()
        )));
    }
    let mut by_class = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = Streams::new(seed).stream(Site::Subset, 0);
    let mut chosen = Vec::with_capacity(per_class * k);
    for (y, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::Config(format!(
                "class {y} has {} examples, fewer than the {per_class} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.sort_unstable();
    ds.select(&chosen)
}

/// Per-cell jitter of the synthetic generator.
pub const JIGSAW_JITTER: f32 = 0.05;
const JIGSAW_SPAN: f32 = 0.8;

/// Evenly spaced levels over [−0.8, 0.8].
fn levels(n: usize) -> Vec<f32> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| -JIGSAW_SPAN + 2.0 * JIGSAW_SPAN * i as f32 / (n - 1) as f32)
        .collect()
}

fn level_step(n: usize) -> f32 {
    if n == 1 {
        f32::INFINITY
    } else {
        2.0 * JIGSAW_SPAN / (n - 1) as f32
    }
}

/// Images tiled by `cell×cell` constant-color cells.
///
/// Channel 0 encodes the cell row and channel 1 the cell column, each as an
/// evenly spaced level plus uniform jitter of ±0.05 per cell. Channel 2
/// holds the class level plus the same jitter, so the label is the class
/// level nearest to the image mean of channel 2. Extra channels are zero.
/// Labels are `i mod classes`, shuffled.
pub fn make_synthetic_jigsaw(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    classes: usize,
    cell: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || classes == 0 || c < 3 {
        return Err(Error::Config(format!(
            "synthetic jigsaw needs n > 0, classes > 0 and at least 3 channels (n={n}, classes={classes}, C={c})"
        )));
    }
    if cell == 0 || !h.is_multiple_of(cell) || !w.is_multiple_of(cell) {
        return Err(Error::Config(format!("cell size {cell} does not tile {h}×{w}")));
    }
    let (rows, cols) = (h / cell, w / cell);
    let min_cell_gap = 0.2 + 2.0 * JIGSAW_JITTER;
    if level_step(rows) < min_cell_gap || level_step(cols) < min_cell_gap {
        return Err(Error::Config(format!(
            "{rows}×{cols} cells are too many to keep colors 0.2 apart"
        )));
    }
    if level_step(classes) <= 2.0 * JIGSAW_JITTER {
        return Err(Error::Config(format!("{classes} classes are too many to separate")));
    }
    let (row_lv, col_lv, class_lv) = (levels(rows), levels(cols), levels(classes));

    let streams = Streams::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut streams.stream(Site::Synthetic, 0));

    let mut data = vec![0.0f32; n * h * w * c];
    for (i, &y) in labels.iter().enumerate() {
        let mut rng = streams.stream(Site::Synthetic, 1 + i as u64);
        let image = &mut data[i * h * w * c..(i + 1) * h * w * c];
        for (r, &row_level) in row_lv.iter().enumerate().take(rows) {
            for (q, &col_level) in col_lv.iter().enumerate().take(cols) {
                let mut jitter = || rng.random_range(-JIGSAW_JITTER..=JIGSAW_JITTER);
                let color = [row_level + jitter(), col_level + jitter(), class_lv[y] + jitter()];
                for py in r * cell..(r + 1) * cell {
                    for px in q * cell..(q + 1) * cell {
                        let at = (py * w + px) * c;
                        image[at..at + 3].copy_from_slice(&color);
                    }
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, h, w, c], data)?, Some(labels), Split::Train, classes)
}

/// The label rule of [`make_synthetic_jigsaw`]: nearest class level to the
/// mean of channel 2.
pub fn synthetic_label(image: &Tensor, classes: usize) -> usize {
    let c = image.last_dim();
    let values: Vec<f64> = image.data().iter().skip(2).step_by(c).map(|&v| v as f64).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    levels(classes)
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (*a.1 as f64 - mean).abs();
            let db = (*b.1 as f64 - mean).abs();
            da.total_cmp(&db)
        })
        .map(|(y, _)| y)
        .expect("at least one class")
}
