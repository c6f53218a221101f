//! Seed aggregation, result tables and jigsaw renderings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::unit_to_byte;
use crate::decoder::predict_assignment;
use crate::error::{Error, Result};
use crate::layers::Forward;
use crate::model::PretrainModel;
use crate::params::ParamStore;
use crate::patch::{build_pretrain_batch, Loc, PretrainBatch};
use crate::rng::{Site, Streams};
use crate::tensor::{Mode, Tensor};
use crate::train::finetune::needs_calibration;

pub const MISSING: &str = "—";

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// `"mean ± std"`, or `—` for no values.
pub fn format_cell(values: &[f64], precision: usize) -> String {
    match mean_std(values) {
        Some((m, s)) => format!("{m:.precision$} ± {s:.precision$}"),
        None => MISSING.into(),
    }
}

/// Signed difference, `+` for gains and `−` for losses.
pub fn format_delta(delta: f64, precision: usize) -> String {
    let text = format!("{:.precision$}", delta.abs());
    let rounded_zero = text.chars().all(|c| c == '0' || c == '.');
    if delta < 0.0 && !rounded_zero {
        format!("−{text}")
    } else {
        format!("+{text}")
    }
}

/// One finetuning outcome in `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub fraction: f64,
    /// `random` or `pretrained`.
    pub init: String,
    pub lr_max: f64,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_loss: f32,
    pub train_accuracy: f64,
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Per-(dataset, fraction, init, lr) summary line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub fraction: f64,
    pub init: String,
    pub lr_max: f64,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.dataset.clone(), r.fraction.to_string(), r.init.clone(), r.lr_max.to_string());
        groups.entry(key).or_default().push(r.test_accuracy);
    }
    groups
        .into_iter()
        .map(|((dataset, fraction, init, lr), acc)| {
            let (mean, std) = mean_std(&acc).expect("group is non-empty");
            SummaryRow {
                dataset,
                fraction: fraction.parse().expect("formatted from f64"),
                init,
                lr_max: lr.parse().expect("formatted from f64"),
                runs: acc.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct Table {
    pub text: String,
    pub warnings: Vec<String>,
}

/// Rows are dataset × fraction; columns supervised, pretrained and Δ, each
/// `mean ± std` of test accuracy in percent. When several learning rates
/// were run, the one with the best mean is shown per column.
pub fn report_table(rows: &[ResultRow]) -> Table {
    let mut cells: BTreeMap<(String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let summaries = summarize(rows);
    for init in ["random", "pretrained"] {
        let mut best: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
        for s in summaries.iter().filter(|s| s.init == init) {
            let key = (s.dataset.clone(), s.fraction.to_string());
            if best.get(&key).is_none_or(|b| s.mean > b.0) {
                best.insert(key, (s.mean, s.lr_max));
            }
        }
        for r in rows.iter().filter(|r| r.init == init) {
            let key = (r.dataset.clone(), r.fraction.to_string());
            if best.get(&key).is_some_and(|b| b.1 == r.lr_max) {
                cells
                    .entry(key)
                    .or_default()
                    .entry(init.to_string())
                    .or_default()
                    .push(100.0 * r.test_accuracy);
            }
        }
    }

    let header = ["dataset", "fraction", "supervised", "pretrained", "Δ"];
    let mut lines = vec![header.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    let mut warnings = Vec::new();
    for ((dataset, fraction), by_init) in &cells {
        let sup = by_init.get("random").map(Vec::as_slice).unwrap_or(&[]);
        let pre = by_init.get("pretrained").map(Vec::as_slice).unwrap_or(&[]);
        for (name, v) in [("supervised", sup), ("pretrained", pre)] {
            if v.is_empty() {
                warnings.push(format!("no {name} runs for {dataset} at fraction {fraction}"));
            }
        }
        let delta = match (mean_std(sup), mean_std(pre)) {
            (Some((s, _)), Some((p, _))) => format_delta(p - s, 1),
            _ => MISSING.into(),
        };
        lines.push(vec![
            dataset.clone(),
            fraction.clone(),
            format_cell(sup, 1),
            format_cell(pre, 1),
            delta,
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, line) in lines.iter().enumerate() {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        text.push_str(padded.join(" | ").trim_end());
        text.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            text.push_str(&rule.join("-|-"));
            text.push('\n');
        }
    }
    Table { text, warnings }
}

pub const WHITE: [f32; 3] = [1.0, 1.0, 1.0];
pub const RED: [f32; 3] = [1.0, -1.0, -1.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BorderCounts {
    pub white: usize,
    pub red: usize,
}

/// Three-channel view of an image: grey for one channel, the first three
/// channels otherwise.
fn to_rgb(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[2] == 2 {
        return Err(Error::invalid("render", format!("cannot show an image of shape {s:?}")));
    }
    let c = s[2];
    let d = image.data();
    Tensor::new(
        vec![s[0], s[1], 3],
        d.chunks_exact(c)
            .flat_map(|px| if c == 1 { [px[0]; 3] } else { [px[0], px[1], px[2]] })
            .collect(),
    )
}

/// Place, for every masked slot `i`, the candidate chosen for it
/// (`predicted[i]`, an index into `decoder_locs`) and frame the slot with a
/// 1-pixel white border when the choice is right and red otherwise.
/// Visible patches stay where they are; the output has the input's size.
pub fn render_with_assignment(
    image: &Tensor,
    ps: usize,
    decoder_locs: &[Loc],
    predicted: &[usize],
) -> Result<(Tensor, BorderCounts)> {
    if predicted.len() != decoder_locs.len() || predicted.iter().any(|&j| j >= decoder_locs.len()) {
        return Err(Error::invalid("render", "assignment does not match the masked slots"));
    }
    let src = to_rgb(image)?;
    let (h, w) = (src.shape()[0], src.shape()[1]);
    if ps == 0 || h % ps != 0 || w % ps != 0 {
        return Err(Error::Config(format!("patch size {ps} does not divide the {h}×{w} image")));
    }
    let mut out = src.clone();
    let mut counts = BorderCounts::default();
    for (i, &(r, c)) in decoder_locs.iter().enumerate() {
        let (sr, sc) = decoder_locs[predicted[i]];
        for y in 0..ps {
            for x in 0..ps {
                let to = ((r * ps + y) * w + c * ps + x) * 3;
                let from = ((sr * ps + y) * w + sc * ps + x) * 3;
                let px = [src.data()[from], src.data()[from + 1], src.data()[from + 2]];
                out.data_mut()[to..to + 3].copy_from_slice(&px);
            }
        }
        let color = if predicted[i] == i {
            counts.white += 1;
            WHITE
        } else {
            counts.red += 1;
            RED
        };
        for y in 0..ps {
            for x in 0..ps {
                if y == 0 || x == 0 || y == ps - 1 || x == ps - 1 {
                    let at = ((r * ps + y) * w + c * ps + x) * 3;
                    out.data_mut()[at..at + 3].copy_from_slice(&color);
                }
            }
        }
    }
    Ok((out, counts))
}

/// Binary PPM (P6) of a `[H×W×3]` image in [−1, 1].
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let rgb = to_rgb(image)?;
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb.data().iter().map(|&v| unit_to_byte(v)));
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Parse a P6 file back to `[H×W×3]` bytes; used to check renderings.
pub fn decode_ppm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        fields.push(std::str::from_utf8(bytes.get(start..at)?).ok()?.to_string());
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return None;
    }
    let (w, h) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let body = bytes.get(at + 1..)?.to_vec();
    (body.len() == w * h * 3).then_some((w, h, body))
}

/// The fixed masking used for rendering image `k`: no augmentation and
/// the mask drawn from the render stream of `k`, so it is the same in
/// every rendering for a given seed.
pub fn render_batch(image: &Tensor, ps: usize, p: f64, seed: u64, k: u64) -> Result<PretrainBatch> {
    let mut rng = Streams::new(seed).stream(Site::Render, k);
    build_pretrain_batch(std::slice::from_ref(image), ps, p, 0, &mut rng)
}

/// Model assignment for a single-image batch. Uses running statistics
/// when they exist and batch statistics otherwise.
pub fn assign(model: &PretrainModel, store: &ParamStore, batch: &PretrainBatch) -> Result<Vec<usize>> {
    let mode = if needs_calibration(store) { Mode::Train } else { Mode::Eval };
    let mut scratch = store.clone();
    let mut f = Forward::new(&mut scratch, mode, Streams::new(0).stream(Site::Eval, 0));
    let out = model.forward(&mut f, batch)?;
    Ok(predict_assignment(f.tape.data(out.scores.logits), out.scores.nd).predicted)
}

/// Render every image with the model's assignment to
/// `<dir>/<tag>-<k>.ppm`.
pub fn render_jigsaw(
    model: &PretrainModel,
    store: &ParamStore,
    images: &[Tensor],
    p: f64,
    seed: u64,
    dir: &Path,
    tag: &str,
) -> Result<Vec<(PathBuf, BorderCounts)>> {
    let ps = model.config.patchnet.patch_size;
    let [h, w] = model.config.image_size;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(images.len());
    for (k, image) in images.iter().enumerate() {
        if image.shape()[..2] != [h, w] {
            return Err(Error::Config(format!(
                "image {k} is {:?}, the checkpoint expects {h}×{w}",
                image.shape()
            )));
        }
        let batch = render_batch(image, ps, p, seed, k as u64)?;
        let predicted = assign(model, store, &batch)?;
        let (canvas, counts) = render_with_assignment(&batch.sources[0], ps, &batch.decoder_locations, &predicted)?;
        let path = dir.join(format!("{tag}-{k:04}.ppm"));
        write_ppm(&path, &canvas)?;
        out.push((path, counts));
    }
    Ok(out)
}
