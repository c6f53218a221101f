use rand::Rng;

use super::tape::{Contributions, Op};
use super::{Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Row-wise softmax of `logits` laid out as rows of width `k`.
pub fn softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / z) as f32));
    }
    out
}

impl Tape {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = self.value(x).last_dim();
        let out = softmax_rows(self.data(x), k);
        let shape = self.shape(x).to_vec();
        self.push(Op::Softmax { x }, shape, out)
    }

    /// Mean over rows of `-log softmax(logits)[target]`; `logits` is `[rows×K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("logits {shape:?} do not match {} targets", targets.len()),
            ));
        }
        let k = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("target {bad} out of range for {k} classes"),
            ));
        }
        let data = self.data(logits);
        let mut total = 0.0f64;
        for (row, &t) in data.chunks_exact(k).zip(targets) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
            total += lse - (row[t] - max) as f64;
        }
        let probs = softmax_rows(data, k);
        let loss = (total / targets.len() as f64) as f32;
        self.push(
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
        )
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Dropout { x, mask }, shape, out)
    }
}

pub(super) fn softmax_backward(x: Var, out: &Tensor, g: &[f32]) -> Contributions {
    let k = out.last_dim();
    let mut dx = Vec::with_capacity(g.len());
    for (yr, gr) in out.data().chunks_exact(k).zip(g.chunks_exact(k)) {
        let dot: f64 = yr.iter().zip(gr).map(|(y, d)| (*y as f64) * (*d as f64)).sum();
        dx.extend(yr.iter().zip(gr).map(|(y, d)| y * (d - dot as f32)));
    }
    vec![(x, dx)]
}

pub(super) fn softmax_xent_backward(logits: Var, targets: &[usize], probs: &[f32], g: &[f32]) -> Contributions {
    let rows = targets.len();
    let k = probs.len() / rows;
    let scale = g[0] / rows as f32;
    let mut dx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
    for (r, &t) in targets.iter().enumerate() {
        dx[r * k + t] -= scale;
    }
    vec![(logits, dx)]
}
