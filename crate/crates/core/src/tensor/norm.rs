use super::tape::{Contributions, Nodes, Op};
use super::{Mode, Tape, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

/// Batch-norm running statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Number of train-mode batches folded in so far.
    pub tracked: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            tracked: 0,
        }
    }
}

fn check_affine(tape: &Tape, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
    let d = tape.value(x).last_dim();
    if tape.shape(gamma) != [d] || tape.shape(beta) != [d] {
        return Err(Error::shape(op, tape.shape(x), tape.shape(gamma)));
    }
    Ok(d)
}

impl Tape {
    /// Per-channel normalization over every axis but the last.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let c = check_affine(self, "batch_norm", x, gamma, beta)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::invalid(
                "batch_norm",
                format!("running stats hold {} channels, input has {c}", stats.mean.len()),
            ));
        }
        let xd = self.data(x);
        let rows = xd.len() / c;
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            Mode::Train => {
                let mut sum = vec![0.0f64; c];
                for row in xd.chunks_exact(c) {
                    sum.iter_mut().zip(row).for_each(|(s, v)| *s += *v as f64);
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
                let mut sq = vec![0.0f64; c];
                for row in xd.chunks_exact(c) {
                    for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                        let d = *v as f64 - m;
                        *s += d * d;
                    }
                }
                let var: Vec<f64> = sq.iter().map(|s| s / rows as f64).collect();
                let unbias = if rows > 1 {
                    rows as f64 / (rows as f64 - 1.0)
                } else {
                    1.0
                };
                for ch in 0..c {
                    stats.mean[ch] = BN_MOMENTUM * stats.mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch] as f32;
                    stats.var[ch] =
                        BN_MOMENTUM * stats.var[ch] + (1.0 - BN_MOMENTUM) * (var[ch] * unbias) as f32;
                }
                stats.tracked += 1;
                (
                    mean.into_iter().map(|v| v as f32).collect(),
                    var.into_iter().map(|v| v as f32).collect(),
                )
            }
            Mode::Eval => {
                if stats.tracked == 0 {
                    return Err(Error::invalid(
                        "batch_norm",
                        "eval mode requested before any train-mode batch initialized the running statistics",
                    ));
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gd[ch] * h + bd[ch]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            shape,
            out,
        )
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = check_affine(self, "layer_norm", x, gamma, beta)?;
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(xd.len() / d);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(d) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
            inv_std.push(inv as f32);
            for (j, &v) in row.iter().enumerate() {
                let h = ((v as f64 - mean) * inv) as f32;
                xhat.push(h);
                out.push(gd[j] * h + bd[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            shape,
            out,
        )
    }
}

fn affine_grads(
    nodes: &Nodes,
    gamma: Var,
    beta: Var,
    xhat: &[f32],
    d: usize,
    g: &[f32],
    out: &mut Contributions,
) {
    if nodes.needs(gamma) {
        let mut acc = vec![0.0f64; d];
        for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
            for j in 0..d {
                acc[j] += (gr[j] * hr[j]) as f64;
            }
        }
        out.push((gamma, acc.into_iter().map(|v| v as f32).collect()));
    }
    if nodes.needs(beta) {
        let mut acc = vec![0.0f64; d];
        for gr in g.chunks_exact(d) {
            acc.iter_mut().zip(gr).for_each(|(a, v)| *a += *v as f64);
        }
        out.push((beta, acc.into_iter().map(|v| v as f32).collect()));
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward(
    nodes: &Nodes,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f32],
    inv_std: &[f32],
    train: bool,
    g: &[f32],
) -> Contributions {
    let c = inv_std.len();
    let rows = g.len() / c;
    let mut out = Vec::new();
    if nodes.needs(x) {
        let gd = nodes.data(gamma);
        let mut dx = vec![0.0f32; g.len()];
        if train {
            let mut sum_d = vec![0.0f64; c];
            let mut sum_dh = vec![0.0f64; c];
            for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for ch in 0..c {
                    let dh = (gr[ch] * gd[ch]) as f64;
                    sum_d[ch] += dh;
                    sum_dh[ch] += dh * hr[ch] as f64;
                }
            }
            let n = rows as f64;
            for (i, (gr, hr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                for ch in 0..c {
                    let dh = (gr[ch] * gd[ch]) as f64;
                    let v = (n * dh - sum_d[ch] - hr[ch] as f64 * sum_dh[ch]) * inv_std[ch] as f64 / n;
                    dx[i * c + ch] = v as f32;
                }
            }
        } else {
            for (i, gr) in g.chunks_exact(c).enumerate() {
                for ch in 0..c {
                    dx[i * c + ch] = gr[ch] * gd[ch] * inv_std[ch];
                }
            }
        }
        out.push((x, dx));
    }
    affine_grads(nodes, gamma, beta, xhat, c, g, &mut out);
    out
}

pub(super) fn layer_norm_backward(
    nodes: &Nodes,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f32],
    inv_std: &[f32],
    g: &[f32],
) -> Contributions {
    let d = nodes.value(gamma).len();
    let mut out = Vec::new();
    if nodes.needs(x) {
        let gd = nodes.data(gamma);
        let mut dx = vec![0.0f32; g.len()];
        for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
            let mut sum_d = 0.0f64;
            let mut sum_dh = 0.0f64;
            for j in 0..d {
                let dh = (gr[j] * gd[j]) as f64;
                sum_d += dh;
                sum_dh += dh * hr[j] as f64;
            }
            let n = d as f64;
            for j in 0..d {
                let dh = (gr[j] * gd[j]) as f64;
                dx[r * d + j] = ((n * dh - sum_d - hr[j] as f64 * sum_dh) * inv_std[r] as f64 / n) as f32;
            }
        }
        out.push((x, dx));
    }
    affine_grads(nodes, gamma, beta, xhat, d, g, &mut out);
    out
}
