//! Location queries, dot-product scoring of masked candidates and the
//! contrastive classification loss.

use crate::error::{Error, Result};
use crate::layers::Forward;
use crate::patch::Loc;
use crate::pool::PositionalTable;
use crate::tensor::{Tape, Var};

/// `logits[b, i, j] = v[b, i] · h[b, j]`; the correct candidate for row
/// `i` is `j = i`.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveScores {
    pub logits: Var,
    pub batch: usize,
    pub nd: usize,
}

impl ContrastiveScores {
    pub fn targets(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.nd).collect()
    }
}

/// `v_i = u + pos(loc_i)`: `u` is `[B×H]`, `locs` holds `B·nd` decoder
/// locations image-major. Returns `[B×nd×H]`.
pub fn build_queries(f: &mut Forward, u: Var, locs: &[Loc], table: &PositionalTable) -> Result<Var> {
    let shape = f.tape.shape(u).to_vec();
    if shape.len() != 2 || shape[0] == 0 || !locs.len().is_multiple_of(shape[0]) {
        return Err(Error::invalid(
            "build_queries",
            format!("{} locations do not split over u of shape {shape:?}", locs.len()),
        ));
    }
    let (b, h) = (shape[0], shape[1]);
    let nd = locs.len() / b;
    let pos = table.embed(f, locs)?;
    let repeat: Vec<usize> = (0..b).flat_map(|img| std::iter::repeat_n(img, nd)).collect();
    let u_rep = f.tape.gather(u, &repeat)?;
    let v = f.tape.add(u_rep, pos)?;
    f.tape.reshape(v, &[b, nd, h])
}

/// Score each image's queries against that image's own candidates.
pub fn contrastive_logits(tape: &mut Tape, v: Var, h_dec: Var) -> Result<ContrastiveScores> {
    let (sv, sh) = (tape.shape(v).to_vec(), tape.shape(h_dec).to_vec());
    if sv.len() != 3 || sv != sh {
        return Err(Error::shape("contrastive_logits", &sv, &sh));
    }
    let (batch, nd) = (sv[0], sv[1]);
    if nd < 2 {
        return Err(Error::invalid("contrastive_logits", "need at least 2 candidates per image"));
    }
    Ok(ContrastiveScores {
        logits: tape.bmm(v, h_dec, true)?,
        batch,
        nd,
    })
}

/// Experimental: every query scored against every masked patch in the
/// batch. The result is one `[1×B·nd×B·nd]` problem.
pub fn cross_image_logits(tape: &mut Tape, v: Var, h_dec: Var) -> Result<ContrastiveScores> {
    let (sv, sh) = (tape.shape(v).to_vec(), tape.shape(h_dec).to_vec());
    if sv.len() != 3 || sv != sh {
        return Err(Error::shape("cross_image_logits", &sv, &sh));
    }
    let rows = sv[0] * sv[1];
    let v = tape.reshape(v, &[1, rows, sv[2]])?;
    let h = tape.reshape(h_dec, &[1, rows, sv[2]])?;
    Ok(ContrastiveScores {
        logits: tape.bmm(v, h, true)?,
        batch: 1,
        nd: rows,
    })
}

/// Mean cross-entropy over all `B·nd` rows with target `j = i`.
pub fn contrastive_loss(tape: &mut Tape, scores: &ContrastiveScores) -> Result<Var> {
    let flat = tape.reshape(scores.logits, &[scores.batch * scores.nd, scores.nd])?;
    tape.softmax_cross_entropy(flat, &scores.targets())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Chosen candidate per row.
    pub predicted: Vec<usize>,
    pub correct: usize,
    pub accuracy: f64,
}

/// Row-wise argmax over `[rows×nd]` logits, lowest index on ties, scored
/// against the identity assignment.
pub fn predict_assignment(logits: &[f32], nd: usize) -> Assignment {
    let predicted: Vec<usize> = logits
        .chunks_exact(nd)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let correct = predicted.iter().enumerate().filter(|(r, &p)| r % nd == p).count();
    let accuracy = if predicted.is_empty() {
        0.0
    } else {
        correct as f64 / predicted.len() as f64
    };
    Assignment {
        predicted,
        correct,
        accuracy,
    }
}
