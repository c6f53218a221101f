//! Attention pooling: transformer blocks over patch features with a learned
//! seed token, plus the positional tables shared with the decoder queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{normal_tensor, Forward, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore, Role};
use crate::patch::Loc;
use crate::rng::StreamRng;
use crate::tensor::Var;

pub const POOL: &str = "pool";
/// Normal std for attention weights, the seed token and positional tables.
pub const INIT_STD: f32 = 0.02;
/// Largest grid that gets one embedding per cell under `Positional::Auto`.
pub const FLAT_MAX_CELLS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    /// One vector per cell.
    Flat,
    /// Row vector plus column vector.
    Factorized,
    /// Flat for grids of at most 16 cells, factorized beyond.
    Auto,
}

impl Positional {
    pub fn resolve(self, grid: (usize, usize)) -> Positional {
        match self {
            Positional::Auto if grid.0 * grid.1 <= FLAT_MAX_CELLS => Positional::Flat,
            Positional::Auto => Positional::Factorized,
            other => other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub dropout_rate: f32,
    pub positional: Positional,
    /// Add positional embeddings to the encoder patch tokens.
    pub encoder_positions: bool,
}

impl AttentionConfig {
    pub fn desk() -> Self {
        Self {
            n_blocks: 2,
            hidden: 128,
            intermediate: 80,
            heads: 4,
            dropout_rate: 0.1,
            positional: Positional::Auto,
            encoder_positions: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.hidden == 0 || self.intermediate == 0 || self.heads == 0 {
            return Err(Error::Config(format!("attention sizes must be positive: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Learned location embeddings over a fixed grid.
#[derive(Clone, Debug)]
pub struct PositionalTable {
    pub mode: Positional,
    pub grid: (usize, usize),
    pub hidden: usize,
    tables: Vec<ParamId>,
}

impl PositionalTable {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        grid: (usize, usize),
        hidden: usize,
        mode: Positional,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mode = mode.resolve(grid);
        let mut add = |suffix: &str, rows: usize| {
            store.insert(
                format!("{prefix}.{suffix}"),
                Role::Embedding,
                normal_tensor(vec![rows, hidden], INIT_STD, rng),
            )
        };
        let tables = match mode {
            Positional::Flat => vec![add("flat", grid.0 * grid.1)?],
            _ => vec![add("row", grid.0)?, add("col", grid.1)?],
        };
        Ok(Self {
            mode,
            grid,
            hidden,
            tables,
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.tables
    }

    /// Number of learned vectors across the table(s).
    pub fn vector_count(&self, store: &ParamStore) -> usize {
        self.tables.iter().map(|&id| store.tensor(id).shape()[0]).sum()
    }

    /// `[locs.len()×hidden]` embeddings.
    pub fn embed(&self, f: &mut Forward, locs: &[Loc]) -> Result<Var> {
        let (rows, cols) = self.grid;
        if let Some(bad) = locs.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::invalid(
                "position_embedding",
                format!("location {bad:?} outside the {rows}×{cols} grid"),
            ));
        }
        match self.mode {
            Positional::Flat => {
                let idx: Vec<usize> = locs.iter().map(|&(r, c)| r * cols + c).collect();
                let table = f.param(self.tables[0]);
                f.tape.gather(table, &idx)
            }
            _ => {
                let r_idx: Vec<usize> = locs.iter().map(|l| l.0).collect();
                let c_idx: Vec<usize> = locs.iter().map(|l| l.1).collect();
                let (row, col) = (f.param(self.tables[0]), f.param(self.tables[1]));
                let a = f.tape.gather(row, &r_idx)?;
                let b = f.tape.gather(col, &c_idx)?;
                f.tape.add(a, b)
            }
        }
    }
}

/// Multi-head self-attention, FC → GeLU → FC, dropout, one residual around
/// the whole block, then layer norm.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    fc1: Linear,
    fc2: Linear,
    ln: LayerNorm,
    heads: usize,
    dropout: f32,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut StreamRng) -> Result<Self> {
        let h = cfg.hidden;
        let mut lin = |suffix: &str, i: usize, o: usize| {
            Linear::new(store, &format!("{name}.{suffix}"), Role::Pool, i, o, INIT_STD, rng)
        };
        let (q, k, v, o) = (lin("q", h, h)?, lin("k", h, h)?, lin("v", h, h)?, lin("o", h, h)?);
        let fc1 = lin("fc1", h, cfg.intermediate)?;
        let fc2 = lin("fc2", cfg.intermediate, h)?;
        let ln = LayerNorm::new(store, &format!("{name}.ln"), Role::Pool, h)?;
        Ok(Self {
            q,
            k,
            v,
            o,
            fc1,
            fc2,
            ln,
            heads: cfg.heads,
            dropout: cfg.dropout_rate,
        })
    }

    /// `[B×T×H] → [B×T×H]`, also returning the `[B·heads×T×T]` attention
    /// weights (before dropout).
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<(Var, Var)> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.q.input {
            return Err(Error::invalid(
                "attention_block",
                format!("expected [B×T×{}] input, got {shape:?}", self.q.input),
            ));
        }
        let (b, t, h) = (shape[0], shape[1], shape[2]);
        let (nh, dh) = (self.heads, h / self.heads);
        let split = |f: &mut Forward, y: Var| -> Result<Var> {
            let y = f.tape.reshape(y, &[b, t, nh, dh])?;
            let y = f.tape.permute(y, &[0, 2, 1, 3])?;
            f.tape.reshape(y, &[b * nh, t, dh])
        };
        let q = self.q.forward(f, x)?;
        let q = split(f, q)?;
        let k = self.k.forward(f, x)?;
        let k = split(f, k)?;
        let v = self.v.forward(f, x)?;
        let v = split(f, v)?;

        let scores = f.tape.bmm(q, k, true)?;
        let scores = f.tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = f.tape.softmax(scores)?;
        let dropped = f.dropout(attn, self.dropout)?;
        let ctx = f.tape.bmm(dropped, v, false)?;
        let ctx = f.tape.reshape(ctx, &[b, nh, t, dh])?;
        let ctx = f.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = f.tape.reshape(ctx, &[b, t, h])?;
        let y = self.o.forward(f, ctx)?;

        let y = self.fc1.forward(f, y)?;
        let y = f.tape.gelu(y)?;
        let y = self.fc2.forward(f, y)?;
        let y = f.dropout(y, self.dropout)?;
        let y = f.tape.add(y, x)?;
        Ok((self.ln.forward(f, y)?, attn))
    }
}

#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub config: AttentionConfig,
    pub table: PositionalTable,
    proj: Option<Linear>,
    u0: ParamId,
    blocks: Vec<AttentionBlock>,
}

/// Pooling over patch features of width `feature_dim` on a `grid`.
pub fn init_attention_pool(
    config: &AttentionConfig,
    feature_dim: usize,
    grid: (usize, usize),
    store: &mut ParamStore,
    rng: &mut StreamRng,
) -> Result<AttentionPool> {
    config.validate()?;
    let h = config.hidden;
    let proj = if feature_dim != h {
        Some(Linear::new(store, &format!("{POOL}.proj"), Role::Pool, feature_dim, h, INIT_STD, rng)?)
    } else {
        None
    };
    let u0 = store.insert(format!("{POOL}.u0"), Role::Pool, normal_tensor(vec![1, h], INIT_STD, rng))?;
    let table = PositionalTable::new(store, &format!("{POOL}.pos"), grid, h, config.positional, rng)?;
    let blocks = (0..config.n_blocks)
        .map(|i| AttentionBlock::new(store, &format!("{POOL}.block{i}"), config, rng))
        .collect::<Result<_>>()?;
    Ok(AttentionPool {
        config: config.clone(),
        table,
        proj,
        u0,
        blocks,
    })
}

impl AttentionPool {
    /// Map `[.. × d]` patch features to `[.. × hidden]`.
    pub fn project(&self, f: &mut Forward, h: Var) -> Result<Var> {
        match &self.proj {
            Some(p) => p.forward(f, h),
            None => Ok(h),
        }
    }

    /// `u` for each image: `[B×n×d]` features at `locs` (`B·n`, image-major)
    /// to `[B×hidden]`.
    pub fn summarize(&self, f: &mut Forward, h: Var, locs: &[Loc]) -> Result<Var> {
        Ok(self.summarize_with_attention(f, h, locs)?.0)
    }

    /// As [`summarize`](Self::summarize), also returning every block's
    /// attention weights.
    pub fn summarize_with_attention(&self, f: &mut Forward, h: Var, locs: &[Loc]) -> Result<(Var, Vec<Var>)> {
        let shape = f.tape.shape(h).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid("pool_summarize", format!("expected [B×n×d], got {shape:?}")));
        }
        let (b, n) = (shape[0], shape[1]);
        if locs.len() != b * n {
            return Err(Error::invalid(
                "pool_summarize",
                format!("{} locations for {b}×{n} patch features", locs.len()),
            ));
        }
        let hidden = self.config.hidden;
        let tokens = self.project(f, h)?;
        let tokens = f.tape.reshape(tokens, &[b * n, hidden])?;
        let tokens = if self.config.encoder_positions {
            let pos = self.table.embed(f, locs)?;
            f.tape.add(tokens, pos)?
        } else {
            tokens
        };
        // Row 0 is u₀; image b's tokens follow at 1 + b·n.
        let u0 = f.param(self.u0);
        let all = f.tape.concat_rows(&[u0, tokens])?;
        let order: Vec<usize> = (0..b)
            .flat_map(|img| std::iter::once(0).chain((0..n).map(move |i| 1 + img * n + i)))
            .collect();
        let x = f.tape.gather(all, &order)?;
        let mut x = f.tape.reshape(x, &[b, n + 1, hidden])?;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, attn) = block.forward(f, x)?;
            x = y;
            maps.push(attn);
        }
        let x = f.tape.reshape(x, &[b * (n + 1), hidden])?;
        let firsts: Vec<usize> = (0..b).map(|img| img * (n + 1)).collect();
        Ok((f.tape.gather(x, &firsts)?, maps))
    }
}
