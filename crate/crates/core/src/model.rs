//! Pretraining model: shared patch network, attention pooling and the
//! contrastive decoder, plus the architecture description stored with
//! checkpoints.

use serde::{Deserialize, Serialize};

use crate::decoder::{build_queries, contrastive_logits, contrastive_loss, cross_image_logits, ContrastiveScores};
use crate::encoder::{init_patch_network, PatchNet, PatchNetConfig};
use crate::error::{Error, Result};
use crate::layers::Forward;
use crate::params::ParamStore;
use crate::patch::PretrainBatch;
use crate::pool::{init_attention_pool, AttentionConfig, AttentionPool, PositionalTable};
use crate::rng::StreamRng;
use crate::tensor::{Tensor, Var};
use crate::train::checkpoint::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input height and width.
    pub image_size: [usize; 2],
    pub patchnet: PatchNetConfig,
    pub attention: AttentionConfig,
    /// Decoder queries reuse the pooling positional table; otherwise they
    /// get their own table named `query.pos.*`.
    pub shared_query_table: bool,
    /// Score queries against masked patches of every image in the batch.
    pub cross_image_negatives: bool,
}

impl ModelConfig {
    pub fn desk(image_size: [usize; 2], channels: usize, patch_size: usize) -> Self {
        let mut patchnet = PatchNetConfig::desk(patch_size);
        patchnet.in_channels = channels;
        Self {
            image_size,
            patchnet,
            attention: AttentionConfig::desk(),
            shared_query_table: true,
            cross_image_negatives: false,
        }
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        let ps = self.patchnet.patch_size;
        let [h, w] = self.image_size;
        if ps == 0 || h % ps != 0 || w % ps != 0 {
            return Err(Error::Config(format!("patch size {ps} does not divide the {h}×{w} image evenly")));
        }
        Ok((h / ps, w / ps))
    }

    pub fn validate(&self) -> Result<()> {
        self.patchnet.validate()?;
        self.attention.validate()?;
        self.grid().map(|_| ())
    }

    /// Hash of the canonical serialization; independent of how the
    /// settings were written down.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("model config serializes");
        sha256_hex(text.as_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub config: ModelConfig,
    pub patchnet: PatchNet,
    pub pool: AttentionPool,
    query_table: Option<PositionalTable>,
}

pub struct PretrainOutput {
    pub loss: Var,
    pub scores: ContrastiveScores,
}

pub fn init_pretrain_model(config: &ModelConfig, store: &mut ParamStore, rng: &mut StreamRng) -> Result<PretrainModel> {
    config.validate()?;
    let grid = config.grid()?;
    let patchnet = init_patch_network(&config.patchnet, store, rng)?;
    let pool = init_attention_pool(&config.attention, patchnet.feature_dim(), grid, store, rng)?;
    let query_table = if config.shared_query_table {
        None
    } else {
        let a = &config.attention;
        Some(PositionalTable::new(store, "query.pos", grid, a.hidden, a.positional, rng)?)
    };
    Ok(PretrainModel {
        config: config.clone(),
        patchnet,
        pool,
        query_table,
    })
}

impl PretrainModel {
    pub fn query_table(&self) -> &PositionalTable {
        self.query_table.as_ref().unwrap_or(&self.pool.table)
    }

    /// Encoder and decoder patches go through the patch network as one
    /// batch, so they share normalization statistics in train mode.
    pub fn forward(&self, f: &mut Forward, batch: &PretrainBatch) -> Result<PretrainOutput> {
        let (b, ne, nd) = (batch.batch_size(), batch.encoder_count(), batch.decoder_count());
        let ps = batch.patch_size();
        let c = batch.encoder_patches.shape()[4];
        let mut data = Vec::with_capacity(batch.encoder_patches.len() + batch.decoder_patches.len());
        data.extend_from_slice(batch.encoder_patches.data());
        data.extend_from_slice(batch.decoder_patches.data());
        let all = Tensor::new(vec![b * (ne + nd), ps, ps, c], data)?;
        if ps != self.patchnet.config.patch_size {
            return Err(Error::invalid(
                "pretrain_forward",
                format!("batch patch size {ps} differs from the model's {}", self.patchnet.config.patch_size),
            ));
        }

        let x = f.input(all);
        let feats = self.patchnet.encode_flat(f, x)?;
        let d = self.patchnet.feature_dim();
        let enc_rows: Vec<usize> = (0..b * ne).collect();
        let dec_rows: Vec<usize> = (b * ne..b * (ne + nd)).collect();
        let he = f.tape.gather(feats, &enc_rows)?;
        let he = f.tape.reshape(he, &[b, ne, d])?;
        let hd = f.tape.gather(feats, &dec_rows)?;
        let hd = f.tape.reshape(hd, &[b, nd, d])?;
        let hd = self.pool.project(f, hd)?;

        let u = self.pool.summarize(f, he, &batch.encoder_locations)?;
        let v = build_queries(f, u, &batch.decoder_locations, self.query_table())?;
        let scores = if self.config.cross_image_negatives {
            cross_image_logits(&mut f.tape, v, hd)?
        } else {
            contrastive_logits(&mut f.tape, v, hd)?
        };
        let loss = contrastive_loss(&mut f.tape, &scores)?;
        Ok(PretrainOutput { loss, scores })
    }
}
