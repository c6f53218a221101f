//! Flat key-value experiment settings (TOML) with defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic_jigsaw, read_cifar10_binary, read_raw, Dataset, Split};
use crate::encoder::PatchNetConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pool::{AttentionConfig, Positional};
use crate::train::checkpoint::sha256_hex;
use crate::train::finetune::{ClassifierArch, ClassifierConfig, FinetuneConfig};
use crate::train::optim::OptimizerConfig;
use crate::train::pretrain::PretrainConfig;

pub const SYNTHETIC: &str = "synthetic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `synthetic`, a CIFAR-10 binary directory or a raw `IMGT` file.
    pub dataset: String,
    /// Raw `IMGT` file for the held-out split when `dataset` is a raw file.
    pub test_dataset: String,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub out: String,

    pub ps: usize,
    pub p: f64,
    pub pad: usize,
    pub stem_channels: usize,
    pub block_counts: [usize; 3],
    pub group_channels: [usize; 3],
    pub group4_channels: usize,
    pub group4_blocks: usize,
    pub attention_blocks: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub dropout: f32,
    pub positional: Positional,
    pub encoder_positions: bool,
    pub shared_query_table: bool,
    pub cross_image_negatives: bool,
    pub finetune_arch: ClassifierArch,

    pub batch_size: usize,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub lr_max: f64,
    /// Finetuning learning rates to sweep; empty means `lr_max` only.
    pub lr_grid: Vec<f64>,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub eval_every: u64,

    pub synthetic_images: usize,
    pub synthetic_test_images: usize,
    pub synthetic_size: usize,
    pub synthetic_classes: usize,
    pub synthetic_cell: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: SYNTHETIC.into(),
            test_dataset: String::new(),
            fraction: 1.0,
            seeds: vec![0],
            out: "runs".into(),
            ps: 8,
            p: 0.75,
            pad: 4,
            stem_channels: 16,
            block_counts: [2, 2, 2],
            group_channels: [16, 32, 64],
            group4_channels: 128,
            group4_blocks: 2,
            attention_blocks: 2,
            hidden: 128,
            intermediate: 80,
            heads: 4,
            dropout: 0.1,
            positional: Positional::Auto,
            encoder_positions: true,
            shared_query_table: true,
            cross_image_negatives: false,
            finetune_arch: ClassifierArch::Resnet,
            batch_size: 64,
            pretrain_steps: 5000,
            finetune_steps: 3000,
            lr_max: 0.05,
            lr_grid: Vec::new(),
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup: 100,
            checkpoint_every: 1000,
            log_every: 50,
            eval_every: 0,
            synthetic_images: 1000,
            synthetic_test_images: 200,
            synthetic_size: 32,
            synthetic_classes: 4,
            synthetic_cell: 8,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Hash of the canonical serialization, so key order in the file does
    /// not matter.
    pub fn digest(&self) -> String {
        sha256_hex(toml::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn model(&self, image_size: [usize; 2], channels: usize) -> ModelConfig {
        ModelConfig {
            image_size,
            patchnet: PatchNetConfig {
                in_channels: channels,
                stem_channels: self.stem_channels,
                block_counts: self.block_counts,
                group_channels: self.group_channels,
                patch_size: self.ps,
            },
            attention: AttentionConfig {
                n_blocks: self.attention_blocks,
                hidden: self.hidden,
                intermediate: self.intermediate,
                heads: self.heads,
                dropout_rate: self.dropout,
                positional: self.positional,
                encoder_positions: self.encoder_positions,
            },
            shared_query_table: self.shared_query_table,
            cross_image_negatives: self.cross_image_negatives,
        }
    }

    pub fn optimizer(&self, lr_max: f64) -> OptimizerConfig {
        OptimizerConfig {
            lr_max,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup: self.warmup,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            batch_size: self.batch_size,
            steps: self.pretrain_steps,
            p: self.p,
            pad: self.pad,
            optimizer: self.optimizer(self.lr_max),
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
        }
    }

    pub fn finetune(&self, classes: usize, lr_max: f64) -> FinetuneConfig {
        FinetuneConfig {
            batch_size: self.batch_size,
            steps: self.finetune_steps,
            pad: self.pad,
            optimizer: self.optimizer(lr_max),
            classifier: ClassifierConfig {
                arch: self.finetune_arch,
                group4_channels: self.group4_channels,
                group4_blocks: self.group4_blocks,
                classes,
            },
            eval_every: self.eval_every,
            eval_batch: 250,
            log_every: self.log_every,
        }
    }

    /// Learning rates to finetune with.
    pub fn lr_values(&self) -> Vec<f64> {
        if self.lr_grid.is_empty() {
            vec![self.lr_max]
        } else {
            self.lr_grid.clone()
        }
    }

    /// Short dataset name for result tables.
    pub fn dataset_name(&self) -> String {
        if self.dataset == SYNTHETIC {
            return SYNTHETIC.into();
        }
        Path::new(&self.dataset)
            .file_name()
            .map_or_else(|| self.dataset.clone(), |n| n.to_string_lossy().into_owned())
    }

    /// Train and test splits named by `dataset`.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        if self.dataset == SYNTHETIC {
            let s = self.synthetic_size;
            let gen = |n, seed| {
                make_synthetic_jigsaw(n, s, s, 3, self.synthetic_classes, self.synthetic_cell, seed)
            };
            let train = gen(self.synthetic_images, 0)?;
            let mut test = gen(self.synthetic_test_images, 1)?;
            test.split = Split::Test;
            return Ok((train, test));
        }
        let path = Path::new(&self.dataset);
        if path.is_dir() {
            return read_cifar10_binary(path);
        }
        let train = read_raw(path, Split::Train, None)?;
        if self.test_dataset.is_empty() {
            return Err(Error::Config(format!(
                "raw dataset {} needs `test_dataset` for the held-out split",
                path.display()
            )));
        }
        let test = read_raw(Path::new(&self.test_dataset), Split::Test, Some(train.class_count))?;
        Ok((train, test))
    }
}
