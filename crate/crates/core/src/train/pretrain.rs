//! Masked-patch pretraining loop.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decoder::predict_assignment;
use crate::error::{Error, Result};
use crate::layers::Forward;
use crate::model::{init_pretrain_model, ModelConfig, PretrainModel};
use crate::params::ParamStore;
use crate::patch::{build_pretrain_batch, PretrainBatch};
use crate::rng::{Site, StreamRng, Streams};
use crate::tensor::{Mode, Tape};
use crate::train::checkpoint::{save_checkpoint, Checkpoint};
use crate::train::optim::{cosine_lr, nesterov_step, OptimizerConfig, OptimizerState};
use crate::train::{batch_indices, MetricsLog, MetricsRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Fraction of grid cells routed to the encoder.
    pub p: f64,
    pub pad: usize,
    pub optimizer: OptimizerConfig,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Emit a metrics row every this many steps.
    pub log_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 5000,
            p: 0.75,
            pad: 4,
            optimizer: OptimizerConfig::default(),
            checkpoint_every: 1000,
            log_every: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f32,
    pub accuracy: f64,
}

/// Serialized alongside the parameters so checkpoints are self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainMeta {
    pub kind: String,
    pub model: ModelConfig,
}

pub const PRETRAIN_KIND: &str = "pretrain";

impl PretrainMeta {
    pub fn parse(text: &str) -> Result<Self> {
        let meta: Self = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.kind != PRETRAIN_KIND {
            return Err(Error::Checkpoint(format!("expected a pretrain checkpoint, found `{}`", meta.kind)));
        }
        Ok(meta)
    }
}

/// Turn a non-finite failure into a divergence report listing the largest
/// activation magnitude of every recorded operation.
pub(crate) fn diverged(step: u64, tape: &Tape, cause: &str) -> Error {
    let mut diagnostic = format!("{cause}; max |activation| per op:");
    for (idx, name, max) in tape.activation_report() {
        diagnostic.push_str(&format!("\n  #{idx} {name}: {max:e}"));
    }
    Error::Diverged { step, diagnostic }
}

/// Forward, backward and one optimizer update on `batch`.
pub fn pretrain_step(
    model: &PretrainModel,
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    cfg: &OptimizerConfig,
    batch: &PretrainBatch,
    lr: f32,
    dropout: StreamRng,
) -> Result<StepMetrics> {
    let step = opt.step;
    let mut f = Forward::new(store, Mode::Train, dropout);
    let out = match model.forward(&mut f, batch) {
        Ok(out) => out,
        Err(Error::NonFinite { op }) => return Err(diverged(step, &f.tape, &format!("non-finite output of {op}"))),
        Err(e) => return Err(e),
    };
    let loss = f.tape.data(out.loss)[0];
    let assignment = predict_assignment(f.tape.data(out.scores.logits), out.scores.nd);
    let grads = f.backward(out.loss)?;
    if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
        return Err(diverged(step, &f.tape, "non-finite gradient"));
    }
    nesterov_step(store, &grads, opt, cfg, lr)?;
    Ok(StepMetrics {
        loss,
        accuracy: assignment.accuracy,
    })
}

/// Loss and pretext accuracy without updating anything.
/// Train mode runs on a scratch copy, so running statistics are untouched.
pub fn pretrain_eval(model: &PretrainModel, store: &ParamStore, batch: &PretrainBatch, mode: Mode) -> Result<StepMetrics> {
    let mut scratch = store.clone();
    let mut f = Forward::new(&mut scratch, mode, Streams::new(0).stream(Site::Eval, 0));
    let out = model.forward(&mut f, batch)?;
    let loss = f.tape.data(out.loss)[0];
    let assignment = predict_assignment(f.tape.data(out.scores.logits), out.scores.nd);
    Ok(StepMetrics {
        loss,
        accuracy: assignment.accuracy,
    })
}

/// Model, parameters, optimizer state and seed of one pretraining run.
pub struct Pretrainer {
    pub model: PretrainModel,
    pub store: ParamStore,
    pub opt: OptimizerState,
    pub streams: Streams,
    pub config: PretrainConfig,
}

impl Pretrainer {
    pub fn new(model_cfg: &ModelConfig, config: &PretrainConfig, seed: u64) -> Result<Self> {
        let streams = Streams::new(seed);
        let mut store = ParamStore::new();
        let model = init_pretrain_model(model_cfg, &mut store, &mut streams.stream(Site::Init, 0))?;
        let opt = OptimizerState::new(&store);
        Ok(Self {
            model,
            store,
            opt,
            streams,
            config: config.clone(),
        })
    }

    /// Continue from a checkpoint written by [`Pretrainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, model_cfg: &ModelConfig, config: &PretrainConfig) -> Result<Self> {
        if ckpt.digest != model_cfg.digest() {
            return Err(Error::Checkpoint(format!(
                "config digest mismatch (checkpoint {}, config {})",
                ckpt.digest,
                model_cfg.digest()
            )));
        }
        let mut trainer = Self::new(model_cfg, config, ckpt.seed)?;
        copy_all(&ckpt.params, &mut trainer.store)?;
        trainer.opt = ckpt.optimizer_state(&trainer.store)?;
        trainer.opt.step = ckpt.rng_counter;
        Ok(trainer)
    }

    pub fn step_index(&self) -> u64 {
        self.opt.step
    }

    pub fn meta(&self) -> String {
        let meta = PretrainMeta {
            kind: PRETRAIN_KIND.into(),
            model: self.model.config.clone(),
        };
        toml::to_string(&meta).expect("metadata serializes")
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(
            self.opt.step,
            self.streams.seed(),
            self.model.config.digest(),
            self.meta(),
            self.store.clone(),
        )
        .with_optimizer(&self.opt)
    }

    /// The batch for `step`, fully determined by (seed, step).
    pub fn batch(&self, ds: &Dataset, step: u64) -> Result<PretrainBatch> {
        let idx = batch_indices(&self.streams, step, self.config.batch_size, ds.len());
        let images = ds.images_at(&idx);
        let ps = self.model.config.patchnet.patch_size;
        let mut rng = self.streams.stream(Site::Mask, step);
        build_pretrain_batch(&images, ps, self.config.p, self.config.pad, &mut rng)
    }

    pub fn lr(&self) -> Result<f64> {
        let o = &self.config.optimizer;
        cosine_lr(self.opt.step, o.lr_max, o.warmup, self.config.steps)
    }

    /// One scheduled step on the next batch of `ds`.
    pub fn step(&mut self, ds: &Dataset) -> Result<(StepMetrics, f64)> {
        let t = self.opt.step;
        let lr = self.lr()?;
        let batch = self.batch(ds, t)?;
        let dropout = self.streams.stream(Site::Dropout, t);
        let m = pretrain_step(
            &self.model,
            &mut self.store,
            &mut self.opt,
            &self.config.optimizer,
            &batch,
            lr as f32,
            dropout,
        )?;
        Ok((m, lr))
    }
}

/// Copy every tensor of `src` into the same-named entry of `dst`; both must
/// hold exactly the same names and shapes.
pub fn copy_all(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            src.len(),
            dst.len()
        )));
    }
    for (_, p) in src.iter() {
        let id = dst.id(&p.name).ok_or_else(|| Error::Param {
            name: p.name.clone(),
            msg: "not part of the model".into(),
        })?;
        let target = dst.get_mut(id);
        if target.tensor.shape() != p.tensor.shape() {
            return Err(Error::Param {
                name: p.name.clone(),
                msg: format!("shape {:?} in checkpoint, {:?} in model", p.tensor.shape(), target.tensor.shape()),
            });
        }
        target.tensor = p.tensor.clone();
    }
    Ok(())
}

pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

pub const FINAL_CHECKPOINT: &str = "pretrain.slfe";
pub const METRICS_FILE: &str = "metrics.csv";

/// Train until `config.steps`. With `out`, writes `metrics.csv`,
/// `step-<t>.slfe` every `checkpoint_every` steps and `pretrain.slfe` at the
/// end; a resumed run appends to the existing metrics.
pub fn run_pretrain(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    config: &PretrainConfig,
    seed: u64,
    resume: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<PretrainRun> {
    let mut trainer = match resume {
        Some(ckpt) => Pretrainer::resume(ckpt, model_cfg, config)?,
        None => Pretrainer::new(model_cfg, config, seed)?,
    };
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsLog::open(&dir.join(METRICS_FILE), resume.is_some())?)
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let seed = trainer.streams.seed();
    while trainer.step_index() < config.steps {
        let (m, lr) = trainer.step(ds)?;
        let t = trainer.step_index();
        if config.log_every > 0 && (t % config.log_every == 0 || t == config.steps) {
            let row = MetricsRow {
                step: t,
                split: "pretrain".into(),
                loss: m.loss,
                accuracy: m.accuracy,
                lr,
                seed,
            };
            if let Some(log) = log.as_mut() {
                log.write(&row)?;
            }
            metrics.push(row);
        }
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && t % config.checkpoint_every == 0 && t < config.steps {
                save_checkpoint(&dir.join(format!("step-{t}.slfe")), &trainer.checkpoint()?)?;
            }
        }
    }
    let checkpoint = trainer.checkpoint()?;
    if let Some(dir) = out {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &checkpoint)?;
    }
    Ok(PretrainRun { checkpoint, metrics })
}
