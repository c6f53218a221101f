//! Supervised finetuning on full images, from scratch or from a pretrained
//! patch network.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{init_patch_network, GroupSpec, PatchNet, ResNet};
use crate::error::{Error, Result};
use crate::layers::{Forward, Linear};
use crate::model::ModelConfig;
use crate::params::{ParamStore, Role};
use crate::patch::{augment_pad_crop, extract_patch_grid, Loc};
use crate::pool::{init_attention_pool, AttentionPool};
use crate::rng::{Site, StreamRng, Streams};
use crate::tensor::{Mode, Tensor, Var};
use crate::train::checkpoint::Checkpoint;
use crate::train::optim::{cosine_lr, nesterov_step, OptimizerConfig, OptimizerState};
use crate::train::pretrain::diverged;
use crate::train::{batch_indices, MetricsRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierArch {
    /// Patch-network groups plus a fourth group on the full image.
    Resnet,
    /// Patch network over the image's patch grid, attention pooling, head.
    Hybrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub arch: ClassifierArch,
    pub group4_channels: usize,
    pub group4_blocks: usize,
    pub classes: usize,
}

impl ClassifierConfig {
    pub fn desk(classes: usize) -> Self {
        Self {
            arch: ClassifierArch::Resnet,
            group4_channels: 128,
            group4_blocks: 2,
            classes,
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Resnet(ResNet),
    Hybrid { patchnet: PatchNet, pool: Box<AttentionPool> },
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub model: ModelConfig,
    pub config: ClassifierConfig,
    body: Body,
    head: Linear,
}

pub fn init_classifier(
    model: &ModelConfig,
    config: &ClassifierConfig,
    store: &mut ParamStore,
    rng: &mut StreamRng,
) -> Result<Classifier> {
    model.validate()?;
    if config.classes < 2 || config.group4_channels == 0 || config.group4_blocks == 0 {
        return Err(Error::Config(format!("invalid classifier settings: {config:?}")));
    }
    let pn = &model.patchnet;
    let (body, width) = match config.arch {
        ClassifierArch::Resnet => {
            let mut groups = pn.groups();
            groups.push(GroupSpec {
                blocks: config.group4_blocks,
                channels: config.group4_channels,
                stride: 2,
            });
            let net = ResNet::new(store, pn.in_channels, pn.stem_channels, &groups, rng)?;
            let width = net.out_channels();
            (Body::Resnet(net), width)
        }
        ClassifierArch::Hybrid => {
            let patchnet = init_patch_network(pn, store, rng)?;
            let pool = init_attention_pool(&model.attention, patchnet.feature_dim(), model.grid()?, store, rng)?;
            (Body::Hybrid { patchnet, pool: Box::new(pool) }, model.attention.hidden)
        }
    };
    let head = Linear::new(store, "head", Role::Head, width, config.classes, (1.0 / width as f32).sqrt(), rng)?;
    Ok(Classifier {
        model: model.clone(),
        config: config.clone(),
        body,
        head,
    })
}

impl Classifier {
    /// `[B×H×W×C]` images to `[B×classes]` logits.
    pub fn forward(&self, f: &mut Forward, images: Tensor) -> Result<Var> {
        let s = images.shape().to_vec();
        let [h, w] = self.model.image_size;
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != self.model.patchnet.in_channels {
            return Err(Error::invalid(
                "classifier",
                format!("expected [B×{h}×{w}×{}] images, got {s:?}", self.model.patchnet.in_channels),
            ));
        }
        let features = match &self.body {
            Body::Resnet(net) => {
                let x = f.input(images);
                net.forward(f, x)?
            }
            Body::Hybrid { patchnet, pool } => {
                let ps = patchnet.config.patch_size;
                let mut data = Vec::with_capacity(images.len());
                let mut locs: Vec<Loc> = Vec::new();
                for b in 0..s[0] {
                    let grid = extract_patch_grid(&images.index_first(b)?, ps, b)?;
                    for p in &grid.patches {
                        data.extend_from_slice(p.data());
                    }
                    locs.extend_from_slice(&grid.locations);
                }
                let n = locs.len() / s[0];
                let x = f.input(Tensor::new(vec![s[0] * n, ps, ps, s[3]], data)?);
                let h = patchnet.encode_flat(f, x)?;
                let h = f.tape.reshape(h, &[s[0], n, patchnet.feature_dim()])?;
                pool.summarize(f, h, &locs)?
            }
        };
        self.head.forward(f, features)
    }

    pub fn hybrid(&self) -> bool {
        matches!(self.body, Body::Hybrid { .. })
    }
}

/// Roles copied from a pretraining checkpoint.
pub fn transferred_roles(hybrid: bool) -> Vec<Role> {
    let mut roles = vec![Role::Group(1), Role::Group(2), Role::Group(3)];
    if hybrid {
        roles.extend([Role::Post, Role::Pool, Role::Embedding]);
    }
    roles
}

/// Copy groups 1–3 (and, for `hybrid`, the post-norm, pooling and
/// embedding tensors) from `pretrained` into `target` by name. Returns the
/// copied names.
pub fn transfer_weights(pretrained: &Checkpoint, target: &mut ParamStore, hybrid: bool) -> Result<Vec<String>> {
    let roles = transferred_roles(hybrid);
    let mut copied = Vec::new();
    for id in target.ids().collect::<Vec<_>>() {
        let p = target.get_mut(id);
        if !roles.contains(&p.role) {
            continue;
        }
        let src = pretrained.params.by_name(&p.name).ok_or_else(|| Error::Param {
            name: p.name.clone(),
            msg: "missing from the pretrained checkpoint".into(),
        })?;
        if src.tensor.shape() != p.tensor.shape() {
            return Err(Error::Param {
                name: p.name.clone(),
                msg: format!(
                    "shape {:?} in the checkpoint, {:?} in the classifier",
                    src.tensor.shape(),
                    p.tensor.shape()
                ),
            });
        }
        p.tensor = src.tensor.clone();
        copied.push(p.name.clone());
    }
    Ok(copied)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub pad: usize,
    pub optimizer: OptimizerConfig,
    pub classifier: ClassifierConfig,
    /// Evaluate on the held-out split every this many steps; 0 means once
    /// per pass over the training set.
    pub eval_every: u64,
    pub eval_batch: usize,
    pub log_every: u64,
}

impl FinetuneConfig {
    pub fn desk(classes: usize) -> Self {
        Self {
            batch_size: 64,
            steps: 3000,
            pad: 4,
            optimizer: OptimizerConfig::default(),
            classifier: ClassifierConfig::desk(classes),
            eval_every: 0,
            eval_batch: 250,
            log_every: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f32,
    pub accuracy: f64,
}

/// Fraction of rows whose argmax (lowest index on ties) is the target.
fn accuracy(logits: &[f32], k: usize, targets: &[usize]) -> f64 {
    let hits = logits
        .chunks_exact(k)
        .zip(targets)
        .filter(|(row, &y)| {
            let best = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            best == y
        })
        .count();
    hits as f64 / targets.len() as f64
}

/// Mean loss and accuracy over `ds` in eval mode.
pub fn evaluate_classifier(clf: &Classifier, store: &ParamStore, ds: &Dataset, batch: usize) -> Result<EvalMetrics> {
    let labels = ds.labels()?;
    let mut scratch = store.clone();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for start in (0..ds.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(ds.len())).collect();
        let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut f = Forward::new(&mut scratch, Mode::Eval, Streams::new(0).stream(Site::Eval, 0));
        let logits = clf.forward(&mut f, Tensor::stack(&ds.images_at(&idx))?)?;
        let loss = f.tape.softmax_cross_entropy(logits, &targets)?;
        loss_sum += f.tape.data(loss)[0] as f64 * idx.len() as f64;
        correct += (accuracy(f.tape.data(logits), clf.config.classes, &targets) * idx.len() as f64).round() as usize;
    }
    Ok(EvalMetrics {
        loss: (loss_sum / ds.len() as f64) as f32,
        accuracy: correct as f64 / ds.len() as f64,
    })
}

/// Fill untracked batch-norm statistics by running train-mode forwards over
/// `ds` without updating any weights.
pub fn calibrate_batch_norm(clf: &Classifier, store: &mut ParamStore, ds: &Dataset, batch: usize) -> Result<()> {
    for start in (0..ds.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(ds.len())).collect();
        let mut f = Forward::new(store, Mode::Train, Streams::new(0).stream(Site::Eval, 1));
        clf.forward(&mut f, Tensor::stack(&ds.images_at(&idx))?)?;
    }
    Ok(())
}

pub fn needs_calibration(store: &ParamStore) -> bool {
    store
        .iter()
        .any(|(_, p)| p.name.ends_with(".tracked") && p.tensor.data()[0] == 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierMeta {
    pub kind: String,
    pub model: ModelConfig,
    pub classifier: ClassifierConfig,
}

pub const CLASSIFIER_KIND: &str = "classifier";

impl ClassifierMeta {
    pub fn parse(text: &str) -> Result<Self> {
        let meta: Self = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.kind != CLASSIFIER_KIND {
            return Err(Error::Checkpoint(format!("expected a classifier checkpoint, found `{}`", meta.kind)));
        }
        Ok(meta)
    }
}

pub struct FinetuneRun {
    pub rows: Vec<MetricsRow>,
    pub initial_loss: f32,
    pub test: EvalMetrics,
    pub train: EvalMetrics,
    pub param_count: usize,
    pub transferred: Vec<String>,
    pub checkpoint: Checkpoint,
}

fn check_labels(ds: &Dataset, classes: usize) -> Result<()> {
    if let Some(&bad) = ds.labels()?.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(
            "run_finetune",
            format!("{} split has label {bad}, the classifier has {classes} classes", ds.split.name()),
        ));
    }
    Ok(())
}

/// Supervised training with pad-crop augmentation and the pretraining
/// optimizer family. `init` selects transferred weights; data order and
/// fresh initializations depend only on `seed`.
pub fn run_finetune(
    train: &Dataset,
    test: &Dataset,
    init: Option<&Checkpoint>,
    model: &ModelConfig,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneRun> {
    let classes = cfg.classifier.classes;
    check_labels(train, classes)?;
    check_labels(test, classes)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let streams = Streams::new(seed);
    let mut store = ParamStore::new();
    let clf = init_classifier(model, &cfg.classifier, &mut store, &mut streams.stream(Site::Init, 1))?;
    let transferred = match init {
        Some(ckpt) => transfer_weights(ckpt, &mut store, clf.hybrid())?,
        None => Vec::new(),
    };
    let mut opt = OptimizerState::new(&store);
    let per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let eval_every = if cfg.eval_every == 0 { per_epoch } else { cfg.eval_every };
    let labels = train.labels()?;

    let mut rows = Vec::new();
    let mut initial_loss = f32::NAN;
    for t in 0..cfg.steps {
        let lr = cosine_lr(t, cfg.optimizer.lr_max, cfg.optimizer.warmup, cfg.steps)?;
        let idx = batch_indices(&streams, t, cfg.batch_size, train.len());
        let mut crop = streams.stream(Site::Crop, t);
        let images = idx
            .iter()
            .map(|&i| augment_pad_crop(&train.image(i), cfg.pad, &mut crop))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

        let mut f = Forward::new(&mut store, Mode::Train, streams.stream(Site::Dropout, t));
        let logits = match clf.forward(&mut f, Tensor::stack(&images)?) {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => return Err(diverged(t, &f.tape, &format!("non-finite output of {op}"))),
            Err(e) => return Err(e),
        };
        let loss = f.tape.softmax_cross_entropy(logits, &targets)?;
        let loss_value = f.tape.data(loss)[0];
        let batch_accuracy = accuracy(f.tape.data(logits), classes, &targets);
        if t == 0 {
            initial_loss = loss_value;
        }
        let grads = f.backward(loss)?;
        if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
            return Err(diverged(t, &f.tape, "non-finite gradient"));
        }
        nesterov_step(&mut store, &grads, &mut opt, &cfg.optimizer, lr as f32)?;

        let done = t + 1;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.steps) {
            rows.push(MetricsRow {
                step: done,
                split: "train".into(),
                loss: loss_value,
                accuracy: batch_accuracy,
                lr,
                seed,
            });
        }
        if done % eval_every == 0 && done < cfg.steps {
            let m = evaluate_classifier(&clf, &store, test, cfg.eval_batch)?;
            rows.push(MetricsRow {
                step: done,
                split: "test".into(),
                loss: m.loss,
                accuracy: m.accuracy,
                lr,
                seed,
            });
        }
    }

    if needs_calibration(&store) {
        calibrate_batch_norm(&clf, &mut store, train, cfg.eval_batch)?;
    }
    let test_metrics = evaluate_classifier(&clf, &store, test, cfg.eval_batch)?;
    let train_metrics = evaluate_classifier(&clf, &store, train, cfg.eval_batch)?;
    rows.push(MetricsRow {
        step: cfg.steps,
        split: "test".into(),
        loss: test_metrics.loss,
        accuracy: test_metrics.accuracy,
        lr: 0.0,
        seed,
    });
    let meta = ClassifierMeta {
        kind: CLASSIFIER_KIND.into(),
        model: model.clone(),
        classifier: cfg.classifier.clone(),
    };
    let param_count = store.trainable_count();
    let checkpoint = Checkpoint::new(
        cfg.steps,
        seed,
        model.digest(),
        toml::to_string(&meta).expect("metadata serializes"),
        store,
    )
    .with_optimizer(&opt)?;
    Ok(FinetuneRun {
        rows,
        initial_loss,
        test: test_metrics,
        train: train_metrics,
        param_count,
        transferred,
        checkpoint,
    })
}
