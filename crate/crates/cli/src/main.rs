use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use selfie::config::ExperimentConfig;
use selfie::data::Dataset;
use selfie::model::{init_pretrain_model, ModelConfig, PretrainModel};
use selfie::params::ParamStore;
use selfie::report::{read_results, render_jigsaw, report_table, summarize, write_results, write_summary, ResultRow};
use selfie::rng::{Site, Streams};
use selfie::train::checkpoint::{load_checkpoint, partial_path, save_checkpoint, Checkpoint};
use selfie::train::finetune::{
    calibrate_batch_norm, evaluate_classifier, init_classifier, needs_calibration, run_finetune, transfer_weights,
    Classifier, ClassifierMeta,
};
use selfie::train::pretrain::{copy_all, run_pretrain, PretrainMeta, FINAL_CHECKPOINT, METRICS_FILE};
use selfie::train::{read_metrics, MetricsLog};

/// Masked-patch pretraining, finetuning and reporting.
#[derive(Parser)]
#[command(name = "selfie", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on the (unlabeled) training split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train classifiers for every learning rate and seed.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "random")]
        init: String,
        /// Run each seed in its own process.
        #[arg(long)]
        parallel: bool,
    },
    /// Score a classifier, pretrained or fresh model on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "random")]
        init: String,
    },
    /// Draw jigsaw reconstructions of test images as PPM files.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "random")]
        init: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// File name prefix; defaults to the checkpoint step.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Tabulate one or more results files.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file of flat settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic`, a CIFAR-10 binary directory or a raw image file.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr_max: Option<f64>,
    /// Fraction of patches the encoder sees.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    ps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Steps {
    Pretrain,
    Finetune,
}

impl Common {
    /// Defaults, then `SELFIE_SEED`, then the file, then flags.
    fn resolve(&self, steps: Steps) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mut cfg = ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
                let table: toml::Table = text.parse()?;
                if !table.contains_key("seeds") {
                    cfg.seeds = env_seeds()?.unwrap_or(cfg.seeds);
                }
                cfg
            }
            None => {
                let mut cfg = ExperimentConfig::default();
                cfg.seeds = env_seeds()?.unwrap_or(cfg.seeds);
                cfg
            }
        };
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = self.fraction {
            cfg.fraction = v;
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.steps {
            match steps {
                Steps::Pretrain => cfg.pretrain_steps = v,
                Steps::Finetune => cfg.finetune_steps = v,
            }
        }
        if let Some(v) = self.lr_max {
            cfg.lr_max = v;
            cfg.lr_grid.clear();
        }
        if let Some(v) = self.p {
            cfg.p = v;
        }
        if let Some(v) = self.ps {
            cfg.ps = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.to_string_lossy().into_owned();
        }
        if cfg.seeds.is_empty() {
            bail!("no seeds given");
        }
        if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
            bail!("fraction must be in (0, 1], got {}", cfg.fraction);
        }
        Ok(cfg)
    }
}

fn env_seeds() -> Result<Option<Vec<u64>>> {
    match std::env::var("SELFIE_SEED") {
        Ok(s) => Ok(Some(vec![s.trim().parse().with_context(|| format!("SELFIE_SEED={s}"))?])),
        Err(_) => Ok(None),
    }
}

enum Init {
    Random,
    Checkpoint(PathBuf),
}

impl Init {
    fn parse(s: &str) -> Self {
        if s == "random" {
            Init::Random
        } else {
            Init::Checkpoint(PathBuf::from(s))
        }
    }
}

/// Write through a `.partial` file so an interrupted run never leaves a
/// file that looks complete.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> selfie::Result<()>) -> Result<()> {
    let tmp = partial_path(path);
    write(&tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))?;
    Ok(())
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = PathBuf::from(&cfg.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), toml::to_string(cfg)?)?;
    Ok(out)
}

fn model_for(cfg: &ExperimentConfig, ds: &Dataset) -> ModelConfig {
    let (h, w, c) = ds.image_shape();
    cfg.model([h, w], c)
}

fn subset(train: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    if cfg.fraction < 1.0 {
        Ok(selfie::data::subset_split(train, cfg.fraction, seed)?)
    } else {
        Ok(train.clone())
    }
}

fn pretrain(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = common.resolve(Steps::Pretrain)?;
    let root = prepare_out(&cfg)?;
    let (train, _) = cfg.load_datasets()?;
    let model = model_for(&cfg, &train);
    let resume = resume
        .map(|p| load_checkpoint(p, Some(&model.digest())))
        .transpose()?;
    let seeds = match &resume {
        Some(ckpt) => vec![ckpt.seed],
        None => cfg.seeds.clone(),
    };
    for &seed in &seeds {
        let dir = if seeds.len() == 1 { root.clone() } else { root.join(format!("seed-{seed}")) };
        let metrics = dir.join(METRICS_FILE);
        if let Some(ckpt) = &resume {
            trim_metrics(&metrics, ckpt.step)?;
        }
        match run_pretrain(&train, &model, &cfg.pretrain(), seed, resume.as_ref(), Some(&dir)) {
            Ok(run) => {
                let last = run.metrics.last();
                println!(
                    "seed {seed}: {} steps, loss {}, pretext accuracy {} -> {}",
                    run.checkpoint.step,
                    last.map_or("-".into(), |r| format!("{:.4}", r.loss)),
                    last.map_or("-".into(), |r| format!("{:.3}", r.accuracy)),
                    dir.join(FINAL_CHECKPOINT).display()
                );
            }
            Err(e) => {
                if metrics.exists() {
                    fs::rename(&metrics, partial_path(&metrics))?;
                }
                return Err(e.into());
            }
        }
    }
    Ok(())
}

/// Keep only the rows a resumed run will not write again.
fn trim_metrics(path: &Path, step: u64) -> Result<()> {
    let partial = partial_path(path);
    if !path.exists() && partial.exists() {
        fs::rename(&partial, path)?;
    }
    if !path.exists() {
        return Ok(());
    }
    let rows = read_metrics(path)?;
    let mut log = MetricsLog::open(path, false)?;
    for row in rows.iter().filter(|r| r.step <= step) {
        log.write(row)?;
    }
    Ok(())
}

fn pretrained_model(ckpt: &Checkpoint) -> Result<ModelConfig> {
    Ok(PretrainMeta::parse(&ckpt.meta)?.model)
}

fn check_image_size(model: &ModelConfig, ds: &Dataset) -> Result<()> {
    let (h, w, c) = ds.image_shape();
    if model.image_size != [h, w] || model.patchnet.in_channels != c {
        bail!(
            "checkpoint expects {}×{}×{} images, the dataset has {h}×{w}×{c}",
            model.image_size[0],
            model.image_size[1],
            model.patchnet.in_channels
        );
    }
    Ok(())
}

fn finetune(common: &Common, init: &str, parallel: bool) -> Result<()> {
    let cfg = common.resolve(Steps::Finetune)?;
    let out = prepare_out(&cfg)?;
    let mut rows = if parallel && cfg.seeds.len() > 1 {
        finetune_parallel(&cfg, &out, init)?
    } else {
        finetune_seeds(&cfg, &out, &Init::parse(init))?
    };
    let lrs = cfg.lr_values();
    let position = |r: &ResultRow| {
        (
            lrs.iter().position(|&l| l == r.lr_max),
            cfg.seeds.iter().position(|&s| s == r.seed),
        )
    };
    rows.sort_by_key(position);
    write_atomic(&out.join("results.csv"), |p| write_results(p, &rows))?;
    let summary = summarize(&rows);
    write_atomic(&out.join("summary.csv"), |p| write_summary(p, &summary))?;
    for s in &summary {
        println!(
            "{} fraction {} {} lr {}: {:.2} ± {:.2} % over {} seeds",
            s.dataset,
            s.fraction,
            s.init,
            s.lr_max,
            100.0 * s.mean,
            100.0 * s.std,
            s.runs
        );
    }
    Ok(())
}

fn finetune_seeds(cfg: &ExperimentConfig, out: &Path, init: &Init) -> Result<Vec<ResultRow>> {
    let (train, test) = cfg.load_datasets()?;
    let (pretrained, model, label) = match init {
        Init::Random => (None, model_for(cfg, &train), "random"),
        Init::Checkpoint(path) => {
            let ckpt = load_checkpoint(path, None)?;
            let model = pretrained_model(&ckpt).with_context(|| format!("in {}", path.display()))?;
            check_image_size(&model, &train)?;
            (Some(ckpt), model, "pretrained")
        }
    };
    let mut rows = Vec::new();
    for lr in cfg.lr_values() {
        for &seed in &cfg.seeds {
            let data = subset(&train, cfg, seed)?;
            let ft = cfg.finetune(train.class_count, lr);
            let run = run_finetune(&data, &test, pretrained.as_ref(), &model, &ft, seed)?;
            let stem = format!("{label}-lr{lr}-seed{seed}");
            let metrics = out.join(format!("metrics-{stem}.csv"));
            write_atomic(&metrics, |p| {
                let mut log = MetricsLog::open(p, false)?;
                run.rows.iter().try_for_each(|r| log.write(r))
            })?;
            save_checkpoint(&out.join(format!("classifier-{stem}.slfe")), &run.checkpoint)?;
            eprintln!(
                "{label} lr {lr} seed {seed}: test accuracy {:.4} ({} parameters, {} transferred tensors)",
                run.test.accuracy,
                run.param_count,
                run.transferred.len()
            );
            rows.push(ResultRow {
                dataset: cfg.dataset_name(),
                fraction: cfg.fraction,
                init: label.into(),
                lr_max: lr,
                seed,
                test_accuracy: run.test.accuracy,
                test_loss: run.test.loss,
                train_accuracy: run.train.accuracy,
            });
        }
    }
    Ok(rows)
}

/// One child process per seed, each with its fully resolved config, so
/// the processes share nothing but the input files.
fn finetune_parallel(cfg: &ExperimentConfig, out: &Path, init: &str) -> Result<Vec<ResultRow>> {
    let exe = std::env::current_exe()?;
    let mut children = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let child_cfg = ExperimentConfig {
            seeds: vec![seed],
            out: dir.to_string_lossy().into_owned(),
            ..cfg.clone()
        };
        let config = dir.join("config.toml");
        fs::write(&config, toml::to_string(&child_cfg)?)?;
        let child = Process::new(&exe)
            .args(["finetune", "--init", init, "--config"])
            .arg(&config)
            .spawn()
            .context("starting a seed process")?;
        children.push((seed, dir, child));
    }
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (seed, dir, mut child) in children {
        if child.wait()?.success() {
            rows.extend(read_results(&dir.join("results.csv"))?);
        } else {
            failed.push(seed);
        }
    }
    if !failed.is_empty() {
        bail!("finetuning failed for seeds {failed:?}");
    }
    Ok(rows)
}

fn evaluate(common: &Common, init: &str) -> Result<()> {
    let cfg = common.resolve(Steps::Finetune)?;
    let out = prepare_out(&cfg)?;
    let (train, test) = cfg.load_datasets()?;
    let seed = cfg.seeds[0];
    let mut store = ParamStore::new();
    let (clf, label): (Classifier, &str) = match Init::parse(init) {
        Init::Random => {
            let ft = cfg.finetune(train.class_count, cfg.lr_max);
            let clf = init_classifier(&model_for(&cfg, &train), &ft.classifier, &mut store, &mut init_rng(seed))?;
            (clf, "random")
        }
        Init::Checkpoint(path) => {
            let ckpt = load_checkpoint(&path, None)?;
            match ClassifierMeta::parse(&ckpt.meta) {
                Ok(meta) => {
                    let clf = init_classifier(&meta.model, &meta.classifier, &mut store, &mut init_rng(ckpt.seed))?;
                    copy_all(&ckpt.params, &mut store)?;
                    (clf, "classifier")
                }
                Err(_) => {
                    let model = pretrained_model(&ckpt).with_context(|| format!("in {}", path.display()))?;
                    let ft = cfg.finetune(train.class_count, cfg.lr_max);
                    let clf = init_classifier(&model, &ft.classifier, &mut store, &mut init_rng(seed))?;
                    transfer_weights(&ckpt, &mut store, clf.hybrid())?;
                    (clf, "pretrained")
                }
            }
        }
    };
    check_image_size(&clf.model, &test)?;
    let batch = cfg.finetune(train.class_count, cfg.lr_max).eval_batch;
    if needs_calibration(&store) {
        calibrate_batch_norm(&clf, &mut store, &train, batch)?;
    }
    let test_metrics = evaluate_classifier(&clf, &store, &test, batch)?;
    let train_metrics = evaluate_classifier(&clf, &store, &train, batch)?;
    let row = ResultRow {
        dataset: cfg.dataset_name(),
        fraction: cfg.fraction,
        init: label.into(),
        lr_max: cfg.lr_max,
        seed,
        test_accuracy: test_metrics.accuracy,
        test_loss: test_metrics.loss,
        train_accuracy: train_metrics.accuracy,
    };
    write_atomic(&out.join("evaluation.csv"), |p| write_results(p, &[row]))?;
    println!(
        "{label}: test accuracy {:.4}, loss {:.4} over {} images",
        test_metrics.accuracy,
        test_metrics.loss,
        test.len()
    );
    Ok(())
}

fn init_rng(seed: u64) -> selfie::rng::StreamRng {
    Streams::new(seed).stream(Site::Init, 1)
}

fn render(common: &Common, init: &str, count: usize, tag: Option<String>) -> Result<()> {
    let cfg = common.resolve(Steps::Pretrain)?;
    let out = prepare_out(&cfg)?;
    let (_, test) = cfg.load_datasets()?;
    let seed = cfg.seeds[0];
    let mut store = ParamStore::new();
    let (model, default_tag): (PretrainModel, String) = match Init::parse(init) {
        Init::Random => {
            let model = init_pretrain_model(&model_for(&cfg, &test), &mut store, &mut Streams::new(seed).stream(Site::Init, 0))?;
            (model, "random".into())
        }
        Init::Checkpoint(path) => {
            let ckpt = load_checkpoint(&path, None)?;
            let config = pretrained_model(&ckpt).with_context(|| format!("in {}", path.display()))?;
            let model = init_pretrain_model(&config, &mut store, &mut Streams::new(ckpt.seed).stream(Site::Init, 0))?;
            copy_all(&ckpt.params, &mut store)?;
            (model, format!("step-{}", ckpt.step))
        }
    };
    let images = test.images_at(&(0..count.min(test.len())).collect::<Vec<_>>());
    let tag = tag.unwrap_or(default_tag);
    let drawn = render_jigsaw(&model, &store, &images, cfg.p, seed, &out.join("render"), &tag)?;
    let white: usize = drawn.iter().map(|(_, c)| c.white).sum();
    let red: usize = drawn.iter().map(|(_, c)| c.red).sum();
    println!(
        "{} images in {}: {white} correct (white) and {red} wrong (red) placements",
        drawn.len(),
        out.join("render").display()
    );
    Ok(())
}

fn report(files: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_results(f)?);
    }
    let table = report_table(&rows);
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", table.text);
    if let Some(path) = out {
        fs::write(path, &table.text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { common, resume } => pretrain(&common, resume.as_deref()),
        Command::Finetune { common, init, parallel } => finetune(&common, &init, parallel),
        Command::Evaluate { common, init } => evaluate(&common, &init),
        Command::Render {
            common,
            init,
            count,
            tag,
        } => render(&common, &init, count, tag),
        Command::Report { results, out } => report(&results, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
