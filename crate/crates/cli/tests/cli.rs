use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
ps = 4
pad = 0
stem_channels = 4
block_counts = [1, 1, 1]
group_channels = [4, 4, 8]
group4_channels = 8
group4_blocks = 1
attention_blocks = 1
hidden = 16
intermediate = 8
heads = 2
batch_size = 8
pretrain_steps = 6
finetune_steps = 4
warmup = 1
checkpoint_every = 3
log_every = 2
synthetic_images = 32
synthetic_test_images = 40
synthetic_size = 16
synthetic_cell = 4
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// The tiny config with some `key = value` lines replaced or added.
    fn new(overrides: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), with_overrides(overrides)).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_selfie"))
            .current_dir(self.dir.path())
            .env_remove("SELFIE_SEED")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "selfie {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn with_overrides(overrides: &str) -> String {
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let replaced: Vec<String> = overrides.lines().map(key).collect();
    let mut text: String = TINY
        .lines()
        .filter(|l| !replaced.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(overrides);
    text
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn column(csv: &[u8], name: &str) -> Vec<f64> {
    let text = String::from_utf8(csv.to_vec()).unwrap();
    let mut lines = text.lines();
    let at = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(at).unwrap().parse().unwrap()).collect()
}

#[test]
fn finetune_csv_is_byte_identical_across_runs_and_modes() {
    let ws = Workspace::new("");
    let seeds = ["--seeds", "1,2,3"];
    ws.ok(&["finetune", "--config", "tiny.toml", seeds[0], seeds[1], "--out", "a"]);
    ws.ok(&["finetune", "--config", "tiny.toml", seeds[0], seeds[1], "--out", "b"]);
    ws.ok(&["finetune", "--config", "tiny.toml", seeds[0], seeds[1], "--out", "c", "--parallel"]);
    for file in ["results.csv", "summary.csv"] {
        let a = read(&ws.path(&format!("a/{file}")));
        assert_eq!(a, read(&ws.path(&format!("b/{file}"))), "{file} differs between runs");
        assert_eq!(a, read(&ws.path(&format!("c/{file}"))), "{file} differs with --parallel");
    }
    assert!(!ws.path("a/results.csv.partial").exists());
}

#[test]
fn summary_is_mean_and_population_std_over_seeds() {
    let ws = Workspace::new("");
    ws.ok(&["finetune", "--config", "tiny.toml", "--seeds", "0,1,2,3,4", "--steps", "6", "--out", "ft"]);
    let acc = column(&read(&ws.path("ft/results.csv")), "test_accuracy");
    assert_eq!(acc.len(), 5);
    let summary = read(&ws.path("ft/summary.csv"));
    assert!(String::from_utf8_lossy(&summary).starts_with("dataset,fraction,init,lr_max,runs,mean,std\n"));
    let mean = acc.iter().sum::<f64>() / 5.0;
    let std = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    assert!((column(&summary, "mean")[0] - mean).abs() < 1e-12);
    assert!((column(&summary, "std")[0] - std).abs() < 1e-12);
    assert_eq!(column(&summary, "runs"), [5.0]);
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let ws = Workspace::new("p = 0.5\nfraction = 0.5\n");
    ws.ok(&["evaluate", "--config", "tiny.toml", "--p", "0.25", "--out", "ev"]);
    let resolved = fs::read_to_string(ws.path("ev/config.toml")).unwrap();
    assert!(resolved.contains("p = 0.25"), "{resolved}");
    assert!(resolved.contains("fraction = 0.5"), "{resolved}");
    assert!(resolved.contains("heads = 2"), "{resolved}");
    assert!(resolved.contains("momentum = 0.9"), "{resolved}");
}

#[test]
fn seed_environment_variable_is_the_default_seed() {
    let ws = Workspace::new("");
    let run = |extra: &str, env: bool| {
        let dir = format!("out{}", extra.len() + env as usize);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_selfie"));
        cmd.current_dir(ws.dir.path()).args(["evaluate", "--config", "tiny.toml", "--out", &dir]);
        if !extra.is_empty() {
            cmd.args(["--seeds", extra]);
        }
        if env {
            cmd.env("SELFIE_SEED", "7");
        } else {
            cmd.env_remove("SELFIE_SEED");
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(ws.dir.path().join(dir).join("config.toml")).unwrap()
    };
    assert!(run("", false).contains("seeds = [0]"));
    assert!(run("", true).contains("seeds = [7]"));
    assert!(run("3", true).contains("seeds = [3]"));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let ws = Workspace::new("");
    let out = ws.run(&["pretrain", "--config", "missing.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));

    fs::write(ws.path("bad.toml"), "bogus_key = 1\n").unwrap();
    let out = ws.run(&["finetune", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    let out = ws.run(&["finetune", "--config", "tiny.toml", "--init", "nowhere.slfe", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.slfe"));
    assert!(!ws.path("x/results.csv").exists());
}

#[test]
fn pretrain_resume_transfer_render_and_report() {
    let ws = Workspace::new("");
    ws.ok(&["pretrain", "--config", "tiny.toml", "--out", "pre"]);
    let full = read(&ws.path("pre/pretrain.slfe"));
    let metrics = read(&ws.path("pre/metrics.csv"));
    ws.ok(&["pretrain", "--config", "tiny.toml", "--out", "pre", "--resume", "pre/step-3.slfe"]);
    assert_eq!(read(&ws.path("pre/pretrain.slfe")), full, "resumed checkpoint differs");
    assert_eq!(read(&ws.path("pre/metrics.csv")), metrics, "resumed metrics differ");

    ws.ok(&["finetune", "--config", "tiny.toml", "--init", "pre/pretrain.slfe", "--out", "ft"]);
    ws.ok(&["finetune", "--config", "tiny.toml", "--out", "sup"]);
    let stdout = ws.ok(&["evaluate", "--config", "tiny.toml", "--init", "ft/classifier-pretrained-lr0.05-seed0.slfe", "--out", "ev"]);
    assert!(stdout.contains("test accuracy"), "{stdout}");
    let (finetuned, evaluated) = (
        column(&read(&ws.path("ft/results.csv")), "test_accuracy"),
        column(&read(&ws.path("ev/evaluation.csv")), "test_accuracy"),
    );
    assert_eq!(finetuned, evaluated);

    let stdout = ws.ok(&["render", "--config", "tiny.toml", "--init", "pre/pretrain.slfe", "--count", "3", "--out", "r"]);
    assert!(stdout.contains("3 images"), "{stdout}");
    for k in 0..3 {
        let ppm = read(&ws.path(&format!("r/render/step-6-000{k}.ppm")));
        assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(ppm.len(), 13 + 16 * 16 * 3);
    }
    let table = ws.ok(&["report", "ft/results.csv", "sup/results.csv"]);
    assert!(table.lines().next().unwrap().starts_with("dataset"), "{table}");
    assert!(table.contains(" ± "), "{table}");
    let out = ws.run(&["report", "ft/results.csv"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains('—'));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: no supervised runs"));
}

#[test]
fn render_rejects_images_of_the_wrong_size() {
    let ws = Workspace::new("");
    ws.ok(&["pretrain", "--config", "tiny.toml", "--out", "pre"]);
    fs::write(ws.path("small.toml"), with_overrides("synthetic_size = 8\n")).unwrap();
    let out = ws.run(&["render", "--config", "small.toml", "--init", "pre/pretrain.slfe", "--out", "r"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("16×16"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn untrained_evaluation_is_at_chance() {
    let ws = Workspace::new("synthetic_classes = 10\nsynthetic_test_images = 1000\nsynthetic_size = 32\nsynthetic_cell = 8\nps = 8\n");
    let mut hits = 0.0;
    let seeds = 4;
    for seed in 0..seeds {
        let dir = format!("ev{seed}");
        ws.ok(&["evaluate", "--config", "tiny.toml", "--seeds", &seed.to_string(), "--out", &dir]);
        hits += column(&read(&ws.path(&format!("{dir}/evaluation.csv"))), "test_accuracy")[0];
    }
    let acc = hits / seeds as f64;
    // Labels are balanced, so even a constant prediction scores 0.1.
    let band = 3.0 * (0.1f64 * 0.9 / 1000.0).sqrt();
    assert!((acc - 0.1).abs() <= band, "mean accuracy {acc}");
}
