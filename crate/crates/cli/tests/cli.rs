use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
threads = 1

[model]
image_size = 16
patch_size = 4
channels = 1
depth = 1
heads = 2
dim = 16
mlp_ratio = 2
num_classes = 3

[data]
train_per_class = 6
val_per_class = 3

[train]
pretrain_epochs = 2
finetune_epochs = 1
batch_size = 8

[label]
keep_ratio = 0.5

[filter]
max_epochs = 3

[eval]
batch_size = 8
warmup = 1
repeats = 2
"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("tiny.toml"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn dlvit(&self, args: &[&str]) -> Output {
        let cfg = self.root.join("tiny.toml");
        let out = self.out();
        Command::new(env!("CARGO_BIN_EXE_dlvit"))
            .args(["--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
            .args(args)
            .env_remove("DLVIT_THREADS")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.dlvit(args);
        assert!(
            o.status.success(),
            "dlvit {args:?} failed:\n{}",
            String::from_utf8_lossy(&o.stderr)
        );
        o
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.out().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    fn path(&self, name: &str) -> String {
        self.out().join(name).to_string_lossy().into_owned()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn eval_row(text: &str) -> Vec<(String, String)> {
    let mut lines = text.lines();
    let head: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let row: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    head.into_iter().zip(row).collect()
}

fn field(row: &[(String, String)], key: &str) -> f64 {
    row.iter().find(|(k, _)| k == key).unwrap().1.parse().unwrap()
}

fn grid_cells(text: &str) -> Vec<Vec<Option<f64>>> {
    text.lines()
        .map(|l| l.split(',').map(|c| (!c.is_empty()).then(|| c.parse().unwrap())).collect())
        .collect()
}

#[test]
fn pipeline_runs_end_to_end_and_resumes() {
    let r = Run::new();
    r.ok(&["pipeline"]);
    for f in [
        "data/train.csv",
        "data/val.csv",
        "backbone.ckpt",
        "pretrain_log.csv",
        "dl_records.csv",
        "labels.csv",
        "label_summary.json",
        "filter.ckpt",
        "model.ckpt",
        "finetune_log.csv",
        "eval.csv",
        "eval.txt",
        "dl_hist.csv",
        "dl_patch_grid.csv",
        "mask_avg_grid.csv",
        "run_header_pipeline.json",
    ] {
        assert!(r.out().join(f).is_file(), "missing {f}");
    }
    let row = eval_row(&r.read("eval.csv"));
    let top1 = field(&row, "top1");
    let kept = field(&row, "kept_ratio");
    assert!((0.0..=1.0).contains(&top1));
    assert!(kept > 0.0 && kept <= 1.0);
    assert!(field(&row, "macs_filtered") <= field(&row, "macs_full"));

    let grid = grid_cells(&r.read("mask_avg_grid.csv"));
    assert_eq!(grid.len(), 4);
    for row in &grid {
        assert_eq!(row.len(), 4);
        for v in row.iter().flatten() {
            assert!((0.0..=1.0).contains(v));
        }
    }
    let dl_grid = grid_cells(&r.read("dl_patch_grid.csv"));
    assert_eq!(dl_grid.len(), 4);
    assert!(dl_grid.iter().flatten().all(|c| c.is_some()));

    let hist = r.read("dl_hist.csv");
    let total: u64 = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 18 * 16);

    let header = r.read("run_header_pipeline.json");
    assert!(header.contains("\"seed\": 3"));
    assert!(header.contains("\"dl_sign\": \"importance\""));

    let model_before = fs::read(r.out().join("model.ckpt")).unwrap();
    let again = r.ok(&["pipeline"]);
    let log = stderr(&again);
    for stage in ["data", "pretrain", "score-dl", "label", "train-filter", "finetune", "eval", "stats"] {
        assert!(log.contains(&format!("stage {stage}: up to date")), "{stage} reran:\n{log}");
    }
    assert_eq!(fs::read(r.out().join("model.ckpt")).unwrap(), model_before);

    let changed = r.ok(&["pipeline", "--finetune-epochs", "2"]);
    let log = stderr(&changed);
    assert!(log.contains("stage pretrain: up to date"));
    assert!(log.contains("stage finetune: running"));
    assert!(log.contains("stage eval: running"));
}

#[test]
fn all_keep_pipeline_skips_the_filter() {
    let r = Run::new();
    r.ok(&["pipeline", "--filter", "all-keep"]);
    assert!(!r.out().join("filter.ckpt").exists());
    let row = eval_row(&r.read("eval.csv"));
    assert_eq!(field(&row, "kept_ratio"), 1.0);
    assert_eq!(field(&row, "macs_filtered"), field(&row, "macs_full"));
}

#[test]
fn held_threshold_is_saved_with_the_model() {
    let r = Run::new();
    r.ok(&["pipeline", "--no-filter-grad", "--hold-keep", "0.5", "--balance-labels"]);
    let train = r.path("data/train.csv");
    r.ok(&["eval", "--checkpoint", &r.path("model.ckpt"), "--data", &train]);
    let row = eval_row(&r.read("eval.csv"));
    let kept = field(&row, "kept_ratio");
    assert!((kept - 0.5).abs() <= 18.0 / 288.0, "{kept}");
}

#[test]
fn stages_chain_by_hand() {
    let r = Run::new();
    r.ok(&["gen-data"]);
    let (train, val) = (r.path("data/train.csv"), r.path("data/val.csv"));
    r.ok(&["pretrain", "--data", &train]);
    let backbone = r.path("backbone.ckpt");
    r.ok(&["score-dl", "--checkpoint", &backbone, "--data", &train]);
    let label = r.ok(&["label", "--records", &r.path("dl_records.csv")]);
    assert!(String::from_utf8_lossy(&label.stdout).contains("keep fraction"));
    r.ok(&[
        "train-filter",
        "--checkpoint",
        &backbone,
        "--data",
        &train,
        "--labels",
        &r.path("labels.csv"),
    ]);
    r.ok(&["finetune", "--checkpoint", &r.path("filter.ckpt"), "--data", &train]);
    let model = r.path("model.ckpt");
    r.ok(&["eval", "--checkpoint", &model, "--data", &val]);
    assert!(r.read("eval.txt").contains("top-1"));

    let infer = r.ok(&["infer", "--checkpoint", &model, "--image", &r.path("data/val/000000.dlim")]);
    let text = String::from_utf8_lossy(&infer.stdout).into_owned();
    assert!(text.contains("prediction"));
    let kept = text.lines().find(|l| l.starts_with("kept ")).unwrap();
    assert!(kept.contains("/16"));

    r.ok(&["bench", "--checkpoint", &model, "--data", &val, "--filter", "random-discard"]);
    let bench = eval_row(&r.read("bench.csv"));
    assert!(field(&bench, "images_per_sec") > 0.0);
    assert!((field(&bench, "kept_ratio_mean") - 0.5).abs() < 1e-9);

    r.ok(&["stats", "--records", &r.path("dl_records.csv"), "--bins", "5"]);
    assert_eq!(r.read("dl_hist.csv").lines().count(), 1 + 5 + 2);
}

#[test]
fn flops_sweeps_keep_ratios() {
    let r = Run::new();
    let o = r.ok(&["flops", "--preset", "deit-small", "--ratios", "1,0.5"]);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let full = text.lines().find(|l| l.starts_with("1,")).unwrap();
    assert!(full.starts_with("1,197,"));
    let half = text.lines().find(|l| l.starts_with("0.5,")).unwrap();
    assert!(half.starts_with("0.5,99,"));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let r = Run::new();
    let bad = r.root.join("bad.toml");
    fs::write(&bad, "sede = 1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dlvit"))
        .args(["--config", bad.to_str().unwrap(), "flops"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = r.dlvit(&["pretrain", "--data", "/nonexistent/train.csv"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = r.dlvit(&["pipeline", "--keep-ratio", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = r.dlvit(&["pipeline", "--hold-keep", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    r.ok(&["gen-data"]);
    let o = r.dlvit(&["eval", "--checkpoint", &r.path("data/train.csv"), "--data", &r.path("data/val.csv")]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn training_divergence_exits_with_four() {
    let r = Run::new();
    r.ok(&["gen-data"]);
    let cfg = r.root.join("hot.toml");
    fs::write(&cfg, TINY.replace("batch_size = 8\n\n[label]", "batch_size = 8\nlr = 1e30\n\n[label]")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dlvit"))
        .args(["--config", cfg.to_str().unwrap(), "--out-dir", r.out().to_str().unwrap()])
        .args(["pretrain", "--data", &r.path("data/train.csv")])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}
