use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
[task]
image_size = 8
source_classes = 4
target_classes = 3
source_per_class = 8
target_per_class = 6
test_per_class = 4
noise = 0.1

[arch]
image_size = 8
conv1_channels = 2
conv2_channels = 3
feature_dim = 6
source_classes = 4
target_classes = 3

[data]
sampling_rate = 0.5

[pretrain]
iterations = 20
batch_size = 8

[train]
mode = "SMILE"
iterations = 12
batch_size = 8
eval_every = 4

[ablate]
modes = ["FT", "SMILE"]
seeds = [0, 1]

[diagnostics]
n_pairs = 10
trajectory_pairs = 3
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("smile.toml"), TINY).unwrap();
        Workspace { dir }
    }

    fn out(&self) -> std::path::PathBuf {
        self.dir.path().join("out")
    }

    fn smile(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_smile"))
            .arg("--config")
            .arg(self.dir.path().join("smile.toml"))
            .args(args)
            .env("SMILE_OUT_DIR", self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.smile(args);
        assert!(
            out.status.success(),
            "smile {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn prepared(self) -> Self {
        self.ok(&["gen-data"]);
        self.ok(&["pretrain"]);
        self
    }
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_data_is_reproducible_and_checksummed() {
    let a = Workspace::new();
    let b = Workspace::new();
    a.ok(&["gen-data"]);
    b.ok(&["gen-data"]);
    let manifest_a = read(&a.out().join("data/manifest.json"));
    assert_eq!(manifest_a, read(&b.out().join("data/manifest.json")));
    let manifest: Value = serde_json::from_slice(&manifest_a).unwrap();
    for name in ["source.bin", "target_train.bin", "target_test.bin"] {
        let bytes = read(&a.out().join("data").join(name));
        assert_eq!(manifest[name], smile_core::cli::checksum(&bytes), "{name}");
    }
}

#[test]
fn train_logs_components_and_default_weights() {
    let ws = Workspace::new().prepared();
    let stdout = ws.ok(&["train"]);
    assert!(stdout.contains("[SMILE] iter 12/12"), "{stdout}");

    let run = ws.out().join("runs/SMILE/seed-0");
    let csv = String::from_utf8(read(&run.join("metrics.csv"))).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..8], ["iteration", "mode", "lr", "task", "mxp", "fe", "fc", "total"]);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    for row in &rows {
        assert_eq!(row[1], "SMILE");
        assert_eq!(row[8].parse::<f64>().unwrap(), 0.01);
        assert_eq!(row[9].parse::<f64>().unwrap(), 0.1);
    }
    let evaluated: Vec<&str> = rows.iter().filter(|r| !r[10].is_empty()).map(|r| r[0]).collect();
    assert_eq!(evaluated, ["4", "8", "12"]);

    let summary: Value = serde_json::from_slice(&read(&run.join("summary.json"))).unwrap();
    assert_eq!(summary["iterations"], 12);
    assert!(run.join("model.ckpt").is_file());
}

#[test]
fn affine_stub_has_zero_interpolation_loss() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    ws.ok(&["diagnose", "--affine-stub"]);
    let report: Value = serde_json::from_slice(&read(&ws.out().join("il_report.json"))).unwrap();
    let entry = &report["entries"][0];
    assert_eq!(entry["model"], "affine-stub");
    for key in ["label_train", "label_test", "feature_train", "feature_test"] {
        let mean = entry[key]["mean"].as_f64().unwrap();
        assert!(mean <= 1e-6, "{key}: {mean}");
    }
    let traj = String::from_utf8(read(&ws.out().join("affine-stub/pca_traj.csv"))).unwrap();
    assert_eq!(traj.lines().count(), 1 + 3 * 5);
}

#[test]
fn pipeline_through_report() {
    let ws = Workspace::new().prepared();
    ws.ok(&["ablate"]);
    let summary = String::from_utf8(read(&ws.out().join("ablation_summary.csv"))).unwrap();
    assert_eq!(summary.lines().filter(|l| l.starts_with("cell,")).count(), 4);
    assert_eq!(summary.lines().filter(|l| l.starts_with("aggregate,")).count(), 2);

    ws.ok(&["diagnose"]);
    for run in ["FT/seed-0", "FT/seed-1", "SMILE/seed-0", "SMILE/seed-1"] {
        let traj = String::from_utf8(read(&ws.out().join("runs").join(run).join("pca_traj.csv"))).unwrap();
        assert_eq!(traj.lines().count(), 1 + 3 * 5, "{run}");
    }
    let md = ws.ok(&["report"]);
    assert!(md.contains("| SMILE | 2 |"), "{md}");
    let csv = String::from_utf8(read(&ws.out().join("report.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn missing_upstream_artifact_is_reported() {
    let ws = Workspace::new();
    let out = ws.smile(&["pretrain"]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_line(&out);
    assert_eq!(err["error"], "missing_artifact");
    assert!(err["message"].as_str().unwrap().contains("source.bin"));
}

#[test]
fn invalid_config_fails_before_writing_anything() {
    let ws = Workspace::new();
    let out = ws.smile(&["--set", "train.lr=-1", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("train.lr"), "{err}");
    assert!(!ws.out().exists());

    let out = ws.smile(&["--set", "arch.target_classes=7", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("arch.target_classes"));
}

#[test]
fn overrides_show_up_in_effective_config() {
    let ws = Workspace::new();
    let shown = ws.ok(&["--set", "train.gamma_fe=0.5", "--set", "seed=9", "show-config"]);
    let parsed: toml::Table = toml::from_str(&shown).unwrap();
    assert_eq!(parsed["train"]["gamma_fe"].as_float(), Some(0.5));
    assert_eq!(parsed["train"]["seed"].as_integer(), Some(9));
    assert_eq!(parsed["pretrain"]["seed"].as_integer(), Some(9));
}
