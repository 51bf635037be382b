//! The `smile` command: each subcommand runs one pipeline stage and writes
//! its artifacts under the configured output directory.
//!
//! ```text
//! <out>/data/{source,target_train,target_test}.bin   gen-data
//! <out>/data/manifest.json                           gen-data (checksums)
//! <out>/checkpoints/source.ckpt, pretrain_log.csv    pretrain
//! <out>/runs/<MODE>/seed-<s>/{model.ckpt,metrics.csv,summary.json}
//!                                                    train, ablate
//! <out>/ablation_summary.csv                         ablate
//! <out>/il_report.json, <run>/{il_report.json,pca_traj.csv}
//!                                                    diagnose
//! <out>/report.md, report.csv                        report
//! ```
//!
//! Failures print a single JSON line `{"error": kind, "message": ...}` on
//! stderr and exit nonzero; configuration is validated and upstream
//! artifacts are checked before anything is written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{derive_target, generate_source, stratified_subsample, Dataset, TargetSplit};
use crate::diagnostics::{
    estimate_il, feature_interp_trajectory, AffineModel, IlReport, LabelSpace, Layer, ModelOutput, OutputFn, Trajectory,
};
use crate::loss::Mode;
use crate::model::ModelWeights;
use crate::tensor::Tensor;
use crate::trainer::{mean_std, pretrain_source, run_ablation_suite, train_observed, Metrics, TrainConfig, TrainInputs};

#[derive(Debug, Parser)]
#[command(name = "smile", about = "Self-distilled mixup fine-tuning on synthetic transfer tasks", version)]
pub struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.mode=SMILE`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the source dataset and the derived target splits.
    GenData,
    /// Pre-train the extractor and source head on the source dataset.
    Pretrain,
    /// Fine-tune on the target data with `train.mode`.
    Train,
    /// Train every (mode, seed) cell of the ablation grid.
    Ablate,
    /// Interpolation loss and feature trajectories of trained runs.
    Diagnose {
        /// Evaluate a random affine map instead of trained checkpoints.
        #[arg(long)]
        affine_stub: bool,
    },
    /// Join run summaries and diagnostics into one table.
    Report,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    MissingArtifact(PathBuf),
    Runtime(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingArtifact(_) => "missing_artifact",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Config(e) => e.to_string(),
            CliError::MissingArtifact(p) => format!("{} not found; run the upstream subcommand first", p.display()),
            CliError::Runtime(m) => m.clone(),
        }
    }

    /// The one-line machine-readable form.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({"error": self.kind(), "message": self.message()}).to_string()
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string().split_whitespace().collect::<Vec<_>>().join(" "))
}

/// Artifact paths under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn source(&self) -> PathBuf {
        self.data("source.bin")
    }

    pub fn target_train(&self) -> PathBuf {
        self.data("target_train.bin")
    }

    pub fn target_test(&self) -> PathBuf {
        self.data("target_test.bin")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data("manifest.json")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("checkpoints").join("source.ckpt")
    }

    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("checkpoints").join("pretrain_log.csv")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, mode: Mode, seed: u64) -> PathBuf {
        self.runs().join(mode.name()).join(format!("seed-{seed}"))
    }

    pub fn ablation_summary(&self) -> PathBuf {
        self.root.join("ablation_summary.csv")
    }

    pub fn il_report(&self) -> PathBuf {
        self.root.join("il_report.json")
    }

    pub fn affine_stub_dir(&self) -> PathBuf {
        self.root.join("affine-stub")
    }
}

/// Final numbers of one training run, read back by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub iterations: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_total_loss: f64,
    pub checkpoint_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsEntry {
    /// `<MODE>/seed-<s>` or `affine-stub`.
    pub model: String,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub label_train: IlReport,
    pub label_test: IlReport,
    pub feature_train: IlReport,
    pub feature_test: IlReport,
    pub trajectory_pairs: usize,
    pub explained_variance: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub entries: Vec<DiagnosticsEntry>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let layout = Layout::new(&config.output_dir);
    match cli.command {
        Command::GenData => gen_data(&config, &layout),
        Command::Pretrain => pretrain(&config, &layout),
        Command::Train => train(&config, &layout).map(|_| ()),
        Command::Ablate => ablate(&config, &layout),
        Command::Diagnose { affine_stub } => diagnose(&config, &layout, affine_stub),
        Command::Report => report(&layout).map(|_| ()),
        Command::ShowConfig => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(path.to_path_buf()))
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    require(path)?;
    Dataset::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<ModelWeights, CliError> {
    require(path)?;
    ModelWeights::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// FNV-1a over the file bytes, as 16 hex digits.
pub fn checksum(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

pub fn gen_data(config: &ExperimentConfig, layout: &Layout) -> Result<(), CliError> {
    let (source, templates) = generate_source(&config.task).map_err(runtime)?;
    let pool = derive_target(&config.task, &templates, TargetSplit::Train).map_err(runtime)?;
    let target = stratified_subsample(&pool, config.data.sampling_rate, config.data.subsample_seed).map_err(runtime)?;
    let test = derive_target(&config.task, &templates, TargetSplit::Test).map_err(runtime)?;
    let mut manifest = BTreeMap::new();
    for (name, ds) in [("source", &source), ("target_train", &target), ("target_test", &test)] {
        let bytes = ds.to_bytes();
        manifest.insert(format!("{name}.bin"), checksum(&bytes));
        write(&layout.data(&format!("{name}.bin")), &bytes)?;
        if config.data.write_csv {
            let mut csv = Vec::new();
            ds.write_csv(&mut csv).map_err(runtime)?;
            write(&layout.data(&format!("{name}.csv")), csv)?;
        }
        println!("wrote {name}: {} samples, {} classes", ds.len(), ds.class_count);
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(runtime)? + "\n";
    write(&layout.manifest(), json)
}

pub fn pretrain(config: &ExperimentConfig, layout: &Layout) -> Result<(), CliError> {
    let source = load_dataset(&layout.source())?;
    let (model, log) = pretrain_source(&source, config.arch, &config.pretrain).map_err(runtime)?;
    let mut csv = String::from("iteration,loss\n");
    for (k, l) in log.losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", k + 1);
    }
    write(&layout.pretrain_log(), csv)?;
    write(&layout.pretrained(), model.to_bytes())?;
    println!(
        "pre-trained {} iterations, source train accuracy {:.4}",
        config.pretrain.iterations, log.train_accuracy
    );
    Ok(())
}

struct TrainingData {
    pretrained: ModelWeights,
    source: Dataset,
    target: Dataset,
    test: Dataset,
}

fn training_data(layout: &Layout) -> Result<TrainingData, CliError> {
    for p in [layout.pretrained(), layout.source(), layout.target_train(), layout.target_test()] {
        require(&p)?;
    }
    Ok(TrainingData {
        pretrained: load_model(&layout.pretrained())?,
        source: load_dataset(&layout.source())?,
        target: load_dataset(&layout.target_train())?,
        test: load_dataset(&layout.target_test())?,
    })
}

fn save_run(layout: &Layout, config: &TrainConfig, model: &ModelWeights, metrics: &Metrics, test_accuracy: f64, train_accuracy: f64) -> Result<RunSummary, CliError> {
    let dir = layout.run_dir(config.mode, config.seed);
    let summary = RunSummary {
        mode: config.mode,
        seed: config.seed,
        iterations: config.iterations,
        train_accuracy,
        test_accuracy,
        final_total_loss: metrics.iterations.last().map_or(f64::NAN, |l| l.values.total),
        checkpoint_fingerprint: format!("{:016x}", model.fingerprint()),
    };
    write(&dir.join("model.ckpt"), model.to_bytes())?;
    write(&dir.join("metrics.csv"), metrics.to_csv())?;
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(runtime)? + "\n")?;
    Ok(summary)
}

pub fn train(config: &ExperimentConfig, layout: &Layout) -> Result<RunSummary, CliError> {
    let data = training_data(layout)?;
    let inputs = TrainInputs {
        pretrained: &data.pretrained,
        arch: config.arch,
        target: &data.target,
        source: Some(&data.source),
        test: Some(&data.test),
    };
    let tc = &config.train;
    let every = if tc.eval_every > 0 { tc.eval_every } else { tc.iterations };
    let (model, metrics) = train_observed(&inputs, tc, |view| {
        if view.iteration % every == 0 || view.iteration == tc.iterations {
            let v = view.log.values;
            println!(
                "[{}] iter {}/{} lr {} task {:.4} mxp {:.4} fe {:.4} fc {:.4} total {:.4}",
                tc.mode.name(),
                view.iteration,
                tc.iterations,
                view.log.lr,
                v.task,
                v.mxp,
                v.fe,
                v.fc,
                v.total
            );
        }
    })
    .map_err(runtime)?;
    let last = metrics.final_eval().copied().ok_or_else(|| runtime("no evaluation recorded"))?;
    let summary = save_run(layout, tc, &model, &metrics, last.test_accuracy.unwrap_or(f64::NAN), last.train_accuracy)?;
    println!(
        "[{}] seed {} train accuracy {:.4} test accuracy {:.4}",
        tc.mode.name(),
        tc.seed,
        summary.train_accuracy,
        summary.test_accuracy
    );
    Ok(summary)
}

pub fn ablate(config: &ExperimentConfig, layout: &Layout) -> Result<(), CliError> {
    let data = training_data(layout)?;
    let inputs = TrainInputs {
        pretrained: &data.pretrained,
        arch: config.arch,
        target: &data.target,
        source: Some(&data.source),
        test: Some(&data.test),
    };
    let mut saved = Ok(());
    let table = run_ablation_suite(&inputs, &config.train, &config.ablate.modes, &config.ablate.seeds, |cell, model, metrics| {
        println!(
            "[{}] seed {} test accuracy {:.4}",
            cell.mode.name(),
            cell.seed,
            cell.test_accuracy
        );
        if saved.is_ok() {
            let cfg = TrainConfig {
                mode: cell.mode,
                seed: cell.seed,
                ..config.train.clone()
            };
            saved = save_run(layout, &cfg, model, metrics, cell.test_accuracy, cell.train_accuracy).map(|_| ());
        }
    })
    .map_err(runtime)?;
    saved?;
    write(&layout.ablation_summary(), table.to_csv())?;
    for s in &table.summaries {
        println!("{:<10} {:.4} ± {:.4}", s.mode.name(), s.test_mean, s.test_std);
    }
    Ok(())
}

/// Distinct index pairs drawn reproducibly from `n` samples.
pub fn trajectory_pairs(n: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..n);
            (i, (i + rng.random_range(1..n)) % n)
        })
        .collect()
}

struct Evaluated {
    entry: DiagnosticsEntry,
    trajectory: Trajectory,
}

fn evaluate(
    name: String,
    mode: Option<Mode>,
    seed: Option<u64>,
    label: &dyn OutputFn,
    feature: &dyn OutputFn,
    train: &Tensor,
    test: &Tensor,
    config: &ExperimentConfig,
) -> Result<Evaluated, CliError> {
    let d = &config.diagnostics;
    let il = |f: &dyn OutputFn, x: &Tensor, layer| estimate_il(f, x, &d.il_config(layer)).map_err(runtime);
    let pairs = trajectory_pairs(test.rows(), d.trajectory_pairs, d.seed);
    let trajectory = feature_interp_trajectory(feature, test, &pairs).map_err(runtime)?;
    Ok(Evaluated {
        entry: DiagnosticsEntry {
            model: name,
            mode,
            seed,
            label_train: il(label, train, Layer::Label)?,
            label_test: il(label, test, Layer::Label)?,
            feature_train: il(feature, train, Layer::Feature)?,
            feature_test: il(feature, test, Layer::Feature)?,
            trajectory_pairs: pairs.len(),
            explained_variance: trajectory.explained,
        },
        trajectory,
    })
}

fn write_diagnostics(dir: &Path, e: &Evaluated) -> Result<(), CliError> {
    write(&dir.join("pca_traj.csv"), e.trajectory.to_csv())?;
    write(&dir.join("il_report.json"), serde_json::to_string_pretty(&e.entry).map_err(runtime)? + "\n")
}

/// Run directories `runs/<MODE>/seed-<s>` holding a checkpoint, sorted.
pub fn discover_runs(layout: &Layout) -> Vec<(Mode, u64, PathBuf)> {
    let mut runs = Vec::new();
    for mode in Mode::ALL {
        let Ok(entries) = fs::read_dir(layout.runs().join(mode.name())) else {
            continue;
        };
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse::<u64>().ok()) {
                if entry.path().join("model.ckpt").is_file() {
                    runs.push((mode, seed, entry.path()));
                }
            }
        }
    }
    runs.sort_by_key(|(m, s, _)| (Mode::ALL.iter().position(|x| x == m), *s));
    runs
}

pub fn diagnose(config: &ExperimentConfig, layout: &Layout, affine_stub: bool) -> Result<(), CliError> {
    require(&layout.target_train())?;
    require(&layout.target_test())?;
    let runs = discover_runs(layout);
    if !affine_stub && runs.is_empty() {
        return Err(CliError::MissingArtifact(layout.runs().join("<MODE>/seed-<s>/model.ckpt")));
    }
    let train = load_dataset(&layout.target_train())?.full_batch().inputs;
    let test = load_dataset(&layout.target_test())?.full_batch().inputs;
    let mut entries = Vec::new();
    if affine_stub {
        let width = train.row_width();
        let label = AffineModel::random(width, config.arch.target_classes, config.diagnostics.seed);
        let feature = AffineModel::random(width, config.arch.feature_dim, config.diagnostics.seed + 1);
        let e = evaluate("affine-stub".into(), None, None, &label, &feature, &train, &test, config)?;
        write_diagnostics(&layout.affine_stub_dir(), &e)?;
        entries.push(e.entry);
    } else {
        for (mode, seed, dir) in runs {
            let model = load_model(&dir.join("model.ckpt"))?;
            let label = ModelOutput {
                weights: &model,
                layer: Layer::Label,
                label_space: config.diagnostics.label_space,
            };
            let feature = ModelOutput {
                weights: &model,
                layer: Layer::Feature,
                label_space: LabelSpace::Logits,
            };
            let e = evaluate(format!("{}/seed-{seed}", mode.name()), Some(mode), Some(seed), &label, &feature, &train, &test, config)?;
            write_diagnostics(&dir, &e)?;
            entries.push(e.entry);
        }
    }
    for e in &entries {
        println!(
            "{:<16} label IL train {:.4} test {:.4} | feature IL train {:.4} test {:.4}",
            e.model, e.label_train.mean, e.label_test.mean, e.feature_train.mean, e.feature_test.mean
        );
    }
    let file = DiagnosticsFile { entries };
    write(&layout.il_report(), serde_json::to_string_pretty(&file).map_err(runtime)? + "\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub mode: Mode,
    pub runs: usize,
    pub test_mean: f64,
    pub test_std: f64,
    pub label_il_train: Option<f64>,
    pub label_il_test: Option<f64>,
    pub feature_il_train: Option<f64>,
    pub feature_il_test: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Per-mode accuracy and interpolation-loss table from the run summaries
/// and (when present) the diagnostics file.
pub fn report(layout: &Layout) -> Result<Vec<ReportRow>, CliError> {
    let runs = discover_runs(layout);
    if runs.is_empty() {
        return Err(CliError::MissingArtifact(layout.runs().join("<MODE>/seed-<s>/summary.json")));
    }
    let mut summaries: Vec<RunSummary> = Vec::new();
    for (_, _, dir) in &runs {
        let path = dir.join("summary.json");
        require(&path)?;
        let text = fs::read_to_string(&path).map_err(runtime)?;
        summaries.push(serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?);
    }
    let diagnostics: Option<DiagnosticsFile> = match fs::read_to_string(layout.il_report()) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| runtime(format!("il_report.json: {e}")))?),
        Err(_) => None,
    };
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        let accs: Vec<f64> = summaries.iter().filter(|s| s.mode == mode).map(|s| s.test_accuracy).collect();
        if accs.is_empty() {
            continue;
        }
        let (test_mean, test_std) = mean_std(&accs);
        let il_mean = |pick: fn(&DiagnosticsEntry) -> f64| -> Option<f64> {
            let values: Vec<f64> = diagnostics
                .as_ref()?
                .entries
                .iter()
                .filter(|e| e.mode == Some(mode))
                .map(pick)
                .collect();
            (!values.is_empty()).then(|| mean_std(&values).0)
        };
        rows.push(ReportRow {
            mode,
            runs: accs.len(),
            test_mean,
            test_std,
            label_il_train: il_mean(|e| e.label_train.mean),
            label_il_test: il_mean(|e| e.label_test.mean),
            feature_il_train: il_mean(|e| e.feature_train.mean),
            feature_il_test: il_mean(|e| e.feature_test.mean),
        });
    }

    let mut csv = String::from("mode,runs,test_accuracy_mean,test_accuracy_std,label_il_train,label_il_test,feature_il_train,feature_il_test\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.mode.name(),
            r.runs,
            r.test_mean,
            r.test_std,
            opt(r.label_il_train),
            opt(r.label_il_test),
            opt(r.feature_il_train),
            opt(r.feature_il_test)
        );
    }
    let mut md = String::from("# SMILE desk-scale report\n\n## Test accuracy (%)\n\n| mode | runs | mean ± std |\n|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(md, "| {} | {} | {:.2} ± {:.2} |", r.mode.name(), r.runs, 100.0 * r.test_mean, 100.0 * r.test_std);
    }
    let il_tables: [(&str, fn(&ReportRow) -> (Option<f64>, Option<f64>)); 2] = [
        ("Label interpolation loss", |r| (r.label_il_train, r.label_il_test)),
        ("Feature interpolation loss", |r| (r.feature_il_train, r.feature_il_test)),
    ];
    for (title, pick) in il_tables {
        let _ = write!(md, "\n## {title}\n\n| mode | train | test |\n|---|---|---|\n");
        for r in &rows {
            let (train, test) = pick(r);
            let _ = writeln!(md, "| {} | {} | {} |", r.mode.name(), fmt_opt(train), fmt_opt(test));
        }
    }
    write(&layout.root.join("report.csv"), csv)?;
    write(&layout.root.join("report.md"), &md)?;
    print!("{md}");
    Ok(rows)
}
