//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the desk-scale
//! experiment is trained once and shared by the criteria that need it.
//!
//! `cargo test --test acceptance` runs everything; passing criterion
//! numbers (e.g. `-- 1 4 10`) restricts the run.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smile_core::cli::{self, Layout};
use smile_core::config::{DiagnosticsConfig, ExperimentConfig};
use smile_core::data::{derive_target, generate_source, stratified_subsample, Batch, Dataset, TargetSplit, TaskSpec};
use smile_core::diagnostics::{
    estimate_il, estimate_il_with, feature_interp_trajectory, max_line_residual, normalized_interp_distance, AffineModel,
    DiagnosticsError, IlConfig, IlSampler, Layer, ModelOutput, OutputFn, LabelSpace, TRAJECTORY_COEFFICIENTS,
};
use smile_core::loss::{mix_rows, mixup_loss, task_loss, total_objective, FcSpace, Lambdas, LossWeights, Mode, ObjectiveInputs};
use smile_core::mixup::{mix, pair_batch, Pairing};
use smile_core::model::{init_from_pretrained, Architecture, ModelWeights};
use smile_core::tensor::{check_primitive, compare_gradients, primitive_suite, Tape, Tensor, TensorError};
use smile_core::trainer::{
    accuracy, pretrain_source, train, train_observed, HeadKind, PretrainConfig, TeacherUpdate, TrainConfig, TrainInputs,
};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tiny_spec() -> TaskSpec {
    TaskSpec {
        image_size: 8,
        source_classes: 4,
        target_classes: 3,
        source_per_class: 8,
        target_per_class: 6,
        test_per_class: 4,
        noise: 0.1,
        ..TaskSpec::default()
    }
}

fn tiny_arch() -> Architecture {
    Architecture {
        image_size: 8,
        conv1_channels: 2,
        conv2_channels: 3,
        feature_dim: 6,
        source_classes: 4,
        target_classes: 3,
        ..Architecture::default()
    }
}

struct Tiny {
    arch: Architecture,
    source: Dataset,
    target: Dataset,
    pretrained: ModelWeights,
}

fn tiny() -> Tiny {
    let spec = tiny_spec();
    let arch = tiny_arch();
    let (source, templates) = generate_source(&spec).unwrap();
    let target = derive_target(&spec, &templates, TargetSplit::Train).unwrap();
    let pre = PretrainConfig {
        iterations: 30,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    let (pretrained, _) = pretrain_source(&source, arch, &pre).unwrap();
    Tiny {
        arch,
        source,
        target,
        pretrained,
    }
}

fn tiny_inputs(t: &Tiny) -> TrainInputs<'_> {
    TrainInputs {
        pretrained: &t.pretrained,
        arch: t.arch,
        target: &t.target,
        source: Some(&t.source),
        test: None,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, arch: &Architecture, classes: usize) -> Batch {
    let width = arch.in_channels * arch.image_size * arch.image_size;
    let data = (0..n * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    Batch {
        inputs: Tensor::new(vec![n, arch.in_channels, arch.image_size, arch.image_size], data).unwrap(),
        labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
    }
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    for prim in primitive_suite() {
        let mut max_err: f64 = 0.0;
        for seed in 0..10 {
            let report = check_primitive(&prim, seed, 1e-5, 1e-4).map_err(|e| format!("{}: {e}", prim.name()))?;
            max_err = max_err.max(report.max_relative_error);
        }
        worst = worst.max(max_err);
        lines.push(format!("{} {max_err:.1e}", prim.name()));
    }

    // the full objective on a small CNN, differentiated against every
    // student parameter; teacher and source batch differ from the student
    let arch = Architecture {
        image_size: 6,
        ..tiny_arch()
    };
    let mut objective_err: f64 = 0.0;
    let (mut accepted, mut redrawn) = (0, 0);
    for seed in 0..40u64 {
        if accepted == 10 {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let base = ModelWeights::init_source(arch, 2 * seed).unwrap();
        let (student, _) = init_from_pretrained(&base, arch, 7 + seed).unwrap();
        let teacher = ModelWeights::init_source(arch, 2 * seed + 1).unwrap();
        let target = random_batch(&mut rng, 4, &arch, arch.target_classes);
        let source = random_batch(&mut rng, 4, &arch, arch.source_classes);
        let tp = pair_batch(4, &mut rng).unwrap();
        let sp = pair_batch(4, &mut rng).unwrap();
        let lambdas = Lambdas::shared(rng.random_range(0.1..0.9));
        let fc_space = if seed % 2 == 0 { FcSpace::Logits } else { FcSpace::Softmax };
        let inputs = ObjectiveInputs {
            target: &target,
            target_pairing: &tp,
            source: Some((&source, &sp)),
            lambdas,
            weights: LossWeights::default(),
            fc_space,
        };
        let evaluate = |flat: &Tensor, grad: bool| -> Result<(f64, Vec<f64>), TensorError> {
            let mut s = student.clone();
            s.set_flat_params(flat.data()).map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
            let mut tape = Tape::new();
            let bound = s.attach(&mut tape, true)?;
            let frozen = teacher.attach(&mut tape, false)?;
            let obj = total_objective(&mut tape, &bound, &frozen, Mode::Smile, &inputs)
                .map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
            if !grad {
                return Ok((obj.values.total, Vec::new()));
            }
            tape.backward(obj.root)?;
            Ok((obj.values.total, bound.gradients(&tape).iter().flat_map(|g| g.data().to_vec()).collect()))
        };
        let point = Tensor::from_vec(student.flat_params());
        let report = compare_gradients(
            |x| evaluate(x, false).map(|r| r.0),
            |x| evaluate(x, true).map(|r| r.1),
            &point,
            1e-5,
            1e-4,
        )
        .map_err(|e| e.to_string())?;
        // a coordinate whose one-sided differences disagree has a ReLU kink
        // inside the probe interval; such a point is redrawn, never judged
        let one_sided = |i: usize| -> Result<(f64, f64), TensorError> {
            let centre = evaluate(&point, false)?.0;
            let mut p = point.clone();
            p.data_mut()[i] += 1e-5;
            let plus = evaluate(&p, false)?.0;
            p.data_mut()[i] -= 2e-5;
            let minus = evaluate(&p, false)?.0;
            Ok(((plus - centre) / 1e-5, (centre - minus) / 1e-5))
        };
        let mut kink = false;
        for i in report.failures() {
            let (fwd, bwd) = one_sided(i).map_err(|e| e.to_string())?;
            kink |= (fwd - bwd).abs() > 1e-4 * fwd.abs().max(bwd.abs()).max(1e-6);
        }
        if kink {
            redrawn += 1;
            continue;
        }
        objective_err = objective_err.max(report.max_relative_error);
        accepted += 1;
    }
    worst = worst.max(objective_err);
    check(
        worst <= 1e-4 && accepted == 10,
        format!(
            "max rel error {worst:.1e} (primitives: {}; SMILE objective over {} params at {accepted} points: {objective_err:.1e}, {redrawn} kink-straddling points redrawn)",
            lines.join(", "),
            ModelWeights::init_source(arch, 0)
                .map(|m| init_from_pretrained(&m, arch, 0).unwrap().0.param_count())
                .unwrap()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn affine_zero_il() -> Outcome {
    let spec = TaskSpec::default();
    let (_, templates) = generate_source(&spec).unwrap();
    let test = derive_target(&spec, &templates, TargetSplit::Test).unwrap().full_batch().inputs;
    let width = test.row_width();
    let mut worst: f64 = 0.0;
    for (layer, out) in [(Layer::Label, spec.target_classes), (Layer::Feature, 32)] {
        let config = IlConfig {
            layer,
            ..IlConfig::default()
        };
        let model = AffineModel::random(width, out, 5);
        let report = estimate_il(&model, &test, &config).map_err(|e| e.to_string())?;
        worst = worst.max(report.mean);
    }
    check(worst <= 1e-6, format!("max IL over label/feature layers {worst:.2e} (bound 1e-6)"))
}

// ---------------------------------------------------------------- 3

struct Scripted {
    pairs: Vec<(usize, usize)>,
    deltas: Vec<(f64, f64)>,
    lambdas: Vec<f64>,
    next: [usize; 3],
}

impl IlSampler for Scripted {
    fn pair(&mut self, _population: usize) -> (usize, usize) {
        self.next[0] += 1;
        self.pairs[(self.next[0] - 1) % self.pairs.len()]
    }

    fn deltas(&mut self) -> (f64, f64) {
        self.next[1] += 1;
        self.deltas[(self.next[1] - 1) % self.deltas.len()]
    }

    fn lambda(&mut self) -> f64 {
        self.next[2] += 1;
        self.lambdas[(self.next[2] - 1) % self.lambdas.len()]
    }
}

fn nonlinear(in_dim: usize, out_dim: usize, seed: u64) -> impl Fn(&Tensor) -> Result<Tensor, DiagnosticsError> {
    let affine = AffineModel::random(in_dim, out_dim, seed);
    move |x: &Tensor| {
        let mut y = affine.outputs(x)?;
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            *v = if k % out_dim % 2 == 0 { (1.5 * *v).tanh() } else { v.powi(2) + 0.3 * *v };
        }
        Ok(y)
    }
}

fn cloud(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn estimator_oracle() -> Outcome {
    let inputs = cloud(7, 5, 21);
    let f = nonlinear(5, 3, 22);
    let pairs = vec![(1usize, 4usize), (6, 0)];
    let deltas = vec![(0.52, 0.97), (0.81, 0.6)];
    let lambdas = vec![0.15, 0.7];
    let config = IlConfig {
        n_pairs: 2,
        n_delta_draws: 2,
        n_lambda_draws: 2,
        ..IlConfig::default()
    };
    let mut sampler = Scripted {
        pairs: pairs.clone(),
        deltas: deltas.clone(),
        lambdas: lambdas.clone(),
        next: [0; 3],
    };
    let report = estimate_il_with(&f, &inputs, &config, &mut sampler).map_err(|e| e.to_string())?;

    let at = |i: usize, j: usize, c: f64| -> Vec<f64> {
        let x = mix(inputs.row(i), inputs.row(j), c).unwrap();
        f(&Tensor::new(vec![1, 5], x).unwrap()).unwrap().into_data()
    };
    let mut ratios = Vec::new();
    for &(i, j) in &pairs {
        for &(d1, d2) in &deltas {
            for &l in &lambdas {
                let (y1, y2, yt) = (at(i, j, d1), at(i, j, d2), at(i, j, l * d1 + (1.0 - l) * d2));
                ratios.push(normalized_interp_distance(&yt, &y1, &y2, l, 1e-8).unwrap());
            }
        }
    }
    let oracle = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let diff = (report.mean - oracle).abs();
    check(
        diff <= 1e-12 && report.n_effective == 8,
        format!("{} draws, estimate {:.15} vs oracle {oracle:.15}, |diff| {diff:.1e}", report.n_effective, report.mean),
    )
}

// ---------------------------------------------------------------- 4

fn trunk_bits(m: &ModelWeights) -> Vec<u64> {
    m.named_params()
        .into_iter()
        .filter(|(name, _)| !name.starts_with("target_head"))
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn schedule_exactness() -> Outcome {
    let t = tiny();
    let cfg = TrainConfig {
        mode: Mode::Smile,
        iterations: 100,
        batch_size: 8,
        teacher_period: 10,
        teacher_update: TeacherUpdate::Periodic,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut previous = trunk_bits(&t.pretrained);
    let mut copies = Vec::new();
    let mut violations = Vec::new();
    train_observed(&tiny_inputs(&t), &cfg, |view| {
        let teacher = trunk_bits(view.teacher);
        let k = view.iteration;
        if k % 10 == 0 {
            copies.push(k);
            if teacher != trunk_bits(view.student_before) {
                violations.push(format!("k={k}: teacher differs from student snapshot"));
            }
        } else if teacher != previous {
            violations.push(format!("k={k}: teacher changed off-schedule"));
        }
        previous = teacher;
    })
    .map_err(|e| e.to_string())?;
    check(
        violations.is_empty() && copies.len() == 10,
        if violations.is_empty() {
            format!("100 iterations, copies at {copies:?}, bit-identical to the k-1 student, unchanged elsewhere")
        } else {
            violations.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 5

fn reduction_identities() -> Outcome {
    let t = tiny();
    let base = TrainConfig {
        iterations: 60,
        batch_size: 8,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let smile = TrainConfig {
        mode: Mode::Smile,
        gamma_fe: 0.0,
        gamma_fc: 0.0,
        ..base.clone()
    };
    let dsmile = TrainConfig {
        mode: Mode::DSmile,
        ..base
    };
    let (ws, ms) = train(&tiny_inputs(&t), &smile).map_err(|e| e.to_string())?;
    let (wd, md) = train(&tiny_inputs(&t), &dsmile).map_err(|e| e.to_string())?;
    let trace = |m: &smile_core::trainer::Metrics| -> Vec<[u64; 3]> {
        m.iterations
            .iter()
            .map(|l| [l.values.task.to_bits(), l.values.mxp.to_bits(), l.values.total.to_bits()])
            .collect()
    };
    let a = trace(&ms) == trace(&md) && ws.fingerprint() == wd.fingerprint();

    // L^MXP at λ = 0 is the task loss on the unmixed batch
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (student, _) = init_from_pretrained(&t.pretrained, t.arch, 1).unwrap();
    let mut b_ok = true;
    for _ in 0..5 {
        let batch = random_batch(&mut rng, 6, &t.arch, t.arch.target_classes);
        let pairing = pair_batch(6, &mut rng).unwrap();
        let mut tape = Tape::new();
        let net = student.attach(&mut tape, false).unwrap();
        let task = task_loss(&mut tape, &net, &batch).unwrap();
        let mxp = mixup_loss(&mut tape, &net, &batch, 0.0, &pairing).unwrap();
        b_ok &= tape.value(task).item().to_bits() == tape.value(mxp).item().to_bits();
    }

    // mix endpoints, on vectors and on batches
    let mut c_ok = true;
    for _ in 0..20 {
        let n = rng.random_range(1..40);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        c_ok &= mix(&u, &v, 0.0).unwrap() == u && mix(&u, &v, 1.0).unwrap() == v;
    }
    let batch = random_batch(&mut rng, 5, &t.arch, 3);
    let swap = Pairing::from_partners(vec![4, 3, 2, 1, 0]);
    let at1 = mix_rows(&batch.inputs, &swap, 1.0).unwrap();
    c_ok &= mix_rows(&batch.inputs, &swap, 0.0).unwrap() == batch.inputs;
    c_ok &= (0..5).all(|i| at1.row(i) == batch.inputs.row(4 - i));

    check(
        a && b_ok && c_ok,
        format!(
            "(a) SMILE γ=0 vs D-SMILE trace over 60 iterations bit-identical: {a}; (b) L^MXP(λ=0) == task loss: {b_ok}; (c) mix endpoints exact: {c_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn scale_invariance() -> Outcome {
    let inputs = cloud(40, 8, 31);
    let f = nonlinear(8, 5, 32);
    let scaled = |x: &Tensor| -> Result<Tensor, DiagnosticsError> {
        let mut y = f(x)?;
        y.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        Ok(y)
    };
    let config = IlConfig::default();
    let a = estimate_il(&f, &inputs, &config).map_err(|e| e.to_string())?.mean;
    let b = estimate_il(&scaled, &inputs, &config).map_err(|e| e.to_string())?.mean;
    check(
        (a - b).abs() <= 1e-9 && a > 1e-3,
        format!("IL(f) {a:.12}, IL(10f) {b:.12}, |diff| {:.1e}", (a - b).abs()),
    )
}

// ---------------------------------------------------------------- 7, 8

const DESK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Fine-tuning settings of the desk-scale comparison. The baselines use
/// the library defaults; SMILE additionally uses the averaged teacher and
/// the probability-space source term, without which its source term
/// destabilises this normalisation-free CNN (see the README).
fn desk_config(mode: Mode, seed: u64) -> TrainConfig {
    let base = TrainConfig {
        mode,
        seed,
        eval_every: 0,
        ..TrainConfig::default()
    };
    if mode == Mode::Smile {
        TrainConfig {
            teacher_update: TeacherUpdate::Ema,
            fc_space: FcSpace::Softmax,
            ..base
        }
    } else {
        base
    }
}

struct DeskRun {
    mode: Mode,
    seed: u64,
    accuracy: f64,
    feature_il: f64,
    model: ModelWeights,
}

struct Desk {
    runs: Vec<DeskRun>,
    elapsed: Duration,
    test: Dataset,
}

impl Desk {
    fn per_seed(&self, mode: Mode) -> Vec<&DeskRun> {
        self.runs.iter().filter(|r| r.mode == mode).collect()
    }

    fn mean(&self, mode: Mode, f: fn(&DeskRun) -> f64) -> f64 {
        let runs = self.per_seed(mode);
        runs.iter().map(|r| f(r)).sum::<f64>() / runs.len() as f64
    }
}

fn desk_experiment() -> Result<Desk, String> {
    let start = Instant::now();
    let config = ExperimentConfig::default();
    let (source, templates) = generate_source(&config.task).map_err(|e| e.to_string())?;
    let pool = derive_target(&config.task, &templates, TargetSplit::Train).map_err(|e| e.to_string())?;
    let target = stratified_subsample(&pool, 0.3, config.data.subsample_seed).map_err(|e| e.to_string())?;
    let test = derive_target(&config.task, &templates, TargetSplit::Test).map_err(|e| e.to_string())?;
    let (pretrained, _) = pretrain_source(&source, config.arch, &config.pretrain).map_err(|e| e.to_string())?;
    let inputs = TrainInputs {
        pretrained: &pretrained,
        arch: config.arch,
        target: &target,
        source: Some(&source),
        test: Some(&test),
    };
    let il_config = DiagnosticsConfig::default().il_config(Layer::Feature);
    let held_out = test.full_batch().inputs;
    let mut runs = Vec::new();
    for mode in [Mode::FineTune, Mode::DSmile, Mode::Smile] {
        for seed in DESK_SEEDS {
            let (model, _) = train(&inputs, &desk_config(mode, seed)).map_err(|e| format!("{} seed {seed}: {e}", mode.name()))?;
            let accuracy = accuracy(&model, &test, HeadKind::Target).map_err(|e| e.to_string())?;
            let out = ModelOutput {
                weights: &model,
                layer: Layer::Feature,
                label_space: LabelSpace::Logits,
            };
            let feature_il = estimate_il(&out, &held_out, &il_config).map_err(|e| e.to_string())?.mean;
            println!(
                "    desk  {:<8} seed {seed}  test accuracy {accuracy:.4}  held-out feature IL {feature_il:.5}",
                mode.name()
            );
            runs.push(DeskRun {
                mode,
                seed,
                accuracy,
                feature_il,
                model,
            });
        }
    }
    Ok(Desk {
        runs,
        elapsed: start.elapsed(),
        test,
    })
}

fn il_ordering(desk: &Desk) -> Outcome {
    let smile = desk.per_seed(Mode::Smile);
    let mixup = desk.per_seed(Mode::DSmile);
    let wins = smile.iter().zip(&mixup).filter(|(s, m)| s.feature_il < m.feature_il).count();
    let (s, m) = (desk.mean(Mode::Smile, |r| r.feature_il), desk.mean(Mode::DSmile, |r| r.feature_il));
    let minutes = desk.elapsed.as_secs_f64() / 60.0;
    check(
        s < m && wins >= 4 && minutes < 10.0,
        format!(
            "mean held-out feature IL SMILE {s:.5} vs fine-tune+mixup {m:.5}; SMILE lower in {wins}/5 seeds; shared experiment {minutes:.1} min"
        ),
    )
}

fn accuracy_direction(desk: &Desk) -> Outcome {
    let acc = |mode| 100.0 * desk.mean(mode, |r| r.accuracy);
    let (s, ft, d) = (acc(Mode::Smile), acc(Mode::FineTune), acc(Mode::DSmile));
    let minutes = desk.elapsed.as_secs_f64() / 60.0;
    check(
        s >= ft - 0.5 && s >= d - 0.5 && minutes < 10.0,
        format!(
            "mean test accuracy SMILE {s:.2}%, FT {ft:.2}%, D-SMILE {d:.2}% over seeds {DESK_SEEDS:?}; shared experiment {minutes:.1} min"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn trajectory(desk: Option<&Desk>) -> Outcome {
    let spec = TaskSpec::default();
    let (_, templates) = generate_source(&spec).unwrap();
    let test = derive_target(&spec, &templates, TargetSplit::Test).unwrap().full_batch().inputs;
    let extractor = AffineModel::random(test.row_width(), 32, 41);
    let pairs = cli::trajectory_pairs(test.rows(), 8, 0);
    let traj = feature_interp_trajectory(&extractor, &test, &pairs).map_err(|e| e.to_string())?;
    let residual = (0..pairs.len())
        .map(|p| max_line_residual(&traj.pair_points(p)))
        .fold(0.0, f64::max);
    let affine_ok = residual <= 1e-8 && traj.rows.len() == 5 * pairs.len();

    // trained models: checkpoints go through the `diagnose` stage
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let models: Vec<(Mode, u64, ModelWeights)> = match desk {
        Some(d) => d.per_seed(Mode::Smile).iter().map(|r| (r.mode, r.seed, r.model.clone())).collect(),
        None => {
            // stand-alone run of this criterion: a short fine-tune suffices
            config.pretrain.iterations = 100;
            let (source, templates) = generate_source(&config.task).unwrap();
            let pool = derive_target(&config.task, &templates, TargetSplit::Train).unwrap();
            let target = stratified_subsample(&pool, 0.3, 0).unwrap();
            let (pre, _) = pretrain_source(&source, config.arch, &config.pretrain).unwrap();
            let inputs = TrainInputs {
                pretrained: &pre,
                arch: config.arch,
                target: &target,
                source: Some(&source),
                test: None,
            };
            let cfg = TrainConfig {
                iterations: 50,
                eval_every: 0,
                ..desk_config(Mode::Smile, 0)
            };
            vec![(Mode::Smile, 0, train(&inputs, &cfg).map_err(|e| e.to_string())?.0)]
        }
    };
    let layout = Layout::new(dir.path());
    cli::gen_data(&config, &layout).map_err(|e| e.message())?;
    if let Some(d) = desk {
        let saved = Dataset::load(&layout.target_test()).map_err(|e| e.to_string())?;
        if saved != d.test {
            return Err("regenerated test split differs from the experiment's".into());
        }
    }
    for (mode, seed, model) in &models {
        fs::create_dir_all(layout.run_dir(*mode, *seed)).map_err(|e| e.to_string())?;
        model.save(&layout.run_dir(*mode, *seed).join("model.ckpt")).map_err(|e| e.to_string())?;
    }
    cli::diagnose(&config, &layout, false).map_err(|e| e.message())?;
    let expected: BTreeSet<String> = TRAJECTORY_COEFFICIENTS.iter().map(|c| c.to_string()).collect();
    let mut trained_ok = true;
    let mut rows_seen = 0;
    for (mode, seed, _) in &models {
        let csv = fs::read_to_string(layout.run_dir(*mode, *seed).join("pca_traj.csv")).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
        rows_seen += rows.len();
        for pair in 0..config.diagnostics.trajectory_pairs {
            let coeffs: Vec<&String> = rows.iter().filter(|r| r[0] == pair.to_string()).map(|r| &r[1]).collect();
            trained_ok &= coeffs.len() == 5 && coeffs.iter().map(|c| c.to_string()).collect::<BTreeSet<_>>() == expected;
        }
        trained_ok &= rows.len() == 5 * config.diagnostics.trajectory_pairs;
    }
    check(
        affine_ok && trained_ok,
        format!(
            "affine max perpendicular residual {residual:.1e} over {} pairs; {} trained checkpoints -> pca_traj.csv with {rows_seen} rows, 5 per pair at {TRAJECTORY_COEFFICIENTS:?}: {trained_ok}",
            pairs.len(),
            models.len()
        ),
    )
}

// ---------------------------------------------------------------- 10

const TINY_TOML: &str = r#"
[task]
image_size = 8
source_classes = 4
target_classes = 3
source_per_class = 8
target_per_class = 6
test_per_class = 4

[arch]
image_size = 8
conv1_channels = 4
conv2_channels = 6
feature_dim = 8
source_classes = 4
target_classes = 3

[pretrain]
iterations = 60
batch_size = 8

[train]
mode = "SMILE"
iterations = 120
batch_size = 8
eval_every = 40
seed = 3
"#;

fn smile_cli(config: &Path, out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_smile"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("SMILE_OUT_DIR", out)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("smile {args:?}: {}", String::from_utf8_lossy(&status.stderr).trim()))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.toml");
    fs::write(&config, TINY_TOML).map_err(|e| e.to_string())?;
    let mut artifacts = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        for stage in ["gen-data", "pretrain", "train"] {
            smile_cli(&config, &out, &[stage])?;
        }
        let run = out.join("runs/SMILE/seed-3");
        let read = |p: &Path| fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
        artifacts.push((read(&run.join("model.ckpt"))?, read(&run.join("metrics.csv"))?));
    }
    let (a, b) = (&artifacts[0], &artifacts[1]);
    check(
        a.0 == b.0 && a.1 == b.1,
        format!(
            "two `smile train` runs: checkpoint {} bytes identical: {}, metrics {} bytes identical: {}",
            a.0.len(),
            a.0 == b.0,
            a.1.len(),
            a.1 == b.1
        ),
    )
}

// ----------------------------------------------------------------

/// Runs one criterion and prints its line; returns whether it passed.
/// `shared` replaces the measured runtime for criteria whose work was done
/// up front.
fn report(n: u32, name: &str, limit: Option<Duration>, run: &mut dyn FnMut() -> Outcome, shared: Option<Duration>) -> bool {
    let start = Instant::now();
    let outcome = run();
    let elapsed = shared.unwrap_or_else(|| start.elapsed());
    let (passed, detail) = match (outcome, limit) {
        (Ok(d), Some(l)) if elapsed > l => (false, format!("{d}; runtime {elapsed:.1?} exceeds {l:?}")),
        (Ok(d), _) => (true, d),
        (Err(d), _) => (false, d),
    };
    println!("{} [{n:>2}] {name}: {detail} ({elapsed:.1?})", if passed { "PASS" } else { "FAIL" });
    passed
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let selected: BTreeSet<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);

    let mut failures = 0;
    if wanted(1) {
        failures += !report(1, "gradient suite", Some(Duration::from_secs(60)), &mut gradient_suite, None) as usize;
    }
    if wanted(2) {
        failures += !report(2, "affine zero-IL", Some(Duration::from_secs(10)), &mut affine_zero_il, None) as usize;
    }
    if wanted(3) {
        failures += !report(3, "estimator-oracle equivalence", None, &mut estimator_oracle, None) as usize;
    }
    if wanted(4) {
        failures += !report(4, "teacher schedule exactness", None, &mut schedule_exactness, None) as usize;
    }
    if wanted(5) {
        failures += !report(5, "reduction identities", None, &mut reduction_identities, None) as usize;
    }
    if wanted(6) {
        failures += !report(6, "scale invariance of the IL ratio", None, &mut scale_invariance, None) as usize;
    }
    let desk = if wanted(7) || wanted(8) {
        println!("     desk-scale experiment: FT, D-SMILE, SMILE x seeds {DESK_SEEDS:?} on the default task at 30%");
        match desk_experiment() {
            Ok(d) => Some(d),
            Err(e) => {
                for (n, name) in [(7, "desk-scale feature-IL ordering"), (8, "desk-scale accuracy direction")] {
                    if wanted(n) {
                        failures += 1;
                        println!("FAIL [ {n}] {name}: experiment failed: {e}");
                    }
                }
                None
            }
        }
    } else {
        None
    };
    if let Some(d) = &desk {
        let limit = Some(Duration::from_secs(600));
        if wanted(7) {
            failures += !report(7, "desk-scale feature-IL ordering", limit, &mut || il_ordering(d), Some(d.elapsed)) as usize;
        }
        if wanted(8) {
            failures += !report(8, "desk-scale accuracy direction", limit, &mut || accuracy_direction(d), Some(d.elapsed)) as usize;
        }
    }
    if wanted(9) {
        failures += !report(9, "feature trajectory", None, &mut || trajectory(desk.as_ref()), None) as usize;
    }
    if wanted(10) {
        failures += !report(10, "determinism of `train`", None, &mut determinism, None) as usize;
    }

    if failures == 0 {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
