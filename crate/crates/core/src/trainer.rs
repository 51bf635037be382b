//! Source pre-training, the mean teacher-student fine-tuning loop and the
//! ablation suite.
//!
//! Iteration `k` (1-based) of [`train`]:
//! 1. refresh the teacher from the student weights `ω^{k-1}` per schedule;
//! 2. draw a target mini-batch (and a source mini-batch when the mode has a
//!    source-domain term), mix coefficients and pairings;
//! 3. take one SGD step on the student only.
//!
//! Every random choice comes from its own ChaCha stream derived from the
//! run seed, so modes that skip a draw do not shift the others.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, Dataset};
use crate::loss::{total_objective, FcSpace, Lambdas, LossError, LossValues, LossWeights, Mode, ObjectiveInputs};
use crate::mixup::{pair_batch, BetaSampler, MixupError};
use crate::model::{init_from_pretrained, Architecture, ModelError, ModelWeights, Network};
use crate::tensor::{Sgd, Tape, TensorError};

const STREAM_TARGET_BATCH: u64 = 11;
const STREAM_SOURCE_BATCH: u64 = 12;
const STREAM_LAMBDA: u64 = 13;
const STREAM_TARGET_PAIRING: u64 = 14;
const STREAM_SOURCE_PAIRING: u64 = 15;
const HEAD_SEED_SALT: u64 = 0x5eed_4ead;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mixup(#[from] MixupError),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherUpdate {
    /// Copy the student every `teacher_period` iterations.
    #[default]
    Periodic,
    /// `teacher ← decay·teacher + (1 − decay)·student` every iteration.
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSharing {
    /// One draw per iteration used by all three mixup terms.
    #[default]
    Shared,
    PerTerm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub teacher_period: usize,
    pub batch_size: usize,
    pub gamma_fe: f64,
    pub gamma_fc: f64,
    /// Beta(α, α) shape for mix coefficients.
    pub alpha: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of the run after which the learning rate is divided by
    /// `lr_drop_factor`.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    /// Rescales the student gradient to this global L2 norm when it is
    /// larger; 0 disables clipping.
    pub max_grad_norm: f64,
    pub mode: Mode,
    pub teacher_update: TeacherUpdate,
    pub ema_decay: f64,
    pub lambda_sharing: LambdaSharing,
    pub fc_space: FcSpace,
    /// Accuracy evaluation interval; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            iterations: 1500,
            teacher_period: 10,
            batch_size: 32,
            gamma_fe: 0.01,
            gamma_fc: 0.1,
            alpha: 1.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_fraction: 2.0 / 3.0,
            lr_drop_factor: 10.0,
            max_grad_norm: 0.0,
            mode: Mode::Smile,
            teacher_update: TeacherUpdate::Periodic,
            ema_decay: 0.99,
            lambda_sharing: LambdaSharing::Shared,
            fc_space: FcSpace::Logits,
            eval_every: 250,
            seed: 0,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> TrainError {
    TrainError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be positive"));
        }
        if self.teacher_period == 0 {
            return Err(invalid("teacher_period", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if !(self.gamma_fe >= 0.0 && self.gamma_fe.is_finite()) {
            return Err(invalid("gamma_fe", "must be non-negative"));
        }
        if !(self.gamma_fc >= 0.0 && self.gamma_fc.is_finite()) {
            return Err(invalid("gamma_fc", "must be non-negative"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        if !(self.lr_drop_fraction > 0.0 && self.lr_drop_fraction <= 1.0) {
            return Err(invalid("lr_drop_fraction", "must lie in (0, 1]"));
        }
        if !(self.lr_drop_factor >= 1.0 && self.lr_drop_factor.is_finite()) {
            return Err(invalid("lr_drop_factor", "must be at least 1"));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return Err(invalid("max_grad_norm", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(invalid("ema_decay", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            gamma_fe: self.gamma_fe,
            gamma_fc: self.gamma_fc,
        }
    }

    /// First iteration run at the reduced rate: `⌈fraction·K⌉`.
    pub fn lr_drop_iteration(&self) -> usize {
        ((self.lr_drop_fraction * self.iterations as f64 - 1e-9).ceil() as usize).max(1)
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration >= self.lr_drop_iteration() {
            self.lr / self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 0.1,
            iterations: 1000,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_fraction: 2.0 / 3.0,
            lr_drop_factor: 10.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    fn as_schedule(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            iterations: self.iterations,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_drop_fraction: self.lr_drop_fraction,
            lr_drop_factor: self.lr_drop_factor,
            mode: Mode::FineTune,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.as_schedule().validate()
    }
}

/// Cycles through shuffled epochs, `batch` indices at a time.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, rng: ChaCha8Rng) -> Self {
        let mut s = EpochSampler {
            order: (0..len).collect(),
            cursor: len,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Next `size` indices (capped at the dataset size), all distinct.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.cursor + size > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Target,
    Source,
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(model: &ModelWeights, dataset: &Dataset, head: HeadKind) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation"));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(256) {
        let batch = dataset.batch(chunk);
        let logits = match head {
            HeadKind::Target => model.target_logits(&batch.inputs)?,
            HeadKind::Source => model.source_logits(&batch.inputs)?,
        };
        for (row, &label) in batch.labels.iter().enumerate() {
            if argmax(logits.row(row)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains extractor and source head with plain cross-entropy SGD.
pub fn pretrain_source(
    source: &Dataset,
    arch: Architecture,
    config: &PretrainConfig,
) -> Result<(ModelWeights, PretrainLog), TrainError> {
    config.validate()?;
    if source.is_empty() {
        return Err(TrainError::EmptyDataset("source"));
    }
    check_dataset(source, &arch, arch.source_classes, "source")?;
    let schedule = config.as_schedule();
    let mut model = ModelWeights::init_source(arch, config.seed)?;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut sampler = EpochSampler::new(source.len(), stream(config.seed, STREAM_SOURCE_BATCH));
    let mut losses = Vec::with_capacity(config.iterations);
    for k in 1..=config.iterations {
        let batch = source.batch(&sampler.next_batch(config.batch_size));
        let diverged = |e: TensorError| TrainError::Diverged {
            iteration: k,
            detail: e.to_string(),
        };
        let mut tape = Tape::new();
        let bound = model.attach(&mut tape, true)?;
        let x = tape.constant(batch.inputs.clone())?;
        let logits = bound.source_logits(&mut tape, x).map_err(diverged)?;
        let target = tape.constant(one_hot(&batch.labels, arch.source_classes))?;
        let loss = tape.softmax_cross_entropy(logits, target).map_err(diverged)?;
        tape.backward(loss).map_err(diverged)?;
        losses.push(tape.value(loss).item());
        let grads = bound.gradients(&tape);
        sgd.step(model.params_mut(), &grads, schedule.lr_at(k)).map_err(diverged)?;
    }
    let train_accuracy = accuracy(&model, source, HeadKind::Source)?;
    Ok((model, PretrainLog { losses, train_accuracy }))
}

fn one_hot(labels: &[usize], classes: usize) -> crate::tensor::Tensor {
    let mut t = crate::tensor::Tensor::zeros(&[labels.len(), classes]);
    for (row, &l) in labels.iter().enumerate() {
        t.data_mut()[row * classes + l] = 1.0;
    }
    t
}

fn check_dataset(ds: &Dataset, arch: &Architecture, classes: usize, which: &str) -> Result<(), TrainError> {
    if ds.height != arch.image_size || ds.width != arch.image_size || ds.channels != arch.in_channels {
        return Err(TrainError::Incompatible(format!(
            "{which} images are {}x{}x{}, model expects {}x{}x{}",
            ds.height, ds.width, ds.channels, arch.image_size, arch.image_size, arch.in_channels
        )));
    }
    if ds.class_count != classes {
        return Err(TrainError::Incompatible(format!(
            "{which} dataset has {} classes, model expects {classes}",
            ds.class_count
        )));
    }
    Ok(())
}

/// Applies the teacher schedule at iteration `k`, given the student weights
/// `ω^{k-1}` from before this iteration's step.
pub fn update_teacher(teacher: &mut ModelWeights, student_prev: &ModelWeights, k: usize, config: &TrainConfig) {
    match config.mode {
        Mode::SmileNoT => {}
        Mode::SmileNoS => *teacher = student_prev.teacher_copy(),
        _ => match config.teacher_update {
            TeacherUpdate::Periodic => {
                if k % config.teacher_period == 0 {
                    *teacher = student_prev.teacher_copy();
                }
            }
            TeacherUpdate::Ema => teacher.blend_from(student_prev, config.ema_decay),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    pub values: LossValues,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalLog {
    pub iteration: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mode: Mode,
    pub gamma_fe: f64,
    pub gamma_fc: f64,
    pub iterations: Vec<IterationLog>,
    pub evals: Vec<EvalLog>,
}

impl Metrics {
    pub fn final_eval(&self) -> Option<&EvalLog> {
        self.evals.last()
    }

    /// One row per iteration; accuracy columns are filled on evaluation
    /// iterations only.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,mode,lr,task,mxp,fe,fc,total,gamma_fe,gamma_fc,train_accuracy,test_accuracy\n");
        let mut evals = self.evals.iter().peekable();
        for log in &self.iterations {
            let v = &log.values;
            let (train, test) = match evals.peek() {
                Some(e) if e.iteration == log.iteration => {
                    let e = evals.next().expect("peeked");
                    (e.train_accuracy.to_string(), e.test_accuracy.map(|a| a.to_string()).unwrap_or_default())
                }
                _ => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                log.iteration,
                self.mode.name(),
                log.lr,
                v.task,
                v.mxp,
                v.fe,
                v.fc,
                v.total,
                self.gamma_fe,
                self.gamma_fc,
                train,
                test
            );
        }
        out
    }
}

/// State visible to an observer after each step.
pub struct IterationView<'a> {
    pub iteration: usize,
    /// `ω^{k-1}`, the student before this step.
    pub student_before: &'a ModelWeights,
    /// Teacher used at this iteration (after the schedule was applied).
    pub teacher: &'a ModelWeights,
    pub student_after: &'a ModelWeights,
    pub log: &'a IterationLog,
}

pub struct TrainInputs<'a> {
    pub pretrained: &'a ModelWeights,
    pub arch: Architecture,
    pub target: &'a Dataset,
    /// Needed by modes with a source-domain term.
    pub source: Option<&'a Dataset>,
    /// Held-out target data for periodic test accuracy.
    pub test: Option<&'a Dataset>,
}

pub fn train(inputs: &TrainInputs<'_>, config: &TrainConfig) -> Result<(ModelWeights, Metrics), TrainError> {
    train_observed(inputs, config, |_| {})
}

pub fn train_observed<F>(inputs: &TrainInputs<'_>, config: &TrainConfig, mut observe: F) -> Result<(ModelWeights, Metrics), TrainError>
where
    F: FnMut(&IterationView<'_>),
{
    config.validate()?;
    let arch = inputs.arch;
    if inputs.target.is_empty() {
        return Err(TrainError::EmptyDataset("target"));
    }
    check_dataset(inputs.target, &arch, arch.target_classes, "target")?;
    if let Some(test) = inputs.test {
        check_dataset(test, &arch, arch.target_classes, "test")?;
    }
    let source = if config.mode.uses_source_term() {
        let s = inputs
            .source
            .ok_or_else(|| TrainError::Incompatible(format!("mode {} needs the source dataset", config.mode.name())))?;
        if s.is_empty() {
            return Err(TrainError::EmptyDataset("source"));
        }
        check_dataset(s, &arch, arch.source_classes, "source")?;
        Some(s)
    } else {
        None
    };

    let (mut student, mut teacher) = init_from_pretrained(inputs.pretrained, arch, config.seed ^ HEAD_SEED_SALT)?;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let beta = BetaSampler::new(config.alpha)?;
    let mut target_sampler = EpochSampler::new(inputs.target.len(), stream(config.seed, STREAM_TARGET_BATCH));
    let mut source_sampler = source.map(|s| EpochSampler::new(s.len(), stream(config.seed, STREAM_SOURCE_BATCH)));
    let mut lambda_rng = stream(config.seed, STREAM_LAMBDA);
    let mut target_pair_rng = stream(config.seed, STREAM_TARGET_PAIRING);
    let mut source_pair_rng = stream(config.seed, STREAM_SOURCE_PAIRING);

    let mut metrics = Metrics {
        mode: config.mode,
        gamma_fe: config.gamma_fe,
        gamma_fc: config.gamma_fc,
        iterations: Vec::with_capacity(config.iterations),
        evals: Vec::new(),
    };

    for k in 1..=config.iterations {
        update_teacher(&mut teacher, &student, k, config);

        let target_batch = inputs.target.batch(&target_sampler.next_batch(config.batch_size));
        let lambdas = match config.lambda_sharing {
            LambdaSharing::Shared => Lambdas::shared(beta.sample(&mut lambda_rng)),
            LambdaSharing::PerTerm => Lambdas {
                mxp: beta.sample(&mut lambda_rng),
                fe: beta.sample(&mut lambda_rng),
                fc: beta.sample(&mut lambda_rng),
            },
        };
        let target_pairing = pair_batch(target_batch.len(), &mut target_pair_rng)?;
        let source_draw: Option<Batch> = match (source, source_sampler.as_mut()) {
            (Some(s), Some(sampler)) => Some(s.batch(&sampler.next_batch(config.batch_size))),
            _ => None,
        };
        let source_pairing = source_draw
            .as_ref()
            .map(|b| pair_batch(b.len(), &mut source_pair_rng))
            .transpose()?;

        let objective_inputs = ObjectiveInputs {
            target: &target_batch,
            target_pairing: &target_pairing,
            source: source_draw.as_ref().zip(source_pairing.as_ref()),
            lambdas,
            weights: config.loss_weights(),
            fc_space: config.fc_space,
        };

        let diverged = |detail: String| TrainError::Diverged { iteration: k, detail };
        let mut tape = Tape::new();
        let bound = student.attach(&mut tape, true)?;
        let frozen_teacher = teacher.attach(&mut tape, false)?;
        let objective = total_objective(&mut tape, &bound, &frozen_teacher, config.mode, &objective_inputs)
            .map_err(|e| diverged(e.to_string()))?;
        tape.backward(objective.root).map_err(|e| diverged(e.to_string()))?;
        let mut grads = bound.gradients(&tape);
        drop(tape);
        clip_global_norm(&mut grads, config.max_grad_norm);

        let lr = config.lr_at(k);
        let before = student.clone();
        sgd.step(student.params_mut(), &grads, lr).map_err(|e| diverged(e.to_string()))?;

        let log = IterationLog {
            iteration: k,
            lr,
            values: objective.values,
        };
        metrics.iterations.push(log);
        observe(&IterationView {
            iteration: k,
            student_before: &before,
            teacher: &teacher,
            student_after: &student,
            log: &log,
        });

        let eval_now = k == config.iterations || (config.eval_every > 0 && k % config.eval_every == 0);
        if eval_now {
            metrics.evals.push(EvalLog {
                iteration: k,
                train_accuracy: accuracy(&student, inputs.target, HeadKind::Target)?,
                test_accuracy: inputs
                    .test
                    .map(|t| accuracy(&student, t, HeadKind::Target))
                    .transpose()?,
            });
        }
    }
    Ok((student, metrics))
}

/// Scales all gradients by one factor so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [crate::tensor::Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub mode: Mode,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub mode: Mode,
    pub runs: usize,
    pub test_mean: f64,
    pub test_std: f64,
    pub train_mean: f64,
    pub train_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    pub summaries: Vec<AblationSummary>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn summary(&self, mode: Mode) -> Option<&AblationSummary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }

    /// Cell rows followed by one aggregate row per mode.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,mode,seed,test_accuracy,test_accuracy_std,train_accuracy,train_accuracy_std,runs\n");
        for c in &self.cells {
            let _ = writeln!(out, "cell,{},{},{},,{},,1", c.mode.name(), c.seed, c.test_accuracy, c.train_accuracy);
        }
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "aggregate,{},,{},{},{},{},{}",
                s.mode.name(),
                s.test_mean,
                s.test_std,
                s.train_mean,
                s.train_std,
                s.runs
            );
        }
        out
    }
}

/// Trains every `(mode, seed)` cell independently from the same pre-trained
/// weights and data, then aggregates test accuracy per mode.
pub fn run_ablation_suite<F>(
    inputs: &TrainInputs<'_>,
    base: &TrainConfig,
    modes: &[Mode],
    seeds: &[u64],
    mut on_cell: F,
) -> Result<AblationTable, TrainError>
where
    F: FnMut(&AblationCell, &ModelWeights, &Metrics),
{
    if seeds.len() < 2 {
        return Err(invalid("seeds", "the ablation suite needs at least two seeds"));
    }
    if modes.is_empty() {
        return Err(invalid("modes", "no modes requested"));
    }
    let test = inputs
        .test
        .ok_or_else(|| TrainError::Incompatible("the ablation suite needs a test set".into()))?;
    let mut cells = Vec::with_capacity(modes.len() * seeds.len());
    for &mode in modes {
        for &seed in seeds {
            let config = TrainConfig {
                mode,
                seed,
                ..base.clone()
            };
            let (model, metrics) = train(inputs, &config)?;
            let cell = AblationCell {
                mode,
                seed,
                train_accuracy: accuracy(&model, inputs.target, HeadKind::Target)?,
                test_accuracy: accuracy(&model, test, HeadKind::Target)?,
            };
            on_cell(&cell, &model, &metrics);
            cells.push(cell);
        }
    }
    let summaries = modes
        .iter()
        .map(|&mode| {
            let (test_acc, train_acc): (Vec<f64>, Vec<f64>) = cells
                .iter()
                .filter(|c| c.mode == mode)
                .map(|c| (c.test_accuracy, c.train_accuracy))
                .unzip();
            let (test_mean, test_std) = mean_std(&test_acc);
            let (train_mean, train_std) = mean_std(&train_acc);
            AblationSummary {
                mode,
                runs: test_acc.len(),
                test_mean,
                test_std,
                train_mean,
                train_std,
            }
        })
        .collect();
    Ok(AblationTable { cells, summaries })
}
