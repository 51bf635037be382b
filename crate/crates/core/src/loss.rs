//! Task loss, the three mixup terms and their composition into the training
//! objective.
//!
//! Teacher outputs are detached before use, so no term can send gradient
//! into the teacher's parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Batch;
use crate::mixup::{check_lambda, MixupError, Pairing};
use crate::model::Network;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mixup(#[from] MixupError),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("pairing covers {pairing} elements but the batch has {batch}")]
    PairingMismatch { pairing: usize, batch: usize },
    #[error("mode {0:?} needs a source batch")]
    MissingSourceBatch(Mode),
}

/// Training objective variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Plain fine-tuning: task loss only.
    #[serde(rename = "FT")]
    FineTune,
    /// Fine-tuning with standard mixup on the target head.
    #[serde(rename = "D-SMILE", alias = "FT+MXP")]
    DSmile,
    /// Fine-tuning plus the sample-to-feature term.
    #[serde(rename = "M-FE")]
    FeatureMix,
    /// Fine-tuning plus the source-domain sample-to-label term.
    #[serde(rename = "M-FC")]
    SourceLabelMix,
    #[serde(rename = "SMILE")]
    Smile,
    /// Teacher is always the latest student.
    #[serde(rename = "SMILE-noS")]
    SmileNoS,
    /// Teacher stays at the pre-trained weights.
    #[serde(rename = "SMILE-noT")]
    SmileNoT,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::FineTune,
        Mode::DSmile,
        Mode::FeatureMix,
        Mode::SourceLabelMix,
        Mode::Smile,
        Mode::SmileNoS,
        Mode::SmileNoT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FineTune => "FT",
            Mode::DSmile => "D-SMILE",
            Mode::FeatureMix => "M-FE",
            Mode::SourceLabelMix => "M-FC",
            Mode::Smile => "SMILE",
            Mode::SmileNoS => "SMILE-noS",
            Mode::SmileNoT => "SMILE-noT",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s).or(match s {
            "FT+MXP" => Some(Mode::DSmile),
            _ => None,
        })
    }

    pub fn uses_mixup(self) -> bool {
        matches!(self, Mode::DSmile | Mode::Smile | Mode::SmileNoS | Mode::SmileNoT)
    }

    pub fn uses_feature_term(self) -> bool {
        matches!(self, Mode::FeatureMix | Mode::Smile | Mode::SmileNoS | Mode::SmileNoT)
    }

    pub fn uses_source_term(self) -> bool {
        matches!(self, Mode::SourceLabelMix | Mode::Smile | Mode::SmileNoS | Mode::SmileNoT)
    }

    pub fn uses_teacher(self) -> bool {
        self.uses_feature_term() || self.uses_source_term()
    }

    /// Modes whose objective is `task + L^Tri`.
    fn is_triplet(self) -> bool {
        matches!(self, Mode::Smile | Mode::SmileNoS | Mode::SmileNoT)
    }
}

/// Space in which the source-domain term compares student and teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FcSpace {
    #[default]
    Logits,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma_fe: f64,
    pub gamma_fc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma_fe: 0.01,
            gamma_fc: 0.1,
        }
    }
}

/// Mix coefficients for the three mixup terms of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub mxp: f64,
    pub fe: f64,
    pub fc: f64,
}

impl Lambdas {
    pub fn shared(lambda: f64) -> Self {
        Lambdas {
            mxp: lambda,
            fe: lambda,
            fc: lambda,
        }
    }
}

/// Per-term scalar values of one objective evaluation. Terms a mode does
/// not use are reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub task: f64,
    pub mxp: f64,
    pub fe: f64,
    pub fc: f64,
    pub total: f64,
}

/// Rows of `inputs` mixed with their partners: `(1 − λ)·x_i + λ·x_partner(i)`.
pub fn mix_rows(inputs: &Tensor, pairing: &Pairing, lambda: f64) -> Result<Tensor, LossError> {
    check_lambda(lambda)?;
    let n = inputs.rows();
    if pairing.len() != n {
        return Err(LossError::PairingMismatch {
            pairing: pairing.len(),
            batch: n,
        });
    }
    let mut data = Vec::with_capacity(inputs.numel());
    for (i, j) in pairing.pairs() {
        let (u, v) = (inputs.row(i), inputs.row(j));
        data.extend(u.iter().zip(v).map(|(a, b)| (1.0 - lambda) * a + lambda * b));
    }
    Ok(Tensor::new(inputs.shape().to_vec(), data)?)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor, LossError> {
    let mut data = vec![0.0; labels.len() * classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(LossError::LabelOutOfRange { label, classes });
        }
        data[row * classes + label] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, LossError> {
    let classes = tape.value(logits).shape()[1];
    let target = tape.constant(one_hot(labels, classes)?)?;
    Ok(tape.softmax_cross_entropy(logits, target)?)
}

/// `(1 − λ)·CE(logits, y_i) + λ·CE(logits, y_partner(i))`, batch-averaged.
fn mixed_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    pairing: &Pairing,
    lambda: f64,
) -> Result<Var, LossError> {
    let partner_labels: Vec<usize> = pairing.partners().iter().map(|&j| labels[j]).collect();
    let first = cross_entropy(tape, logits, labels)?;
    let second = cross_entropy(tape, logits, &partner_labels)?;
    let first = tape.scale(first, 1.0 - lambda)?;
    let second = tape.scale(second, lambda)?;
    Ok(tape.add(first, second)?)
}

/// Mean over rows of `‖student_row − target_row‖²`.
fn mean_squared_distance(tape: &mut Tape, student: Var, target: Tensor) -> Result<Var, LossError> {
    let n = tape.value(student).rows();
    let target = tape.constant(target)?;
    let diff = tape.sub(student, target)?;
    let ss = tape.sum_squares(diff)?;
    Ok(tape.scale(ss, 1.0 / n as f64)?)
}

fn check_pairing(batch: &Batch, pairing: &Pairing) -> Result<(), LossError> {
    if pairing.len() != batch.len() {
        return Err(LossError::PairingMismatch {
            pairing: pairing.len(),
            batch: batch.len(),
        });
    }
    Ok(())
}

/// Mean cross-entropy of the target head against the batch labels.
pub fn task_loss<N: Network + ?Sized>(tape: &mut Tape, net: &N, batch: &Batch) -> Result<Var, LossError> {
    let x = tape.constant(batch.inputs.clone())?;
    let logits = net.target_logits(tape, x)?;
    cross_entropy(tape, logits, &batch.labels)
}

/// Standard mixup on the target head.
pub fn mixup_loss<N: Network + ?Sized>(
    tape: &mut Tape,
    net: &N,
    batch: &Batch,
    lambda: f64,
    pairing: &Pairing,
) -> Result<Var, LossError> {
    check_pairing(batch, pairing)?;
    let x = tape.constant(mix_rows(&batch.inputs, pairing, lambda)?)?;
    let logits = net.target_logits(tape, x)?;
    mixed_cross_entropy(tape, logits, &batch.labels, pairing, lambda)
}

/// Teacher features of the batch, mixed pairwise with `λ`.
fn mixed_teacher_output<T, F>(tape: &mut Tape, teacher: &T, batch: &Batch, lambda: f64, pairing: &Pairing, head: F) -> Result<Tensor, LossError>
where
    T: Network + ?Sized,
    F: FnOnce(&mut Tape, &T, Var) -> Result<Var, TensorError>,
{
    let x = tape.constant(batch.inputs.clone())?;
    let out = head(tape, teacher, x)?;
    let out = tape.detach(out);
    mix_rows(tape.value(out), pairing, lambda)
}

/// Sample-to-feature term: `‖FE(mix(x_i, x_j); ω) − mix(FE(x_i; ω_t), FE(x_j; ω_t))‖²`,
/// averaged over pairs.
pub fn feature_mixup_loss<S, T>(
    tape: &mut Tape,
    student: &S,
    teacher: &T,
    batch: &Batch,
    lambda: f64,
    pairing: &Pairing,
) -> Result<Var, LossError>
where
    S: Network + ?Sized,
    T: Network + ?Sized,
{
    check_pairing(batch, pairing)?;
    let x = tape.constant(mix_rows(&batch.inputs, pairing, lambda)?)?;
    let feats = student.features(tape, x)?;
    feature_term_from(tape, feats, teacher, batch, lambda, pairing)
}

fn feature_term_from<T: Network + ?Sized>(
    tape: &mut Tape,
    student_feats: Var,
    teacher: &T,
    batch: &Batch,
    lambda: f64,
    pairing: &Pairing,
) -> Result<Var, LossError> {
    let target = mixed_teacher_output(tape, teacher, batch, lambda, pairing, |t, n, x| n.features(t, x))?;
    mean_squared_distance(tape, student_feats, target)
}

/// Source-domain sample-to-label term: student source head on the mixed
/// input against the mixed teacher source outputs.
pub fn source_label_mixup_loss<S, T>(
    tape: &mut Tape,
    student: &S,
    teacher: &T,
    batch: &Batch,
    lambda: f64,
    pairing: &Pairing,
    space: FcSpace,
) -> Result<Var, LossError>
where
    S: Network + ?Sized,
    T: Network + ?Sized,
{
    check_pairing(batch, pairing)?;
    let x = tape.constant(mix_rows(&batch.inputs, pairing, lambda)?)?;
    let mut out = student.source_logits(tape, x)?;
    if space == FcSpace::Softmax {
        out = tape.softmax(out)?;
    }
    let target = mixed_teacher_output(tape, teacher, batch, lambda, pairing, |t, n, x| {
        let z = n.source_logits(t, x)?;
        match space {
            FcSpace::Logits => Ok(z),
            FcSpace::Softmax => t.softmax(z),
        }
    })?;
    mean_squared_distance(tape, out, target)
}

/// Everything one objective evaluation needs besides the networks.
#[derive(Debug, Clone)]
pub struct ObjectiveInputs<'a> {
    pub target: &'a Batch,
    pub target_pairing: &'a Pairing,
    /// Required by modes with a source-domain term.
    pub source: Option<(&'a Batch, &'a Pairing)>,
    pub lambdas: Lambdas,
    pub weights: LossWeights,
    pub fc_space: FcSpace,
}

/// The three triplet components and `γ_FE·L^FE + γ_FC·L^FC + L^MXP`.
#[derive(Debug, Clone, Copy)]
pub struct TripletTerms {
    pub mxp: Var,
    pub fe: Var,
    pub fc: Var,
    pub total: Var,
}

/// The triplet regularizer. The mixed target forward pass is shared between
/// the mixup and feature terms when their coefficients coincide.
pub fn triplet_loss<S, T>(
    tape: &mut Tape,
    student: &S,
    teacher: &T,
    inputs: &ObjectiveInputs<'_>,
) -> Result<TripletTerms, LossError>
where
    S: Network + ?Sized,
    T: Network + ?Sized,
{
    let (mxp, fe) = mixup_and_feature_terms(tape, student, teacher, inputs, true, true)?;
    let (mxp, fe) = (mxp.expect("requested"), fe.expect("requested"));
    let fc = source_term(tape, student, teacher, inputs, Mode::Smile)?;
    let weighted_fe = tape.scale(fe, inputs.weights.gamma_fe)?;
    let weighted_fc = tape.scale(fc, inputs.weights.gamma_fc)?;
    let reg = tape.add(weighted_fe, weighted_fc)?;
    let total = tape.add(reg, mxp)?;
    Ok(TripletTerms { mxp, fe, fc, total })
}

fn source_term<S, T>(tape: &mut Tape, student: &S, teacher: &T, inputs: &ObjectiveInputs<'_>, mode: Mode) -> Result<Var, LossError>
where
    S: Network + ?Sized,
    T: Network + ?Sized,
{
    let (batch, pairing) = inputs.source.ok_or(LossError::MissingSourceBatch(mode))?;
    source_label_mixup_loss(tape, student, teacher, batch, inputs.lambdas.fc, pairing, inputs.fc_space)
}

fn mixup_and_feature_terms<S, T>(
    tape: &mut Tape,
    student: &S,
    teacher: &T,
    inputs: &ObjectiveInputs<'_>,
    want_mxp: bool,
    want_fe: bool,
) -> Result<(Option<Var>, Option<Var>), LossError>
where
    S: Network + ?Sized,
    T: Network + ?Sized,
{
    let batch = inputs.target;
    let pairing = inputs.target_pairing;
    check_pairing(batch, pairing)?;
    let l = inputs.lambdas;
    if want_mxp && want_fe && l.mxp == l.fe {
        let x = tape.constant(mix_rows(&batch.inputs, pairing, l.mxp)?)?;
        let feats = student.features(tape, x)?;
        let logits = student.target_head(tape, feats)?;
        let mxp = mixed_cross_entropy(tape, logits, &batch.labels, pairing, l.mxp)?;
        let fe = feature_term_from(tape, feats, teacher, batch, l.fe, pairing)?;
        return Ok((Some(mxp), Some(fe)));
    }
    let mxp = want_mxp
        .then(|| mixup_loss(tape, student, batch, l.mxp, pairing))
        .transpose()?;
    let fe = want_fe
        .then(|| feature_mixup_loss(tape, student, teacher, batch, l.fe, pairing))
        .transpose()?;
    Ok((mxp, fe))
}

/// Root of one optimisation step and the logged term values.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub root: Var,
    pub values: LossValues,
}

/// `task_loss + L^Tri` for the triplet modes, or the reduced objective for
/// the ablation modes.
pub fn total_objective<S, T>(
    tape: &mut Tape,
    student: &S,
    teacher: &T,
    mode: Mode,
    inputs: &ObjectiveInputs<'_>,
) -> Result<Objective, LossError>
where
    S: Network + ?Sized,
    T: Network + ?Sized,
{
    let task = task_loss(tape, student, inputs.target)?;
    let value = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());

    let (root, mxp, fe, fc) = if mode.is_triplet() {
        let tri = triplet_loss(tape, student, teacher, inputs)?;
        let root = tape.add(task, tri.total)?;
        (root, Some(tri.mxp), Some(tri.fe), Some(tri.fc))
    } else {
        let (mxp, fe) = mixup_and_feature_terms(
            tape,
            student,
            teacher,
            inputs,
            mode.uses_mixup(),
            mode.uses_feature_term(),
        )?;
        let fc = mode
            .uses_source_term()
            .then(|| source_term(tape, student, teacher, inputs, mode))
            .transpose()?;
        let mut root = task;
        if let Some(m) = mxp {
            root = tape.add(root, m)?;
        }
        if let Some(f) = fe {
            let w = tape.scale(f, inputs.weights.gamma_fe)?;
            root = tape.add(root, w)?;
        }
        if let Some(f) = fc {
            let w = tape.scale(f, inputs.weights.gamma_fc)?;
            root = tape.add(root, w)?;
        }
        (root, mxp, fe, fc)
    };
    let values = LossValues {
        task: tape.value(task).item(),
        mxp: value(tape, mxp),
        fe: value(tape, fe),
        fc: value(tape, fc),
        total: tape.value(root).item(),
    };
    Ok(Objective { root, values })
}
