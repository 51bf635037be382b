//! Convolutional feature extractor with a target head and a source head.
//!
//! `FE(x) = relu(dense(mean_pool(relu(conv2(relu(conv1(x)))))))`, and both
//! heads are affine maps of `FE(x)`. The teacher is a [`ModelWeights`] whose
//! target head is absent.
//!
//! Checkpoint layout (little-endian): magic `SMCK`, version u32, eight u32
//! architecture fields (in_channels, image_size, conv1_channels,
//! conv2_channels, kernel, feature_dim, source_classes, target_classes),
//! tensor count u32, then per tensor: name length u16, UTF-8 name, rank u32,
//! dims as u64, values as f64.

use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    pub image_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    /// Odd, square kernel side for both convolutions.
    pub kernel: usize,
    pub feature_dim: usize,
    pub source_classes: usize,
    pub target_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            in_channels: 1,
            image_size: 16,
            conv1_channels: 6,
            conv2_channels: 12,
            kernel: 3,
            feature_dim: 32,
            source_classes: 20,
            target_classes: 5,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.in_channels,
            self.image_size,
            self.conv1_channels,
            self.conv2_channels,
            self.feature_dim,
            self.source_classes,
            self.target_classes,
        ];
        if dims.contains(&0) {
            return Err(ModelError::ArchitectureMismatch("all dimensions must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::ArchitectureMismatch(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Everything except the target class count, which the source model
    /// does not constrain.
    fn trunk_matches(&self, other: &Architecture) -> bool {
        Architecture {
            target_classes: 0,
            ..*self
        } == Architecture {
            target_classes: 0,
            ..*other
        }
    }
}

/// Affine classifier `logits = f · W + b`, `W: [d, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    /// Uniform in `[-1/√d, 1/√d]` for weights and bias.
    pub fn uniform(feature_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        Head {
            weight: Tensor::new(vec![feature_dim, classes], draw(feature_dim * classes)).expect("sizes agree"),
            bias: Tensor::new(vec![classes], draw(classes)).expect("sizes agree"),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub conv1_kernel: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_kernel: Tensor,
    pub conv2_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub arch: Architecture,
    pub extractor: FeatureExtractor,
    pub source_head: Head,
    /// Absent on teachers and on freshly pre-trained source models.
    pub target_head: Option<Head>,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound)).collect()).expect("sizes agree")
}

impl ModelWeights {
    /// Random extractor and source head for pre-training.
    pub fn init_source(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = arch.kernel;
        let extractor = FeatureExtractor {
            conv1_kernel: he_uniform(&[arch.conv1_channels, arch.in_channels, k, k], arch.in_channels * k * k, &mut rng),
            conv1_bias: Tensor::zeros(&[arch.conv1_channels]),
            conv2_kernel: he_uniform(
                &[arch.conv2_channels, arch.conv1_channels, k, k],
                arch.conv1_channels * k * k,
                &mut rng,
            ),
            conv2_bias: Tensor::zeros(&[arch.conv2_channels]),
            proj_weight: he_uniform(&[arch.conv2_channels, arch.feature_dim], arch.conv2_channels, &mut rng),
            proj_bias: Tensor::full(&[arch.feature_dim], 0.01),
        };
        let source_head = Head::uniform(arch.feature_dim, arch.source_classes, &mut rng);
        Ok(ModelWeights {
            arch,
            extractor,
            source_head,
            target_head: None,
        })
    }

    /// Independent deep copy.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    /// Copy without the target head, as carried by a teacher.
    pub fn teacher_copy(&self) -> Self {
        ModelWeights {
            target_head: None,
            ..self.clone()
        }
    }

    /// Named parameters in canonical order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let e = &self.extractor;
        let mut out = vec![
            ("conv1.kernel", &e.conv1_kernel),
            ("conv1.bias", &e.conv1_bias),
            ("conv2.kernel", &e.conv2_kernel),
            ("conv2.bias", &e.conv2_bias),
            ("proj.weight", &e.proj_weight),
            ("proj.bias", &e.proj_bias),
            ("source_head.weight", &self.source_head.weight),
            ("source_head.bias", &self.source_head.bias),
        ];
        if let Some(h) = &self.target_head {
            out.push(("target_head.weight", &h.weight));
            out.push(("target_head.bias", &h.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let e = &mut self.extractor;
        let mut out = vec![
            &mut e.conv1_kernel,
            &mut e.conv1_bias,
            &mut e.conv2_kernel,
            &mut e.conv2_bias,
            &mut e.proj_weight,
            &mut e.proj_bias,
            &mut self.source_head.weight,
            &mut self.source_head.bias,
        ];
        if let Some(h) = &mut self.target_head {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All parameters concatenated in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.named_params().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ModelWeights::flat_params`].
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.param_count() {
            return Err(ModelError::ArchitectureMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut rest = values;
        for t in self.params_mut() {
            let (head, tail) = rest.split_at(t.numel());
            t.data_mut().copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// `self ← decay·self + (1 − decay)·other` over the extractor and source head.
    pub fn blend_from(&mut self, other: &ModelWeights, decay: f64) {
        let theirs: Vec<Tensor> = other.named_params().into_iter().take(8).map(|(_, t)| t.clone()).collect();
        for (mine, theirs) in self.params_mut().into_iter().take(8).zip(theirs) {
            for (a, b) in mine.data_mut().iter_mut().zip(theirs.data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
    }

    /// FNV-1a over the raw bits of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        for (name, t) in self.named_params() {
            for byte in name.bytes().chain(t.data().iter().flat_map(|v| v.to_bits().to_le_bytes())) {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        hash
    }

    /// Registers the parameters on `tape`; frozen parameters become
    /// constants and never receive gradients.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel, TensorError> {
        let mut vars = Vec::new();
        for (_, t) in self.named_params() {
            let v = if trainable {
                tape.leaf(t.clone())?
            } else {
                tape.constant(t.clone())?
            };
            vars.push(v);
        }
        Ok(BoundModel { vars })
    }

    fn check_input(&self, inputs: &Tensor) -> Result<(), TensorError> {
        let a = &self.arch;
        let s = inputs.shape();
        if s.len() != 4 || s[1] != a.in_channels || s[2] != a.image_size || s[3] != a.image_size {
            return Err(TensorError::ShapeMismatch {
                op: "feature_extract",
                detail: format!(
                    "expected [n, {}, {}, {}], got {:?}",
                    a.in_channels, a.image_size, a.image_size, s
                ),
            });
        }
        Ok(())
    }

    fn eval_with<F>(&self, inputs: &Tensor, f: F) -> Result<Tensor, TensorError>
    where
        F: FnOnce(&BoundModel, &mut Tape, Var) -> Result<Var, TensorError>,
    {
        self.check_input(inputs)?;
        let mut tape = Tape::new();
        let bound = self.attach(&mut tape, false)?;
        let x = tape.constant(inputs.clone())?;
        let out = f(&bound, &mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// `FE(x; ω)` for a `[n, C, H, W]` batch, `[n, d]` result.
    pub fn features(&self, inputs: &Tensor) -> Result<Tensor, TensorError> {
        self.eval_with(inputs, |m, tape, x| m.features(tape, x))
    }

    pub fn target_logits(&self, inputs: &Tensor) -> Result<Tensor, TensorError> {
        self.eval_with(inputs, |m, tape, x| m.target_logits(tape, x))
    }

    pub fn source_logits(&self, inputs: &Tensor) -> Result<Tensor, TensorError> {
        self.eval_with(inputs, |m, tape, x| m.source_logits(tape, x))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let a = &self.arch;
        for v in [
            a.in_channels,
            a.image_size,
            a.conv1_channels,
            a.conv2_channels,
            a.kernel,
            a.feature_dim,
            a.source_classes,
            a.target_classes,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let params = self.named_params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(ModelError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let mut f = [0usize; 8];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let arch = Architecture {
            in_channels: f[0],
            image_size: f[1],
            conv1_channels: f[2],
            conv2_channels: f[3],
            kernel: f[4],
            feature_dim: f[5],
            source_classes: f[6],
            target_classes: f[7],
        };
        arch.validate()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| ModelError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Malformed("trailing bytes".into()));
        }
        let model = Self::assemble(arch, tensors)?;
        if !model.named_params().iter().all(|(_, t)| t.all_finite()) {
            return Err(ModelError::Malformed("non-finite parameter".into()));
        }
        Ok(model)
    }

    fn assemble(arch: Architecture, tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        // shapes are checked against a reference model of the same architecture
        let reference = ModelWeights::init_source(arch, 0)?;
        let expected: Vec<(&str, Vec<usize>)> = reference
            .named_params()
            .iter()
            .map(|(n, t)| (*n, t.shape().to_vec()))
            .chain([
                ("target_head.weight", vec![arch.feature_dim, arch.target_classes]),
                ("target_head.bias", vec![arch.target_classes]),
            ])
            .collect();
        let count = tensors.len();
        if count != 8 && count != 10 {
            return Err(ModelError::Malformed(format!("{count} tensors")));
        }
        for ((name, t), (want_name, want_shape)) in tensors.iter().zip(&expected) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(ModelError::Malformed(format!(
                    "tensor {name} {:?}, expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("count checked");
        let extractor = FeatureExtractor {
            conv1_kernel: next(),
            conv1_bias: next(),
            conv2_kernel: next(),
            conv2_bias: next(),
            proj_weight: next(),
            proj_bias: next(),
        };
        let source_head = Head {
            weight: next(),
            bias: next(),
        };
        let has_target = count == 10;
        let target_head = has_target.then(|| Head {
            weight: next(),
            bias: next(),
        });
        Ok(ModelWeights {
            arch,
            extractor,
            source_head,
            target_head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ModelError::Malformed("truncated checkpoint".into())),
        }
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Student and teacher initialised from a pre-trained source model. The
/// student gets a fresh target head; the teacher has none.
pub fn init_from_pretrained(
    pretrained: &ModelWeights,
    arch: Architecture,
    seed: u64,
) -> Result<(ModelWeights, ModelWeights), ModelError> {
    arch.validate()?;
    if !pretrained.arch.trunk_matches(&arch) {
        return Err(ModelError::ArchitectureMismatch(format!(
            "pre-trained {:?} vs configured {:?}",
            pretrained.arch, arch
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = pretrained.teacher_copy();
    student.arch = arch;
    student.target_head = Some(Head::uniform(arch.feature_dim, arch.target_classes, &mut rng));
    let mut teacher = pretrained.teacher_copy();
    teacher.arch = arch;
    Ok((student, teacher))
}

/// Something that maps inputs to features and features to logits on a tape.
pub trait Network {
    fn features(&self, tape: &mut Tape, inputs: Var) -> Result<Var, TensorError>;
    fn target_head(&self, tape: &mut Tape, features: Var) -> Result<Var, TensorError>;
    fn source_head(&self, tape: &mut Tape, features: Var) -> Result<Var, TensorError>;

    fn target_logits(&self, tape: &mut Tape, inputs: Var) -> Result<Var, TensorError> {
        let f = self.features(tape, inputs)?;
        self.target_head(tape, f)
    }

    fn source_logits(&self, tape: &mut Tape, inputs: Var) -> Result<Var, TensorError> {
        let f = self.features(tape, inputs)?;
        self.source_head(tape, f)
    }
}

/// [`ModelWeights`] registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; zeros where the sweep did not reach.
    pub fn gradients(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

impl Network for BoundModel {
    fn features(&self, tape: &mut Tape, inputs: Var) -> Result<Var, TensorError> {
        let v = &self.vars;
        let h = tape.conv2d(inputs, v[0], v[1])?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, v[2], v[3])?;
        let h = tape.relu(h)?;
        let pooled = tape.spatial_mean(h)?;
        let proj = tape.matmul(pooled, v[4])?;
        let proj = tape.add_row(proj, v[5])?;
        tape.relu(proj)
    }

    fn target_head(&self, tape: &mut Tape, features: Var) -> Result<Var, TensorError> {
        if self.vars.len() < 10 {
            return Err(TensorError::InvalidArgument("model has no target head".into()));
        }
        let z = tape.matmul(features, self.vars[8])?;
        tape.add_row(z, self.vars[9])
    }

    fn source_head(&self, tape: &mut Tape, features: Var) -> Result<Var, TensorError> {
        let z = tape.matmul(features, self.vars[6])?;
        tape.add_row(z, self.vars[7])
    }
}
