//! Reproducible synthetic transfer tasks.
//!
//! Each source class owns a smooth random template (a sum of oriented
//! gratings, min-max scaled to [0, 1]); samples are the template plus clipped
//! Gaussian noise. The target task picks a subset of source templates, rotates
//! them and shifts their contrast, relabels them `0..C_tgt` and draws fresh
//! noise.
//!
//! Binary file layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `SMDS` |
//! | 4 | version (u32, currently 1) |
//! | 4 × 3 | height, width, channels (u32) |
//! | 8 | sample count (u64) |
//! | 4 | class count (u32) |
//! | 1 | domain (0 source, 1 target) |
//! | 8 × count × H·W·C | pixel values (f64, HWC order, sample-major) |
//! | 4 × count | labels (u32) |

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SMDS";
pub const DATASET_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 12 + 8 + 4 + 1;

// rng streams carved out of a single task seed
const STREAM_TEMPLATES: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_SELECTION: u64 = 3;
const STREAM_TARGET_TRAIN: u64 = 4;
const STREAM_TARGET_TEST: u64 = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated dataset file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sampling rate must lie in (0, 1], got {0}")]
    InvalidRate(f64),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H × W × C` values in `[0, 1]`, HWC order.
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_count: usize,
    pub domain: Domain,
    pub samples: Vec<Sample>,
}

/// Network-ready mini-batch: inputs `[n, C, H, W]` plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn empty(height: usize, width: usize, channels: usize, class_count: usize, domain: Domain) -> Self {
        Dataset {
            height,
            width,
            channels,
            class_count,
            domain,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Gathers samples into a `[n, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            for ch in 0..c {
                data.extend((0..h * w).map(|p| s.input[p * c + ch]));
            }
            labels.push(s.label);
        }
        Batch {
            inputs: Tensor::new(vec![indices.len(), c, h, w], data).expect("sizes agree"),
            labels,
        }
    }

    pub fn full_batch(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Checks labels, pixel range and sample sizes.
    pub fn validate(&self) -> Result<(), DataError> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.class_count {
                return Err(DataError::Malformed(format!("sample {i} label {} out of range", s.label)));
            }
            if s.input.len() != self.sample_len() {
                return Err(DataError::Malformed(format!("sample {i} has {} values", s.input.len())));
            }
            if s.input.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DataError::Malformed(format!("sample {i} has values outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (self.sample_len() * 8 + 4));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for dim in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.class_count as u32).to_le_bytes());
        out.push(match self.domain {
            Domain::Source => 0,
            Domain::Target => 1,
        });
        for s in &self.samples {
            for v in &s.input {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &self.samples {
            out.extend_from_slice(&(s.label as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
            return Err(DataError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(DataError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let (height, width, channels) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let class_count = u32_at(28) as usize;
        let domain = match bytes[32] {
            0 => Domain::Source,
            1 => Domain::Target,
            d => return Err(DataError::Malformed(format!("unknown domain tag {d}"))),
        };
        let per = height * width * channels;
        let expected = HEADER_LEN + count * (per * 8 + 4);
        if bytes.len() != expected {
            return Err(DataError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let pixels = &bytes[HEADER_LEN..HEADER_LEN + count * per * 8];
        let labels = &bytes[HEADER_LEN + count * per * 8..];
        let samples = (0..count)
            .map(|i| Sample {
                input: pixels[i * per * 8..(i + 1) * per * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                label: u32::from_le_bytes(labels[i * 4..i * 4 + 4].try_into().unwrap()) as usize,
            })
            .collect();
        let ds = Dataset {
            height,
            width,
            channels,
            class_count,
            domain,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Dataset::from_bytes(&fs::read(path)?)
    }

    /// One row per sample: flattened pixels (HWC) then the label.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let header: Vec<String> = (0..self.sample_len()).map(|i| format!("p{i}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for s in &self.samples {
            let row: Vec<String> = s.input.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", row.join(","), s.label)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// Height and width of the square images.
    pub image_size: usize,
    pub channels: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    pub source_per_class: usize,
    /// Target training pool per class, before subsampling.
    pub target_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub rotation_degrees: f64,
    pub contrast_gain: f64,
    pub contrast_offset: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            image_size: 16,
            channels: 1,
            source_classes: 20,
            target_classes: 5,
            source_per_class: 50,
            target_per_class: 40,
            test_per_class: 40,
            noise: 0.35,
            rotation_degrees: 30.0,
            contrast_gain: 0.8,
            contrast_offset: 0.1,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.image_size == 0 || self.channels == 0 {
            return bad("image_size and channels must be positive");
        }
        if self.source_classes == 0 || self.target_classes == 0 {
            return bad("class counts must be positive");
        }
        if self.target_classes > self.source_classes {
            return bad("target_classes must not exceed source_classes");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        if !self.rotation_degrees.is_finite() || !self.contrast_gain.is_finite() || !self.contrast_offset.is_finite() {
            return bad("distortion parameters must be finite");
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn is_identity_distortion(&self) -> bool {
        self.rotation_degrees == 0.0 && self.contrast_gain == 1.0 && self.contrast_offset == 0.0
    }
}

/// Per-class source templates, HWC order.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub images: Vec<Vec<f64>>,
}

pub fn source_templates(spec: &TaskSpec) -> Result<Templates, DataError> {
    spec.validate()?;
    let mut rng = spec.rng(STREAM_TEMPLATES);
    let (n, c) = (spec.image_size, spec.channels);
    let images = (0..spec.source_classes)
        .map(|_| {
            let mut img = vec![0.0; n * n * c];
            for ch in 0..c {
                let plane = grating_plane(n, &mut rng);
                for (p, v) in plane.into_iter().enumerate() {
                    img[p * c + ch] = v;
                }
            }
            img
        })
        .collect();
    Ok(Templates { images })
}

/// Sum of three random oriented sinusoids, min-max scaled to [0, 1].
fn grating_plane(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(1.0..4.0);
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0);
            (freq, theta, phase, amp)
        })
        .collect();
    let mut plane: Vec<f64> = (0..n * n)
        .map(|p| {
            let (y, x) = ((p / n) as f64, (p % n) as f64);
            waves
                .iter()
                .map(|&(f, th, ph, a)| a * (2.0 * PI * f * (x * th.cos() + y * th.sin()) / n as f64 + ph).sin())
                .sum()
        })
        .collect();
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    plane.iter_mut().for_each(|v| *v = (*v - lo) / span);
    plane
}

fn noisy_copies(
    templates: &[Vec<f64>],
    per_class: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let normal = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("validated noise"));
    let mut samples = Vec::with_capacity(templates.len() * per_class);
    for (label, t) in templates.iter().enumerate() {
        for _ in 0..per_class {
            let input = match &normal {
                Some(d) => t.iter().map(|v| (v + d.sample(rng)).clamp(0.0, 1.0)).collect(),
                None => t.clone(),
            };
            samples.push(Sample { input, label });
        }
    }
    samples.shuffle(rng);
    samples
}

pub fn generate_source(spec: &TaskSpec) -> Result<(Dataset, Templates), DataError> {
    let templates = source_templates(spec)?;
    let mut rng = spec.rng(STREAM_SOURCE);
    let samples = noisy_copies(&templates.images, spec.source_per_class, spec.noise, &mut rng);
    let ds = Dataset {
        height: spec.image_size,
        width: spec.image_size,
        channels: spec.channels,
        class_count: spec.source_classes,
        domain: Domain::Source,
        samples,
    };
    Ok((ds, templates))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSplit {
    Train,
    Test,
}

/// Source class indices that become target classes `0..C_tgt`, in order.
pub fn target_class_selection(spec: &TaskSpec) -> Result<Vec<usize>, DataError> {
    spec.validate()?;
    let mut classes: Vec<usize> = (0..spec.source_classes).collect();
    classes.shuffle(&mut spec.rng(STREAM_SELECTION));
    classes.truncate(spec.target_classes);
    Ok(classes)
}

/// Distorted templates of the selected source classes.
pub fn target_templates(spec: &TaskSpec, source: &Templates) -> Result<Templates, DataError> {
    let selection = target_class_selection(spec)?;
    if source.images.len() != spec.source_classes {
        return Err(DataError::InvalidSpec(format!(
            "{} source templates for {} source classes",
            source.images.len(),
            spec.source_classes
        )));
    }
    let images = selection
        .iter()
        .map(|&c| distort(&source.images[c], spec))
        .collect();
    Ok(Templates { images })
}

pub fn derive_target(spec: &TaskSpec, source: &Templates, split: TargetSplit) -> Result<Dataset, DataError> {
    let templates = target_templates(spec, source)?;
    let (stream, per_class) = match split {
        TargetSplit::Train => (STREAM_TARGET_TRAIN, spec.target_per_class),
        TargetSplit::Test => (STREAM_TARGET_TEST, spec.test_per_class),
    };
    let samples = noisy_copies(&templates.images, per_class, spec.noise, &mut spec.rng(stream));
    Ok(Dataset {
        height: spec.image_size,
        width: spec.image_size,
        channels: spec.channels,
        class_count: spec.target_classes,
        domain: Domain::Target,
        samples,
    })
}

/// Rotation about the image centre (bilinear, edge-clamped) followed by
/// `clip(gain·v + offset)`.
fn distort(image: &[f64], spec: &TaskSpec) -> Vec<f64> {
    if spec.is_identity_distortion() {
        return image.to_vec();
    }
    let (n, c) = (spec.image_size, spec.channels);
    let theta = spec.rotation_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let centre = (n as f64 - 1.0) / 2.0;
    let at = |y: usize, x: usize, ch: usize| image[(y * n + x) * c + ch];
    let mut out = vec![0.0; image.len()];
    for y in 0..n {
        for x in 0..n {
            // inverse-map the output pixel into the source image
            let (dx, dy) = (x as f64 - centre, y as f64 - centre);
            let sx = (cos * dx + sin * dy + centre).clamp(0.0, n as f64 - 1.0);
            let sy = (-sin * dx + cos * dy + centre).clamp(0.0, n as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let top = (1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x1, ch);
                let bottom = (1.0 - fx) * at(y1, x0, ch) + fx * at(y1, x1, ch);
                let v = (1.0 - fy) * top + fy * bottom;
                out[(y * n + x) * c + ch] = (spec.contrast_gain * v + spec.contrast_offset).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Samples kept per class at `rate`: `⌈rate·n⌉`, at least one for non-empty
/// classes. A 1e-9 slack absorbs representation error in `rate·n`.
pub fn subsample_count(rate: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let k = (rate * n as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(n)
}

/// Per-class stratified subsample, preserving the original sample order.
pub fn stratified_subsample(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset, DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(DataError::InvalidRate(rate));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; dataset.len()];
    for members in &mut by_class {
        let k = subsample_count(rate, members.len());
        members.shuffle(&mut rng);
        for &i in &members[..k] {
            keep[i] = true;
        }
    }
    let samples = dataset
        .samples
        .iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then(|| s.clone()))
        .collect();
    Ok(Dataset {
        samples,
        ..dataset.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec() -> TaskSpec {
        TaskSpec {
            image_size: 8,
            source_classes: 6,
            target_classes: 3,
            source_per_class: 5,
            target_per_class: 4,
            test_per_class: 3,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn source_counts() {
        let spec = TaskSpec {
            source_classes: 20,
            source_per_class: 50,
            ..TaskSpec::default()
        };
        let (ds, _) = generate_source(&spec).unwrap();
        assert_eq!(ds.len(), 1000);
        assert_eq!(ds.class_counts(), vec![50; 20]);
        ds.validate().unwrap();
    }

    #[test]
    fn noiseless_source_equals_templates() {
        let spec = TaskSpec {
            noise: 0.0,
            ..small_spec()
        };
        let (ds, templates) = generate_source(&spec).unwrap();
        for s in &ds.samples {
            assert_eq!(s.input, templates.images[s.label]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _) = generate_source(&small_spec()).unwrap();
        let (b, _) = generate_source(&small_spec()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn identity_distortion_reuses_templates() {
        let spec = TaskSpec {
            noise: 0.0,
            rotation_degrees: 0.0,
            contrast_gain: 1.0,
            contrast_offset: 0.0,
            ..small_spec()
        };
        let (_, templates) = generate_source(&spec).unwrap();
        let selection = target_class_selection(&spec).unwrap();
        let target = derive_target(&spec, &templates, TargetSplit::Train).unwrap();
        for s in &target.samples {
            assert_eq!(s.input, templates.images[selection[s.label]]);
        }
    }

    #[test]
    fn target_labels_and_selection() {
        let spec = TaskSpec {
            source_classes: 20,
            target_classes: 5,
            ..small_spec()
        };
        let (_, templates) = generate_source(&spec).unwrap();
        let target = derive_target(&spec, &templates, TargetSplit::Train).unwrap();
        let mut labels: Vec<usize> = target.samples.iter().map(|s| s.label).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        target.validate().unwrap();

        let picks: Vec<Vec<usize>> = (0..4)
            .map(|seed| target_class_selection(&TaskSpec { seed, ..spec.clone() }).unwrap())
            .collect();
        assert!(picks.iter().all(|p| p.len() == 5));
        assert!(picks.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn train_and_test_splits_use_independent_noise() {
        let spec = small_spec();
        let (_, templates) = generate_source(&spec).unwrap();
        let train = derive_target(&spec, &templates, TargetSplit::Train).unwrap();
        let test = derive_target(&spec, &templates, TargetSplit::Test).unwrap();
        assert_eq!(test.class_counts(), vec![3; 3]);
        assert_ne!(train.samples[0].input, test.samples[0].input);
    }

    #[test]
    fn rotation_changes_templates() {
        let spec = TaskSpec {
            noise: 0.0,
            ..small_spec()
        };
        let (_, templates) = generate_source(&spec).unwrap();
        let shifted = target_templates(&spec, &templates).unwrap();
        let selection = target_class_selection(&spec).unwrap();
        assert_ne!(shifted.images[0], templates.images[selection[0]]);
        assert!(shifted.images.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(TaskSpec { target_classes: 7, ..small_spec() }.validate().is_err());
        assert!(TaskSpec { noise: -0.1, ..small_spec() }.validate().is_err());
    }

    fn labelled(per_class: &[usize]) -> Dataset {
        let mut ds = Dataset::empty(1, 1, 1, per_class.len(), Domain::Target);
        for (label, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                ds.samples.push(Sample {
                    input: vec![i as f64 / 100.0],
                    label,
                });
            }
        }
        ds
    }

    #[test]
    fn subsample_rates() {
        let ds = labelled(&[10, 10]);
        assert_eq!(stratified_subsample(&ds, 1.0, 3).unwrap(), ds);
        assert_eq!(stratified_subsample(&ds, 0.5, 3).unwrap().class_counts(), vec![5, 5]);
        let ds7 = labelled(&[7, 7, 7]);
        assert_eq!(stratified_subsample(&ds7, 0.15, 3).unwrap().class_counts(), vec![2, 2, 2]);
        assert_eq!(stratified_subsample(&labelled(&[10]), 0.3, 0).unwrap().len(), 3);
        assert_eq!(stratified_subsample(&labelled(&[2, 3]), 0.01, 0).unwrap().class_counts(), vec![1, 1]);
    }

    #[test]
    fn subsample_errors_and_determinism() {
        let ds = labelled(&[10, 4]);
        assert!(matches!(
            stratified_subsample(&labelled(&[]), 0.5, 0),
            Err(DataError::EmptyDataset)
        ));
        assert!(matches!(stratified_subsample(&ds, 0.0, 0), Err(DataError::InvalidRate(_))));
        assert!(matches!(stratified_subsample(&ds, 1.5, 0), Err(DataError::InvalidRate(_))));
        assert_eq!(
            stratified_subsample(&ds, 0.3, 9).unwrap(),
            stratified_subsample(&ds, 0.3, 9).unwrap()
        );
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let (ds, _) = generate_source(&small_spec()).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);

        let empty = Dataset::empty(4, 4, 2, 3, Domain::Source);
        assert_eq!(Dataset::from_bytes(&empty.to_bytes()).unwrap(), empty);

        let mut bytes = ds.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bytes), Err(DataError::BadMagic)));
        let mut bytes = ds.to_bytes();
        bytes[4] = 9;
        assert!(matches!(Dataset::from_bytes(&bytes), Err(DataError::UnsupportedVersion(9))));
        let bytes = ds.to_bytes();
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 3]),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn csv_export_shape() {
        let ds = labelled(&[2, 1]);
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "p0,label");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].ends_with(",1"));
    }

    #[test]
    fn batch_layout_is_channel_major() {
        let mut ds = Dataset::empty(1, 2, 2, 1, Domain::Source);
        // HWC: pixel0 = (a0, b0), pixel1 = (a1, b1)
        ds.samples.push(Sample {
            input: vec![0.1, 0.2, 0.3, 0.4],
            label: 0,
        });
        let b = ds.batch(&[0]);
        assert_eq!(b.inputs.shape(), &[1, 2, 1, 2]);
        assert_eq!(b.inputs.data(), &[0.1, 0.3, 0.2, 0.4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn persistence_round_trip(seed in 0u64..1000, noise in 0.0f64..0.5, per_class in 0usize..4) {
            let spec = TaskSpec { seed, noise, source_per_class: per_class, ..small_spec() };
            let (ds, _) = generate_source(&spec).unwrap();
            prop_assert_eq!(Dataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
        }

        #[test]
        fn nested_subsample_counts(
            counts in prop::collection::vec(1usize..30, 1..5),
            r1 in 0.05f64..=1.0,
            r2 in 0.05f64..=1.0,
            seed in 0u64..100,
        ) {
            let ds = labelled(&counts);
            let twice = stratified_subsample(&stratified_subsample(&ds, r1, seed).unwrap(), r2, seed + 1).unwrap();
            let expected: Vec<usize> = counts.iter().map(|&n| subsample_count(r2, subsample_count(r1, n))).collect();
            prop_assert_eq!(twice.class_counts(), expected);
        }
    }
}
