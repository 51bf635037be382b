//! Interpolation-loss estimates on the label and feature layers, and the
//! PCA-projected feature trajectories along interpolation paths.
//!
//! For a pair `(x, x′)`, mix ratios `δ1, δ2` and a weight `λ`, the ratio is
//!
//! ```text
//! ‖f(Mix_{λδ1+(1−λ)δ2}) − (λ·f(Mix_δ1) + (1−λ)·f(Mix_δ2))‖ / ‖f(Mix_δ1) − f(Mix_δ2)‖
//! ```
//!
//! with unsquared Euclidean norms, so scaling `f` leaves it unchanged.
//! Draws whose denominator falls below `denom_epsilon` are skipped and
//! counted instead of being clamped.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelWeights;
use crate::tensor::{softmax_row, Tensor, TensorError};

/// Interpolation coefficients of the feature trajectories.
pub const TRAJECTORY_COEFFICIENTS: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate denominator {0:e}")]
    Degenerate(f64),
    #[error("every interpolation draw was degenerate ({0} draws)")]
    AllDegenerate(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    TooFewPoints(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    /// Target-head outputs.
    #[default]
    Label,
    /// Feature-extractor outputs.
    Feature,
}

/// How label-layer outputs are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSpace {
    #[default]
    Logits,
    Softmax,
}

/// Closed-open uniform range `[low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Uniform {
    pub low: f64,
    pub high: f64,
}

impl Uniform {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.low + (self.high - self.low) * rng.random::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlConfig {
    pub layer: Layer,
    pub label_space: LabelSpace,
    pub delta: Uniform,
    pub lambda: Uniform,
    pub n_pairs: usize,
    pub n_delta_draws: usize,
    pub n_lambda_draws: usize,
    pub denom_epsilon: f64,
    pub seed: u64,
}

impl Default for IlConfig {
    fn default() -> Self {
        IlConfig {
            layer: Layer::Label,
            label_space: LabelSpace::Logits,
            delta: Uniform { low: 0.5, high: 1.0 },
            lambda: Uniform { low: 0.0, high: 1.0 },
            n_pairs: 200,
            n_delta_draws: 2,
            n_lambda_draws: 4,
            denom_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl IlConfig {
    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        let bad = |m: String| Err(DiagnosticsError::InvalidConfig(m));
        for (name, u) in [("delta", self.delta), ("lambda", self.lambda)] {
            if !(0.0 <= u.low && u.low <= u.high && u.high <= 1.0) {
                return bad(format!("{name} range [{}, {}) must lie within [0, 1]", u.low, u.high));
            }
        }
        if self.n_pairs == 0 || self.n_delta_draws == 0 || self.n_lambda_draws == 0 {
            return bad("sample counts must be at least 1".into());
        }
        if !(self.denom_epsilon > 0.0 && self.denom_epsilon.is_finite()) {
            return bad("denom_epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn total_draws(&self) -> usize {
        self.n_pairs * self.n_delta_draws * self.n_lambda_draws
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlReport {
    pub mean: f64,
    pub std: f64,
    pub std_error: f64,
    /// Draws that survived the denominator guard.
    pub n_effective: usize,
    pub n_degenerate: usize,
    pub config: IlConfig,
}

/// The distance ratio for one draw; `Err(Degenerate)` when `‖y1 − y2‖ < ε`.
pub fn normalized_interp_distance(y_it: &[f64], y1: &[f64], y2: &[f64], lambda: f64, epsilon: f64) -> Result<f64, DiagnosticsError> {
    if y_it.len() != y1.len() || y1.len() != y2.len() {
        return Err(DiagnosticsError::ShapeMismatch(format!(
            "lengths {}, {}, {}",
            y_it.len(),
            y1.len(),
            y2.len()
        )));
    }
    let denom = y1.iter().zip(y2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    if !(denom >= epsilon) {
        return Err(DiagnosticsError::Degenerate(denom));
    }
    let numer = y_it
        .iter()
        .zip(y1.iter().zip(y2))
        .map(|(t, (a, b))| (t - (lambda * a + (1.0 - lambda) * b)).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(numer / denom)
}

/// Maps a batch `[n, ...]` to outputs `[n, d]`.
pub trait OutputFn {
    fn outputs(&self, inputs: &Tensor) -> Result<Tensor, DiagnosticsError>;
}

impl<F> OutputFn for F
where
    F: Fn(&Tensor) -> Result<Tensor, DiagnosticsError>,
{
    fn outputs(&self, inputs: &Tensor) -> Result<Tensor, DiagnosticsError> {
        self(inputs)
    }
}

/// A trained model read at the label or feature layer.
pub struct ModelOutput<'a> {
    pub weights: &'a ModelWeights,
    pub layer: Layer,
    pub label_space: LabelSpace,
}

impl OutputFn for ModelOutput<'_> {
    fn outputs(&self, inputs: &Tensor) -> Result<Tensor, DiagnosticsError> {
        Ok(match (self.layer, self.label_space) {
            (Layer::Feature, _) => self.weights.features(inputs)?,
            (Layer::Label, LabelSpace::Logits) => self.weights.target_logits(inputs)?,
            (Layer::Label, LabelSpace::Softmax) => {
                let logits = self.weights.target_logits(inputs)?;
                let data = (0..logits.rows()).flat_map(|i| softmax_row(logits.row(i))).collect();
                Tensor::new(logits.shape().to_vec(), data)?
            }
        })
    }
}

/// `f(x) = W·flatten(x) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineModel {
    /// `[in_dim, out_dim]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineModel {
    pub fn random(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-scale..scale)).collect();
        let b = (0..out_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        AffineModel {
            weight: Tensor::new(vec![in_dim, out_dim], w).expect("sizes agree"),
            bias: Tensor::from_vec(b),
        }
    }
}

impl OutputFn for AffineModel {
    fn outputs(&self, inputs: &Tensor) -> Result<Tensor, DiagnosticsError> {
        let n = inputs.rows();
        let (in_dim, out_dim) = (self.weight.shape()[0], self.weight.shape()[1]);
        if inputs.row_width() != in_dim {
            return Err(DiagnosticsError::ShapeMismatch(format!(
                "affine model expects {in_dim} inputs, got {}",
                inputs.row_width()
            )));
        }
        let (w, b) = (self.weight.data(), self.bias.data());
        let mut out = Vec::with_capacity(n * out_dim);
        for row in (0..n).map(|i| inputs.row(i)) {
            out.extend((0..out_dim).map(|o| b[o] + row.iter().enumerate().map(|(i, x)| x * w[i * out_dim + o]).sum::<f64>()));
        }
        Ok(Tensor::new(vec![n, out_dim], out)?)
    }
}

/// Source of the random draws of the estimator, in the order pair, then
/// `(δ1, δ2)`, then `λ`.
pub trait IlSampler {
    fn pair(&mut self, population: usize) -> (usize, usize);
    fn deltas(&mut self) -> (f64, f64);
    fn lambda(&mut self) -> f64;
}

/// Seeded sampler drawing distinct pair members and uniform coefficients.
pub struct RandomSampler {
    rng: ChaCha8Rng,
    delta: Uniform,
    lambda: Uniform,
}

impl RandomSampler {
    pub fn new(config: &IlConfig) -> Self {
        RandomSampler {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            delta: config.delta,
            lambda: config.lambda,
        }
    }
}

impl IlSampler for RandomSampler {
    fn pair(&mut self, population: usize) -> (usize, usize) {
        let i = self.rng.random_range(0..population);
        let j = (i + self.rng.random_range(1..population)) % population;
        (i, j)
    }

    fn deltas(&mut self) -> (f64, f64) {
        (self.delta.sample(&mut self.rng), self.delta.sample(&mut self.rng))
    }

    fn lambda(&mut self) -> f64 {
        self.lambda.sample(&mut self.rng)
    }
}

pub fn estimate_il<M: OutputFn + ?Sized>(model: &M, inputs: &Tensor, config: &IlConfig) -> Result<IlReport, DiagnosticsError> {
    estimate_il_with(model, inputs, config, &mut RandomSampler::new(config))
}

/// Monte-Carlo interpolation loss over the rows of `inputs`, drawing from
/// an arbitrary sampler.
pub fn estimate_il_with<M, S>(model: &M, inputs: &Tensor, config: &IlConfig, sampler: &mut S) -> Result<IlReport, DiagnosticsError>
where
    M: OutputFn + ?Sized,
    S: IlSampler + ?Sized,
{
    config.validate()?;
    let population = inputs.shape().first().copied().unwrap_or(0);
    if population < 2 {
        return Err(DiagnosticsError::TooFewPoints(format!(
            "interpolation loss needs at least 2 samples, got {population}"
        )));
    }
    let sample_shape = &inputs.shape()[1..];
    let width = inputs.numel() / population;
    let row = |i: usize| &inputs.data()[i * width..(i + 1) * width];

    let per_delta = 2 + config.n_lambda_draws;
    let mut ratios = Vec::with_capacity(config.total_draws());
    let mut degenerate = 0usize;
    for _ in 0..config.n_pairs {
        let (i, j) = sampler.pair(population);
        let (x, x2) = (row(i), row(j));
        let mut coefficients = Vec::with_capacity(config.n_delta_draws * per_delta);
        let mut lambdas = Vec::with_capacity(config.n_delta_draws * config.n_lambda_draws);
        for _ in 0..config.n_delta_draws {
            let (d1, d2) = sampler.deltas();
            coefficients.extend([d1, d2]);
            for _ in 0..config.n_lambda_draws {
                let l = sampler.lambda();
                lambdas.push(l);
                coefficients.push(l * d1 + (1.0 - l) * d2);
            }
        }
        let mut data = Vec::with_capacity(coefficients.len() * width);
        for &c in &coefficients {
            data.extend(x.iter().zip(x2).map(|(a, b)| (1.0 - c) * a + c * b));
        }
        let mut shape = vec![coefficients.len()];
        shape.extend_from_slice(sample_shape);
        let out = model.outputs(&Tensor::new(shape, data)?)?;
        for d in 0..config.n_delta_draws {
            let base = d * per_delta;
            let (y1, y2) = (out.row(base), out.row(base + 1));
            for l in 0..config.n_lambda_draws {
                let lambda = lambdas[d * config.n_lambda_draws + l];
                match normalized_interp_distance(out.row(base + 2 + l), y1, y2, lambda, config.denom_epsilon) {
                    Ok(r) => ratios.push(r),
                    Err(DiagnosticsError::Degenerate(_)) => degenerate += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    if ratios.is_empty() {
        return Err(DiagnosticsError::AllDegenerate(degenerate));
    }
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let std = if ratios.len() > 1 {
        (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(IlReport {
        mean,
        std,
        std_error: std / n.sqrt(),
        n_effective: ratios.len(),
        n_degenerate: degenerate,
        config: config.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    pub projected: Vec<[f64; 2]>,
    /// Unit principal directions, largest variance first.
    pub components: [Vec<f64>; 2],
    /// Variance fractions of the two components.
    pub explained: [f64; 2],
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
}

/// Mean-centred projection onto the top two eigenvectors of the sample
/// covariance, each oriented so its first nonzero loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Pca2d, DiagnosticsError> {
    if points.len() < 2 {
        return Err(DiagnosticsError::TooFewPoints(format!("PCA needs at least 2 points, got {}", points.len())));
    }
    let dim = points[0].len();
    if dim < 2 {
        return Err(DiagnosticsError::TooFewPoints(format!("PCA needs dimension at least 2, got {dim}")));
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(DiagnosticsError::ShapeMismatch(format!("point of dimension {} among dimension {dim}", p.len())));
    }
    let n = points.len();
    let mean: Vec<f64> = (0..dim).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, dim, |i, k| points[i][k] - mean[k]);
    let cov = (centred.transpose() * &centred) / (n as f64 - 1.0);
    let total_variance = cov.trace();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let component = |rank: usize| -> Vec<f64> {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[rank]).iter().copied().collect();
        if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        v
    };
    let components = [component(0), component(1)];
    let projected = (0..n)
        .map(|i| {
            let row = centred.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect();
    let explained = if total_variance > 0.0 {
        [
            eigenvalues[0].max(0.0) / total_variance,
            eigenvalues[1].max(0.0) / total_variance,
        ]
    } else {
        [0.0, 0.0]
    };
    Ok(Pca2d {
        projected,
        components,
        explained,
        eigenvalues,
        total_variance,
    })
}

/// Largest perpendicular distance from the points to their best-fit line.
pub fn max_line_residual(points: &[[f64; 2]]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 3 {
        return 0.0;
    }
    let (mx, my) = (
        points.iter().map(|p| p[0]).sum::<f64>() / n,
        points.iter().map(|p| p[1]).sum::<f64>() / n,
    );
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    // Direction of the principal axis of the 2×2 scatter matrix.
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (ux, uy) = (angle.cos(), angle.sin());
    points
        .iter()
        .map(|p| ((p[0] - mx) * uy - (p[1] - my) * ux).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub pair_id: usize,
    pub lambda: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    pub explained: [f64; 2],
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,lambda,x,y\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.pair_id, r.lambda, r.x, r.y);
        }
        out
    }

    pub fn pair_points(&self, pair_id: usize) -> Vec<[f64; 2]> {
        self.rows.iter().filter(|r| r.pair_id == pair_id).map(|r| [r.x, r.y]).collect()
    }
}

/// Features of `Mix_c(x, x′)` at each trajectory coefficient for every pair,
/// pooled and projected to 2-D.
pub fn feature_interp_trajectory<M: OutputFn + ?Sized>(
    extractor: &M,
    inputs: &Tensor,
    pairs: &[(usize, usize)],
) -> Result<Trajectory, DiagnosticsError> {
    if pairs.is_empty() {
        return Err(DiagnosticsError::TooFewPoints("trajectory needs at least one pair".into()));
    }
    let n = inputs.shape().first().copied().unwrap_or(0);
    let width = inputs.numel() / n.max(1);
    if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= n || *j >= n) {
        return Err(DiagnosticsError::ShapeMismatch(format!("pair ({i}, {j}) outside {n} samples")));
    }
    let row = |i: usize| &inputs.data()[i * width..(i + 1) * width];
    let mut data = Vec::with_capacity(pairs.len() * TRAJECTORY_COEFFICIENTS.len() * width);
    for &(i, j) in pairs {
        for c in TRAJECTORY_COEFFICIENTS {
            data.extend(row(i).iter().zip(row(j)).map(|(a, b)| (1.0 - c) * a + c * b));
        }
    }
    let mut shape = vec![pairs.len() * TRAJECTORY_COEFFICIENTS.len()];
    shape.extend_from_slice(&inputs.shape()[1..]);
    let features = extractor.outputs(&Tensor::new(shape, data)?)?;
    let points: Vec<Vec<f64>> = (0..features.rows()).map(|i| features.row(i).to_vec()).collect();
    let pca = pca_2d(&points)?;
    let rows = pca
        .projected
        .iter()
        .enumerate()
        .map(|(k, p)| TrajectoryRow {
            pair_id: k / TRAJECTORY_COEFFICIENTS.len(),
            lambda: TRAJECTORY_COEFFICIENTS[k % TRAJECTORY_COEFFICIENTS.len()],
            x: p[0],
            y: p[1],
        })
        .collect();
    Ok(Trajectory {
        rows,
        explained: pca.explained,
    })
}
