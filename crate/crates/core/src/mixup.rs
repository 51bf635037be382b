//! The mix operator, Beta(α, α) coefficient draws and in-batch pairing.
//!
//! `Mix_λ(u, v) = (1 − λ)·u + λ·v`, so `λ = 0` returns `u`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixupError {
    #[error("mix: operands have {0} and {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("mix coefficient {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("Beta shape parameter must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("cannot pair an empty batch")]
    EmptyBatch,
}

pub fn mix(u: &[f64], v: &[f64], lambda: f64) -> Result<Vec<f64>, MixupError> {
    if u.len() != v.len() {
        return Err(MixupError::ShapeMismatch(u.len(), v.len()));
    }
    check_lambda(lambda)?;
    Ok(u.iter().zip(v).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect())
}

pub(crate) fn check_lambda(lambda: f64) -> Result<(), MixupError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MixupError::LambdaOutOfRange(lambda));
    }
    Ok(())
}

/// `λ ∼ Beta(α, α)` drawn as `X / (X + Y)` with `X, Y ∼ Gamma(α, 1)`.
#[derive(Debug, Clone)]
pub struct BetaSampler {
    alpha: f64,
    gamma: Gamma<f64>,
}

impl BetaSampler {
    pub fn new(alpha: f64) -> Result<Self, MixupError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(MixupError::InvalidAlpha(alpha));
        }
        let gamma = Gamma::new(alpha, 1.0).map_err(|_| MixupError::InvalidAlpha(alpha))?;
        Ok(BetaSampler { alpha, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = self.gamma.sample(rng);
        let y = self.gamma.sample(rng);
        let total = x + y;
        // both draws can underflow to zero for very small α
        if total > 0.0 {
            (x / total).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }
}

pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64, MixupError> {
    Ok(BetaSampler::new(alpha)?.sample(rng))
}

/// Partner assignment for a batch: element `i` mixes with `partner[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    partner: Vec<usize>,
}

impl Pairing {
    /// Every element paired with itself.
    pub fn identity(n: usize) -> Self {
        Pairing {
            partner: (0..n).collect(),
        }
    }

    pub fn from_partners(partner: Vec<usize>) -> Self {
        Pairing { partner }
    }

    pub fn partners(&self) -> &[usize] {
        &self.partner
    }

    pub fn len(&self) -> usize {
        self.partner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partner.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.partner.iter().copied().enumerate()
    }
}

/// Uniform random permutation of the batch; self-pairs are allowed.
pub fn pair_batch<R: Rng + ?Sized>(batch_len: usize, rng: &mut R) -> Result<Pairing, MixupError> {
    if batch_len == 0 {
        return Err(MixupError::EmptyBatch);
    }
    let mut partner: Vec<usize> = (0..batch_len).collect();
    partner.shuffle(rng);
    Ok(Pairing { partner })
}
