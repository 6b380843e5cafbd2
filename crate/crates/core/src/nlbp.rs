//! Non-linear back-projection: exact, gentle and naive updates, adaptive
//! guidance strength, and attribute-target helpers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseMatrix;
use crate::spnn::{CompletionPoint, PinvMode, SpnnError, SpnnModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NlbpError {
    #[error("guidance scale {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("attribute index {index} out of range for {len} attributes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("variance of attribute {index} is degenerate ({variance:.3e})")]
    DegenerateVariance { index: usize, variance: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error(transparent)]
    Spnn(#[from] SpnnError),
}

/// Which pseudo-inverse drives the back-projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinvChoice {
    LearnedR,
    #[default]
    Natural,
    /// `G⁻¹([y | 0])`.
    Constant,
    /// The learned chain with freshly initialized `r` nets.
    RandomR,
}

impl PinvChoice {
    /// Model and mode realizing this choice. `RandomR` clones the model with
    /// new `r` nets drawn from `seed`; the completion `G` is unchanged.
    pub fn resolve(self, m: &SpnnModel, seed: u64) -> (SpnnModel, PinvMode) {
        match self {
            PinvChoice::LearnedR => (m.clone(), PinvMode::LearnedR),
            PinvChoice::Natural => (m.clone(), PinvMode::Natural),
            PinvChoice::Constant => (m.clone(), PinvMode::Constant(vec![0.0; m.null_dim()])),
            PinvChoice::RandomR => (m.with_random_r(&mut crate::nn::Rng::new(seed)), PinvMode::LearnedR),
        }
    }
}

/// Form of the guidance update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    #[default]
    Gentle,
    /// `x + λ·(g†(y) − g†(g(x)))`; `λ = 1` is the verbatim naive update.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlbpConfig {
    pub lambda: f64,
    pub adaptive: bool,
    pub alpha: f64,
    pub gamma: f64,
    pub delta_space: DeltaSpace,
    /// Guidance is applied at timesteps `t <= guidance_start_t`.
    pub guidance_start_t: usize,
    pub pinv_mode: PinvChoice,
    pub update: UpdateKind,
}

impl Default for NlbpConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            adaptive: false,
            alpha: 0.8,
            gamma: 2.0,
            delta_space: DeltaSpace::Probability,
            guidance_start_t: 80,
            pinv_mode: PinvChoice::Natural,
            update: UpdateKind::Gentle,
        }
    }
}

impl NlbpConfig {
    pub fn validate(&self) -> Result<(), NlbpError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(NlbpError::InvalidLambda(self.lambda));
        }
        if self.adaptive {
            adaptive_lambda(0.0, self.alpha, self.gamma)?;
        }
        Ok(())
    }
}

/// `x + λ·(g†(y) − g†(g(x)))`.
pub fn nlbp_naive_scaled(m: &SpnnModel, x: &[f64], y: &[f64], lambda: f64, mode: &PinvMode) -> Result<Vec<f64>, NlbpError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(NlbpError::InvalidLambda(lambda));
    }
    let gx = m.forward(x)?;
    let toward = m.pinv(y, mode)?;
    let back = m.pinv(&gx, mode)?;
    Ok(x.iter()
        .zip(toward.iter().zip(&back))
        .map(|(x, (a, b))| x + lambda * (a - b))
        .collect())
}

/// Smallest admissible `Σ_nn` for [`covariance_adjust`].
pub const MIN_VARIANCE: f64 = 1e-12;

/// `G(x') = G(x) + λ·[G(g†(y)) − G(g†(g(x)))]`, returned as `x'`.
fn completed_update(m: &SpnnModel, x: &[f64], y: &[f64], lambda: f64, mode: &PinvMode) -> Result<Vec<f64>, SpnnError> {
    let gx = m.completion(x)?;
    let back = m.completion(&m.pinv(&gx.range, mode)?)?;
    let toward = m.completion(&m.pinv(y, mode)?)?;
    let step = |cur: &[f64], a: &[f64], b: &[f64]| -> Vec<f64> {
        cur.iter()
            .zip(a.iter().zip(b))
            .map(|(c, (a, b))| c + lambda * (a - b))
            .collect()
    };
    m.completion_inverse(&CompletionPoint {
        range: step(&gx.range, &toward.range, &back.range),
        null: step(&gx.null, &toward.null, &back.null),
    })
}

/// `x' = G⁻¹(G(x) − G(g†(g(x))) + G(g†(y)))`.
pub fn nlbp_exact(m: &SpnnModel, x: &[f64], y: &[f64], mode: &PinvMode) -> Result<Vec<f64>, NlbpError> {
    Ok(completed_update(m, x, y, 1.0, mode)?)
}

/// `x' = G⁻¹(G(x) + λ[G(g†(y)) − G(g†(g(x)))])`, so that
/// `g(x') = (1 − λ)·g(x) + λ·y`.
pub fn nlbp_gentle(m: &SpnnModel, x: &[f64], y: &[f64], lambda: f64, mode: &PinvMode) -> Result<Vec<f64>, NlbpError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(NlbpError::InvalidLambda(lambda));
    }
    Ok(completed_update(m, x, y, lambda, mode)?)
}

/// Additive update in input space, `x' = x + g†(y) − g†(g(x))`.
/// Not guaranteed to land on the pre-image of `y`.
pub fn nlbp_naive(m: &SpnnModel, x: &[f64], y: &[f64], mode: &PinvMode) -> Result<Vec<f64>, NlbpError> {
    nlbp_naive_scaled(m, x, y, 1.0, mode)
}

/// `λ = α·tanh(γ·δ)`.
pub fn adaptive_lambda(delta: f64, alpha: f64, gamma: f64) -> Result<f64, NlbpError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(NlbpError::InvalidArgument("alpha must lie in (0, 1]"));
    }
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(NlbpError::InvalidArgument("gamma must be positive"));
    }
    Ok(alpha * (gamma * delta).tanh())
}

/// Space in which the attribute gap `δ` is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSpace {
    #[default]
    Probability,
    Logit,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `δ_n = |target_n − current_n|`, in probability or logit space.
pub fn attribute_delta(current: &[f64], target: &[f64], n: usize, space: DeltaSpace) -> Result<f64, NlbpError> {
    if n >= current.len() || n >= target.len() {
        return Err(NlbpError::IndexOutOfRange {
            index: n,
            len: current.len().min(target.len()),
        });
    }
    Ok(match space {
        DeltaSpace::Probability => (sigmoid(target[n]) - sigmoid(current[n])).abs(),
        DeltaSpace::Logit => (target[n] - current[n]).abs(),
    })
}

/// Empirical attribute moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub cov: DenseMatrix,
}

impl AttributeStats {
    /// Population moments of the given rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NlbpError> {
        let Some(first) = rows.first() else {
            return Err(NlbpError::InvalidArgument("no rows"));
        };
        let k = first.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(NlbpError::InvalidArgument("ragged rows"));
        }
        let n = rows.len() as f64;
        let mut mu = vec![0.0; k];
        for r in rows {
            for (m, v) in mu.iter_mut().zip(r) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n);
        let mut cov = DenseMatrix::zeros(k, k);
        for r in rows {
            for i in 0..k {
                let di = r[i] - mu[i];
                for j in i..k {
                    let c = cov.get(i, j) + di * (r[j] - mu[j]);
                    cov.set(i, j, c);
                }
            }
        }
        for i in 0..k {
            for j in i..k {
                let c = cov.get(i, j) / n;
                cov.set(i, j, c);
                cov.set(j, i, c);
            }
        }
        let sigma = (0..k).map(|i| cov.get(i, i).max(0.0).sqrt()).collect();
        Ok(Self { mu, sigma, cov })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        self.cov.get(i, j) / (self.sigma[i] * self.sigma[j])
    }
}

/// Copy of `y_cur` with entry `n` moved to `μ_n + 2σ_n`.
pub fn dynamic_target(y_cur: &[f64], n: usize, stats: &AttributeStats) -> Result<Vec<f64>, NlbpError> {
    if n >= y_cur.len() || n >= stats.len() {
        return Err(NlbpError::IndexOutOfRange {
            index: n,
            len: y_cur.len().min(stats.len()),
        });
    }
    let mut y = y_cur.to_vec();
    y[n] = stats.mu[n] + 2.0 * stats.sigma[n];
    Ok(y)
}

/// Spreads a change of attribute `n` to correlated attributes:
/// `Δy_j = Σ_jn / Σ_nn · Δy_n`.
pub fn covariance_adjust(delta_n: f64, n: usize, stats: &AttributeStats) -> Result<Vec<f64>, NlbpError> {
    let k = stats.len();
    if n >= k {
        return Err(NlbpError::IndexOutOfRange { index: n, len: k });
    }
    let var = stats.cov.get(n, n);
    if var <= MIN_VARIANCE {
        return Err(NlbpError::DegenerateVariance { index: n, variance: var });
    }
    let mut d: Vec<f64> = (0..k).map(|j| stats.cov.get(j, n) / var * delta_n).collect();
    d[n] = delta_n;
    Ok(d)
}
