//! Toy DDPM prior (ε-prediction MLP) and the NLBP-guided ancestral sampler.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::max_abs_diff;
use crate::nlbp::{
    adaptive_lambda, attribute_delta, covariance_adjust, dynamic_target, nlbp_gentle, nlbp_naive_scaled,
    sigmoid, AttributeStats, NlbpConfig, NlbpError, UpdateKind,
};
use crate::nn::{Activation, AdamConfig, AdamState, Head, MlpNet, NnError, Rng};
use crate::par::{self, Exec};
use crate::spnn::{PinvMode, SpnnError, SpnnModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid sampler setting: {0}")]
    Config(String),
    #[error("non-finite state at t = {t} (grid step {step})")]
    NonFinite { t: usize, step: usize },
    #[error("non-finite denoiser loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: u64 },
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Nlbp(#[from] NlbpError),
    #[error(transparent)]
    Spnn(#[from] SpnnError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Linear-β noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Desk-scale horizon.
pub const DESK_T: usize = 100;
/// The reference schedule spans 1e-4..2e-2 over 1000 steps; scaling β by ten
/// over 100 steps keeps the total injected noise.
pub const DESK_BETA_START: f64 = 1e-3;
pub const DESK_BETA_END: f64 = 0.2;

impl DiffusionSchedule {
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if t_steps < 2 {
            return Err(DiffusionError::Schedule("need at least two steps".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Schedule("need 0 < beta_start <= beta_end < 1".into()));
        }
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn desk() -> Self {
        Self::linear(DESK_T, DESK_BETA_START, DESK_BETA_END).expect("valid constants")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &[f64], t: usize, noise: &[f64], sched: &DiffusionSchedule) -> Vec<f64> {
    let ab = sched.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect()
}

/// `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &[f64], t: usize, eps_hat: &[f64], sched: &DiffusionSchedule) -> Vec<f64> {
    let ab = sched.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect()
}

/// Re-noises `x_t` forward by `length` steps with
/// `q(x_{t+L} | x_t) = N(√(ᾱ_{t+L}/ᾱ_t)·x_t, (1 − ᾱ_{t+L}/ᾱ_t)·I)`.
pub fn time_travel(
    x_t: &[f64],
    t: usize,
    length: usize,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>, DiffusionError> {
    if t + length >= sched.len() {
        return Err(DiffusionError::Config(format!("cannot travel from {t} by {length} with T = {}", sched.len())));
    }
    if length == 0 {
        return Ok(x_t.to_vec());
    }
    let ratio = sched.alpha_bars[t + length] / sched.alpha_bars[t];
    let (a, b) = (ratio.sqrt(), (1.0 - ratio).sqrt());
    Ok(x_t.iter().map(|x| a * x + b * rng.normal()).collect())
}

/// ε-prediction network: MLP over `[x | sinusoidal(t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub net: MlpNet,
    pub data_dim: usize,
    pub emb_dim: usize,
}

pub const DENOISER_WIDTH: usize = 128;
pub const DENOISER_DEPTH: usize = 3;
pub const TIME_EMBEDDING_DIM: usize = 16;

/// `[sin(t·ω_i), cos(t·ω_i)]` with `ω_i = 10000^(−i/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = Vec::with_capacity(dim);
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        e.push((t as f64 * w).sin());
    }
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        e.push((t as f64 * w).cos());
    }
    e
}

impl Denoiser {
    pub fn new(data_dim: usize, rng: &mut Rng) -> Self {
        Self::with_shape(data_dim, DENOISER_WIDTH, DENOISER_DEPTH, TIME_EMBEDDING_DIM, rng)
    }

    pub fn with_shape(data_dim: usize, width: usize, depth: usize, emb_dim: usize, rng: &mut Rng) -> Self {
        let mut dims = vec![data_dim + emb_dim];
        dims.extend(std::iter::repeat_n(width, depth));
        dims.push(data_dim);
        Self {
            net: MlpNet::new(&dims, Activation::Relu, Head::Linear, rng),
            data_dim,
            emb_dim,
        }
    }

    pub fn from_net(net: MlpNet, data_dim: usize, emb_dim: usize) -> Result<Self, DiffusionError> {
        if net.input_dim() != data_dim + emb_dim || net.output_dim() != data_dim {
            return Err(DiffusionError::Dim(format!(
                "net maps {} → {}, expected {} → {}",
                net.input_dim(),
                net.output_dim(),
                data_dim + emb_dim,
                data_dim
            )));
        }
        Ok(Self { net, data_dim, emb_dim })
    }

    fn input(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut v = x.to_vec();
        v.extend(timestep_embedding(t, self.emb_dim));
        v
    }

    pub fn predict(&self, x_t: &[f64], t: usize) -> Vec<f64> {
        self.net.eval(&self.input(x_t, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub warmup_steps: u64,
    /// Exponential moving average of the weights; zero disables.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            grad_clip: 1.0,
            warmup_steps: 100,
            ema_decay: 0.999,
            seed: 556,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

/// Per-sample `‖ε − ε_θ(x_t, t)‖² / dim` with its own noise stream.
fn denoise_term(den: &Denoiser, x0: &[f64], sched: &DiffusionSchedule, rng: &mut Rng, grads: Option<&mut [f64]>) -> f64 {
    let t = rng.below(sched.len());
    let noise = rng.normal_vec(x0.len());
    let x_t = q_sample(x0, t, &noise, sched);
    let (eps_hat, tape) = den.net.trace(&den.input(&x_t, t));
    let d = x0.len() as f64;
    let diff: Vec<f64> = eps_hat.iter().zip(&noise).map(|(a, b)| a - b).collect();
    if let Some(g) = grads {
        let up: Vec<f64> = diff.iter().map(|v| 2.0 * v / d).collect();
        den.net.accumulate(&tape, &up, g);
    }
    diff.iter().map(|v| v * v).sum::<f64>() / d
}

/// Mean denoising loss over `samples` with noise fixed by `seed`.
pub fn denoising_loss(den: &Denoiser, samples: &[Vec<f64>], sched: &DiffusionSchedule, seed: u64) -> f64 {
    let base = Rng::new(seed);
    let parts = par::map_range(Exec::Parallel, samples.len(), |i| {
        denoise_term(den, &samples[i], sched, &mut base.split(i as u64), None)
    });
    parts.iter().sum::<f64>() / samples.len().max(1) as f64
}

/// [`denoising_loss`] with its gradient over the denoiser weights.
pub fn denoising_loss_grad(den: &Denoiser, samples: &[Vec<f64>], sched: &DiffusionSchedule, seed: u64) -> (f64, Vec<f64>) {
    let base = Rng::new(seed);
    let n_params = den.net.param_count();
    let parts = par::map_range(Exec::Parallel, samples.len(), |i| {
        let mut g = vec![0.0; n_params];
        let v = denoise_term(den, &samples[i], sched, &mut base.split(i as u64), Some(&mut g));
        (v, g)
    });
    let inv = 1.0 / samples.len().max(1) as f64;
    let mut grads = vec![0.0; n_params];
    let mut loss = 0.0;
    for (v, g) in parts {
        loss += v;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    grads.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, grads)
}

/// Minimizes `E‖ε − ε_θ(x_t, t)‖²` with Adam.
pub fn train_denoiser(
    den: &mut Denoiser,
    train: &[Vec<f64>],
    val: Option<&[Vec<f64>]>,
    sched: &DiffusionSchedule,
    cfg: &DenoiserConfig,
) -> Result<Vec<DenoiserMetrics>, DiffusionError> {
    if train.is_empty() {
        return Err(DiffusionError::Config("empty training set".into()));
    }
    if train.iter().any(|x| x.len() != den.data_dim) {
        return Err(DiffusionError::Dim("sample length differs from denoiser".into()));
    }
    let n_params = den.net.param_count();
    let mut opt = AdamState::new(
        n_params,
        AdamConfig {
            lr: cfg.lr,
            grad_clip: cfg.grad_clip,
            warmup_steps: cfg.warmup_steps,
            ..AdamConfig::default()
        },
    );
    let mut ema = den.net.params().to_vec();
    let root = Rng::new(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut erng = root.split(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        erng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let brng = erng.split(b as u64 + 1);
            let net: &Denoiser = den;
            let parts = par::map_range(Exec::Parallel, batch.len(), |k| {
                let mut g = vec![0.0; n_params];
                let v = denoise_term(net, &train[batch[k]], sched, &mut brng.split(k as u64), Some(&mut g));
                (v, g)
            });
            let mut grads = vec![0.0; n_params];
            let mut loss = 0.0;
            for (v, g) in parts {
                loss += v;
                for (a, b) in grads.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            if !loss.is_finite() {
                return Err(DiffusionError::Diverged {
                    epoch,
                    step: opt.steps(),
                });
            }
            let mut p = den.net.params().to_vec();
            opt.step(&mut p, &grads).map_err(|_| DiffusionError::Diverged {
                epoch,
                step: opt.steps(),
            })?;
            den.net.set_params(&p)?;
            if cfg.ema_decay > 0.0 {
                for (e, v) in ema.iter_mut().zip(&p) {
                    *e = cfg.ema_decay * *e + (1.0 - cfg.ema_decay) * v;
                }
            }
            total += loss;
        }
        let val_loss = val.map(|v| {
            if cfg.ema_decay > 0.0 {
                let mut shadow = den.clone();
                shadow.net.set_params(&ema).expect("same shape");
                denoising_loss(&shadow, v, sched, cfg.seed ^ 0x5eed)
            } else {
                denoising_loss(den, v, sched, cfg.seed ^ 0x5eed)
            }
        });
        metrics.push(DenoiserMetrics {
            epoch,
            loss: total / train.len() as f64,
            val_loss,
        });
    }
    if cfg.ema_decay > 0.0 && cfg.epochs > 0 {
        den.net.set_params(&ema)?;
    }
    Ok(metrics)
}

/// Guidance target: fixed, or recomputed from the current estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetRule {
    Static(Vec<f64>),
    /// Push attribute `attribute` to `μ + 2σ` of the supplied logit
    /// statistics, optionally spreading the change to correlated attributes.
    Dynamic {
        attribute: usize,
        stats: AttributeStats,
        covariance_adjust: bool,
    },
}

impl TargetRule {
    fn target(&self, y_cur: &[f64]) -> Result<Vec<f64>, NlbpError> {
        match self {
            TargetRule::Static(y) => Ok(y.clone()),
            TargetRule::Dynamic {
                attribute,
                stats,
                covariance_adjust: adjust,
            } => {
                let t = dynamic_target(y_cur, *attribute, stats)?;
                if !*adjust {
                    return Ok(t);
                }
                let delta = covariance_adjust(t[*attribute] - y_cur[*attribute], *attribute, stats)?;
                Ok(y_cur.iter().zip(&delta).map(|(y, d)| y + d).collect())
            }
        }
    }

    /// Attribute gap driving the adaptive schedule.
    fn delta(&self, y_cur: &[f64], target: &[f64], cfg: &NlbpConfig) -> Result<f64, NlbpError> {
        match self {
            TargetRule::Dynamic { attribute, .. } => attribute_delta(y_cur, target, *attribute, cfg.delta_space),
            TargetRule::Static(_) => {
                let mut worst: f64 = 0.0;
                for n in 0..target.len() {
                    worst = worst.max(attribute_delta(y_cur, target, n, cfg.delta_space)?);
                }
                Ok(worst)
            }
        }
    }
}

/// SPNN guidance attached to a sampler run.
#[derive(Debug, Clone)]
pub struct Guidance<'a> {
    pub model: &'a SpnnModel,
    pub mode: PinvMode,
    pub target: TargetRule,
    pub nlbp: NlbpConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub sampling_steps: usize,
    pub travel_length: usize,
    pub travel_repeat: usize,
    /// Clamp for `x̂₀` before guidance; zero disables.
    pub clip_x0: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sampling_steps: 100,
            travel_length: 1,
            travel_repeat: 1,
            clip_x0: 3.0,
        }
    }
}

/// One guided step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub lambda_t: f64,
    /// `‖g(x̂₀') − y‖∞`.
    pub residual: f64,
    /// `‖q(x̂₀') − q(x̂₀)‖∞`.
    pub null_drift: f64,
    /// `‖g(x̂₀') − ((1−λ)g(x̂₀) + λy)‖∞`.
    pub interpolation_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub x0: Vec<f64>,
    pub records: Vec<StepRecord>,
}

/// Descending timestep grid of `steps` entries ending at 0.
pub fn timestep_grid(t_steps: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 || steps > t_steps {
        return Err(DiffusionError::Config(format!("sampling_steps must lie in 1..={t_steps}")));
    }
    if steps == 1 {
        return Ok(vec![t_steps - 1]);
    }
    let mut g: Vec<usize> = (0..steps)
        .map(|i| ((i * (t_steps - 1)) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    g.dedup();
    g.reverse();
    Ok(g)
}

fn guide_step(g: &Guidance<'_>, x0: &[f64]) -> Result<(Vec<f64>, StepRecord), DiffusionError> {
    let m = g.model;
    let before = m.completion(x0)?;
    let y = g.target.target(&before.range)?;
    let lambda = if g.nlbp.adaptive {
        adaptive_lambda(g.target.delta(&before.range, &y, &g.nlbp)?, g.nlbp.alpha, g.nlbp.gamma)?
    } else {
        g.nlbp.lambda
    };
    if lambda == 0.0 {
        let residual = max_abs_diff(&before.range, &y);
        return Ok((
            x0.to_vec(),
            StepRecord {
                t: 0,
                lambda_t: 0.0,
                residual,
                null_drift: 0.0,
                interpolation_error: 0.0,
            },
        ));
    }
    let x_new = match g.nlbp.update {
        UpdateKind::Gentle => nlbp_gentle(m, x0, &y, lambda, &g.mode)?,
        UpdateKind::Naive => nlbp_naive_scaled(m, x0, &y, lambda, &g.mode)?,
    };
    let after = m.completion(&x_new)?;
    let want: Vec<f64> = before
        .range
        .iter()
        .zip(&y)
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    Ok((
        x_new,
        StepRecord {
            t: 0,
            lambda_t: lambda,
            residual: max_abs_diff(&after.range, &y),
            null_drift: max_abs_diff(&after.null, &before.null),
            interpolation_error: max_abs_diff(&after.range, &want),
        },
    ))
}

/// Ancestral DDPM sampling over the respaced grid with FixedSmall posterior
/// variance. Inside the guidance window `x̂₀` is replaced by its NLBP update
/// before the posterior step. With `travel_repeat > 1`, each segment of
/// `travel_length` grid steps is re-noised back to its start and resampled.
pub fn sample_guided(
    den: &Denoiser,
    guide: Option<&Guidance<'_>>,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleResult, DiffusionError> {
    sample_with(|x, t| den.predict(x, t), den.data_dim, guide, sched, cfg, seed)
}

/// Sampler core over an arbitrary ε-predictor.
pub fn sample_with<F>(
    eps_fn: F,
    data_dim: usize,
    guide: Option<&Guidance<'_>>,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleResult, DiffusionError>
where
    F: Fn(&[f64], usize) -> Vec<f64>,
{
    if cfg.travel_repeat == 0 || cfg.travel_length == 0 {
        return Err(DiffusionError::Config("travel_length and travel_repeat must be >= 1".into()));
    }
    if let Some(g) = guide {
        g.nlbp.validate()?;
        if g.model.input_dim() != data_dim {
            return Err(DiffusionError::Dim(format!(
                "model input {} vs denoiser data {}",
                g.model.input_dim(),
                data_dim
            )));
        }
        if g.nlbp.guidance_start_t >= sched.len() {
            return Err(DiffusionError::Config("guidance_start_t must be below T".into()));
        }
    }
    let grid = timestep_grid(sched.len(), cfg.sampling_steps)?;
    let mut rng = Rng::new(seed);
    let mut x = rng.normal_vec(data_dim);
    let mut records = Vec::new();

    // Transition from grid[i] to grid[i+1] (or to the clean sample).
    let step = |x: &[f64], i: usize, rng: &mut Rng, records: &mut Vec<StepRecord>| -> Result<Vec<f64>, DiffusionError> {
        let t = grid[i];
        let eps = eps_fn(x, t);
        let mut x0 = predict_x0(x, t, &eps, sched);
        if cfg.clip_x0 > 0.0 {
            x0.iter_mut().for_each(|v| *v = v.clamp(-cfg.clip_x0, cfg.clip_x0));
        }
        if let Some(g) = guide {
            if t <= g.nlbp.guidance_start_t {
                let (x_new, mut rec) = guide_step(g, &x0)?;
                rec.t = t;
                records.push(rec);
                x0 = x_new;
            }
        }
        let out = if i + 1 == grid.len() {
            x0
        } else {
            let prev = grid[i + 1];
            let ab_t = sched.alpha_bars[t];
            let ab_p = sched.alpha_bars[prev];
            let beta = 1.0 - ab_t / ab_p;
            let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
            let var = beta * (1.0 - ab_p) / (1.0 - ab_t);
            let sd = var.max(0.0).sqrt();
            x0.iter()
                .zip(x)
                .map(|(a, b)| c0 * a + ct * b + sd * rng.normal())
                .collect()
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite { t, step: i });
        }
        Ok(out)
    };

    let mut i = 0;
    while i < grid.len() {
        let end = (i + cfg.travel_length).min(grid.len());
        for r in 0..cfg.travel_repeat {
            for k in i..end {
                x = step(&x, k, &mut rng, &mut records)?;
            }
            let last = r + 1 == cfg.travel_repeat;
            if !last && end < grid.len() {
                // x sits at grid[end]; travel back to grid[i].
                x = time_travel(&x, grid[end], grid[i] - grid[end], sched, &mut rng)?;
            } else {
                break;
            }
        }
        i = end;
    }
    Ok(SampleResult { x0: x, records })
}

/// Unguided sampling.
pub fn sample(den: &Denoiser, sched: &DiffusionSchedule, cfg: &SamplerConfig, seed: u64) -> Result<SampleResult, DiffusionError> {
    sample_guided(den, None, sched, cfg, seed)
}

/// Probability-space agreement of two logit vectors after thresholding.
pub fn logit_agreement(a: &[f64], b: &[f64]) -> f64 {
    let hits = a
        .iter()
        .zip(b)
        .filter(|(x, y)| (sigmoid(**x) > 0.5) == (sigmoid(**y) > 0.5))
        .count();
    hits as f64 / a.len().max(1) as f64
}
