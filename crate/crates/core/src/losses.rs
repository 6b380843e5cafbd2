//! Training objectives and the two training phases.
//!
//! Every batch loss is a mean over independent per-sample terms. Samples are
//! evaluated in parallel and summed in index order, so values and gradients
//! do not depend on the execution mode.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nlbp::sigmoid;
use crate::nn::{AdamConfig, AdamState, NnError, Rng};
use crate::par::{self, Exec};
use crate::spnn::{CompletionPoint, ModelGrads, ParamGroup, PinvMode, SpnnError, SpnnModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("non-finite loss in phase {phase}, epoch {epoch}, step {step}")]
    Diverged {
        phase: u8,
        epoch: usize,
        step: u64,
        /// Parameters before the failing step.
        last_good: Box<SpnnModel>,
    },
    #[error("forward parameters must be frozen before phase II")]
    NotFrozen,
    #[error("invalid training input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Spnn(#[from] SpnnError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mse,
    /// Independent binary cross-entropy per output logit.
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub task: f64,
    pub surj: f64,
    pub stab: f64,
    pub natural: f64,
    pub r_surj: f64,
    pub r_stab: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            task: 1.0,
            surj: 40.0,
            stab: 40.0,
            natural: 0.3,
            r_surj: 1.0,
            r_stab: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub phase2_batch_size: usize,
    pub lr: f64,
    /// Rate for the `r` nets during phase I.
    pub lr_r: f64,
    /// Rate for the `r` nets in phase II and the min-norm variant.
    pub phase2_lr_r: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub warmup_steps: u64,
    pub weights: LossWeights,
    pub task: TaskKind,
    /// Stop phase I once the task loss improved by less than this over
    /// `plateau_epochs` epochs; zero disables.
    pub plateau_tol: f64,
    pub plateau_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 15,
            phase2_epochs: 50,
            batch_size: 256,
            phase2_batch_size: 256,
            lr: 2e-4,
            lr_r: 1e-4,
            phase2_lr_r: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            warmup_steps: 200,
            weights: LossWeights::default(),
            task: TaskKind::CrossEntropy,
            plateau_tol: 1e-4,
            plateau_epochs: 3,
            seed: 556,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let w = self.weights;
        let all = [w.task, w.surj, w.stab, w.natural, w.r_surj, w.r_stab];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LossError::Invalid("loss weights must be finite and >= 0".into()));
        }
        if w.task + w.surj + w.stab <= 0.0 {
            return Err(LossError::Invalid("phase I needs a positive weight".into()));
        }
        if w.natural + w.r_surj + w.r_stab <= 0.0 {
            return Err(LossError::Invalid("phase II needs a positive weight".into()));
        }
        if self.batch_size == 0 || self.phase2_batch_size == 0 {
            return Err(LossError::Invalid("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_r > 0.0 && self.phase2_lr_r > 0.0) {
            return Err(LossError::Invalid("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            grad_clip: self.grad_clip,
            warmup_steps: self.warmup_steps,
        }
    }
}

/// A batch loss value with its gradient over every parameter.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: ModelGrads,
}

impl LossOutput {
    pub fn flat(&self, m: &SpnnModel, group: ParamGroup) -> Vec<f64> {
        self.grads.flatten(m, group)
    }
}

fn squared_residual(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let d: Vec<f64> = a.iter().zip(b).map(|(a, b)| a - b).collect();
    (d.iter().map(|v| v * v).sum(), d.iter().map(|v| 2.0 * v).collect())
}

/// Per-sample task loss (mean over outputs); gradient scaled by `w`.
fn task_sample(m: &SpnnModel, x: &[f64], target: &[f64], kind: TaskKind, w: f64, g: &mut ModelGrads) -> Result<f64, SpnnError> {
    let tr = m.forward_trace(x)?;
    let k = target.len() as f64;
    let (value, dz): (f64, Vec<f64>) = match kind {
        TaskKind::Mse => {
            let (v, d) = squared_residual(&tr.range, target);
            (v / k, d.iter().map(|d| d / k).collect())
        }
        TaskKind::CrossEntropy => {
            let v = tr
                .range
                .iter()
                .zip(target)
                .map(|(z, t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                .sum::<f64>();
            let d = tr.range.iter().zip(target).map(|(z, t)| (sigmoid(*z) - t) / k).collect();
            (v / k, d)
        }
    };
    if w != 0.0 {
        let dz: Vec<f64> = dz.iter().map(|d| d * w).collect();
        m.backward_forward(&tr, &dz, None, g);
    }
    Ok(value)
}

/// `‖y − g(g†(y))‖²` with learned `r`.
fn surj_sample(m: &SpnnModel, y: &[f64], w: f64, g: &mut ModelGrads) -> Result<f64, SpnnError> {
    let inv = m.pinv_trace(y)?;
    let fwd = m.forward_trace(&inv.x)?;
    let (value, d) = squared_residual(&fwd.range, y);
    if w != 0.0 {
        let d: Vec<f64> = d.iter().map(|v| v * w).collect();
        let dx = m.backward_forward(&fwd, &d, None, g);
        m.backward_pinv(&inv, &dx, g);
    }
    Ok(value)
}

/// `‖x − g†(g(x))‖²` with learned `r`.
fn stab_sample(m: &SpnnModel, x: &[f64], w: f64, g: &mut ModelGrads) -> Result<f64, SpnnError> {
    let fwd = m.forward_trace(x)?;
    let inv = m.pinv_trace(&fwd.range)?;
    let (value, d) = squared_residual(&inv.x, x);
    if w != 0.0 {
        let d: Vec<f64> = d.iter().map(|v| v * w).collect();
        let (dy, _) = m.backward_pinv(&inv, &d, g);
        m.backward_forward(&fwd, &dy, None, g);
    }
    Ok(value)
}

/// `‖G(g†(y)) − G(0)‖²` with learned `r`; `G(0)` is a constant.
fn natural_sample(m: &SpnnModel, y: &[f64], origin: &CompletionPoint, w: f64, g: &mut ModelGrads) -> Result<f64, SpnnError> {
    let inv = m.pinv_trace(y)?;
    let fwd = m.forward_trace(&inv.x)?;
    let (vr, dr) = squared_residual(&fwd.range, &origin.range);
    let (vn, dn) = squared_residual(&fwd.null, &origin.null);
    if w != 0.0 {
        let dr: Vec<f64> = dr.iter().map(|v| v * w).collect();
        let dn: Vec<f64> = dn.iter().map(|v| v * w).collect();
        let dx = m.backward_forward(&fwd, &dr, Some(&dn), g);
        m.backward_pinv(&inv, &dx, g);
    }
    Ok(vr + vn)
}

/// `‖x‖²` of the learned pseudo-inverse, the minimum-norm criterion.
fn min_norm_sample(m: &SpnnModel, y: &[f64], w: f64, g: &mut ModelGrads) -> Result<f64, SpnnError> {
    let inv = m.pinv_trace(y)?;
    let value = inv.x.iter().map(|v| v * v).sum();
    if w != 0.0 {
        let d: Vec<f64> = inv.x.iter().map(|v| 2.0 * v * w).collect();
        m.backward_pinv(&inv, &d, g);
    }
    Ok(value)
}

/// Runs `f` over every sample with weight `1/B` and reduces in order.
fn batch_mean<T, F>(m: &SpnnModel, items: &[T], exec: Exec, f: F) -> Result<LossOutput, SpnnError>
where
    T: Sync,
    F: Fn(&T, f64, &mut ModelGrads) -> Result<f64, SpnnError> + Sync + Send,
{
    let w = 1.0 / items.len().max(1) as f64;
    let parts = par::map(exec, items, |it| {
        let mut g = ModelGrads::zeros(m);
        f(it, w, &mut g).map(|v| (v, g))
    });
    let mut grads = ModelGrads::zeros(m);
    let mut value = 0.0;
    for p in parts {
        let (v, g) = p?;
        value += v;
        grads.add_assign(&g);
    }
    Ok(LossOutput { value: value * w, grads })
}

fn check_finite(out: LossOutput) -> Result<LossOutput, LossError> {
    if out.value.is_finite() {
        Ok(out)
    } else {
        Err(LossError::Invalid(format!("non-finite loss {}", out.value)))
    }
}

pub fn loss_task(m: &SpnnModel, xs: &[Vec<f64>], targets: &[Vec<f64>], kind: TaskKind, exec: Exec) -> Result<LossOutput, LossError> {
    if xs.len() != targets.len() {
        return Err(LossError::Invalid("inputs and targets differ in length".into()));
    }
    let idx: Vec<usize> = (0..xs.len()).collect();
    check_finite(batch_mean(m, &idx, exec, |&i, w, g| task_sample(m, &xs[i], &targets[i], kind, w, g))?)
}

pub fn loss_surjectivity(m: &SpnnModel, ys: &[Vec<f64>], exec: Exec) -> Result<LossOutput, LossError> {
    Ok(batch_mean(m, ys, exec, |y, w, g| surj_sample(m, y, w, g))?)
}

pub fn loss_stability(m: &SpnnModel, xs: &[Vec<f64>], exec: Exec) -> Result<LossOutput, LossError> {
    Ok(batch_mean(m, xs, exec, |x, w, g| stab_sample(m, x, w, g))?)
}

/// `E‖G(g†(y)) − G(0)‖²`. Only the `r` gradient is meaningful; read it with
/// `ParamGroup::Inverse`.
pub fn loss_natural(m: &SpnnModel, ys: &[Vec<f64>], exec: Exec) -> Result<LossOutput, LossError> {
    let origin = m.completion(&vec![0.0; m.input_dim()])?;
    Ok(batch_mean(m, ys, exec, |y, w, g| natural_sample(m, y, &origin, w, g))?)
}

/// `E‖g†(y)‖²` for the learned pseudo-inverse.
pub fn loss_min_norm(m: &SpnnModel, ys: &[Vec<f64>], exec: Exec) -> Result<LossOutput, LossError> {
    Ok(batch_mean(m, ys, exec, |y, w, g| min_norm_sample(m, y, w, g))?)
}

/// Value of `E‖G(g†(y)) − G(0)‖²` for any pseudo-inverse mode.
pub fn natural_objective(m: &SpnnModel, ys: &[Vec<f64>], mode: &PinvMode) -> Result<f64, LossError> {
    let origin = m.completion(&vec![0.0; m.input_dim()])?.concat();
    let mut total = 0.0;
    for x in m.pinv_batch(ys, mode, Exec::Parallel)? {
        let g = m.completion(&x)?.concat();
        total += g.iter().zip(&origin).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / ys.len().max(1) as f64)
}

/// Mean `‖q(g†_r(y)) − q(0)‖`, the distance of the `r` outputs from the
/// natural null.
pub fn r_distance(m: &SpnnModel, ys: &[Vec<f64>]) -> Result<f64, LossError> {
    let q0 = m.natural_null();
    let xs = m.pinv_batch(ys, &PinvMode::LearnedR, Exec::Parallel)?;
    let mut total = 0.0;
    for x in &xs {
        total += crate::linalg::dist(&m.completion(x)?.null, &q0);
    }
    Ok(total / ys.len().max(1) as f64)
}

/// Fraction of output logits whose sign matches the binary labels.
pub fn attribute_accuracy(m: &SpnnModel, ds: &Dataset) -> Result<f64, LossError> {
    let ys = m.forward_batch(&ds.samples, Exec::Parallel)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (y, l) in ys.iter().zip(&ds.labels) {
        for (z, &b) in y.iter().zip(l) {
            hits += ((*z > 0.0) == (b == 1)) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// One metrics record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: u8,
    pub epoch: usize,
    pub loss_task: Option<f64>,
    pub loss_surj: f64,
    pub loss_stab: Option<f64>,
    pub loss_natural: Option<f64>,
    pub accuracy: Option<f64>,
    pub r_distance: Option<f64>,
}

/// Optimizer state carried between runs so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub forward: Option<AdamState>,
    pub inverse: AdamState,
    pub epochs_done: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub state: OptimState,
}

fn batches(n: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

fn epoch_rng(seed: u64, phase: u64, epoch: usize) -> Rng {
    Rng::new(seed).split(phase).split(epoch as u64)
}

/// Phase I: `λ_task·L_task + λ_surj·L_surj + λ_stab·L_stab`. The forward map
/// uses `lr`; the `r` nets receive the auxiliary-loss gradients with `lr_r`.
pub fn train_phase1(
    m: &mut SpnnModel,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    resume: Option<OptimState>,
) -> Result<TrainOutcome, LossError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(LossError::Invalid("empty training set".into()));
    }
    if m.is_forward_frozen() {
        return Err(SpnnError::Frozen.into());
    }
    if train.sample_dim() != m.input_dim() || train.n_attributes() != m.output_dim() {
        return Err(LossError::Invalid(format!(
            "dataset is {}→{}, model is {}→{}",
            train.sample_dim(),
            train.n_attributes(),
            m.input_dim(),
            m.output_dim()
        )));
    }
    let mut state = resume.unwrap_or_else(|| OptimState {
        forward: Some(AdamState::new(m.param_count(ParamGroup::Forward), cfg.adam(cfg.lr))),
        inverse: AdamState::new(m.param_count(ParamGroup::Inverse), cfg.adam(cfg.lr_r)),
        epochs_done: 0,
    });
    let targets = train.label_rows();
    let w = cfg.weights;
    let mut metrics = Vec::new();
    let mut task_history: Vec<f64> = Vec::new();

    while state.epochs_done < cfg.phase1_epochs {
        let epoch = state.epochs_done;
        let mut rng = epoch_rng(cfg.seed, 1, epoch);
        let (mut sum_task, mut sum_surj, mut sum_stab) = (0.0, 0.0, 0.0);
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let weight = 1.0 / batch.len() as f64;
            let model: &SpnnModel = m;
            let parts = par::map(Exec::Parallel, &batch, |&i| -> Result<_, SpnnError> {
                let mut g = ModelGrads::zeros(model);
                let x = &train.samples[i];
                let task = task_sample(model, x, &targets[i], cfg.task, w.task * weight, &mut g)?;
                let y = model.forward(x)?;
                let surj = surj_sample(model, &y, w.surj * weight, &mut g)?;
                let stab = stab_sample(model, x, w.stab * weight, &mut g)?;
                Ok((task, surj, stab, g))
            });
            let mut grads = ModelGrads::zeros(m);
            let (mut bt, mut bs, mut bb) = (0.0, 0.0, 0.0);
            for p in parts {
                let (t, s, b, g) = p?;
                bt += t;
                bs += s;
                bb += b;
                grads.add_assign(&g);
            }
            let total = w.task * bt + w.surj * bs + w.stab * bb;
            let fwd = state.forward.as_mut().expect("phase I optimizer");
            if !total.is_finite() {
                return Err(LossError::Diverged {
                    phase: 1,
                    epoch,
                    step: fwd.steps(),
                    last_good: Box::new(m.clone()),
                });
            }
            let snapshot = m.clone();
            let diverged = |m: SpnnModel, step| LossError::Diverged {
                phase: 1,
                epoch,
                step,
                last_good: Box::new(m),
            };
            let mut p = m.params(ParamGroup::Forward);
            fwd.step(&mut p, &grads.flatten(m, ParamGroup::Forward))
                .map_err(|_| diverged(snapshot.clone(), fwd.steps()))?;
            let mut pr = m.params(ParamGroup::Inverse);
            state
                .inverse
                .step(&mut pr, &grads.flatten(m, ParamGroup::Inverse))
                .map_err(|_| diverged(snapshot.clone(), state.inverse.steps()))?;
            m.set_params(ParamGroup::Forward, &p)?;
            m.set_params(ParamGroup::Inverse, &pr)?;
            sum_task += bt;
            sum_surj += bs;
            sum_stab += bb;
        }
        let n = train.len() as f64;
        let accuracy = eval.map(|e| attribute_accuracy(m, e)).transpose()?;
        metrics.push(EpochMetrics {
            phase: 1,
            epoch,
            loss_task: Some(sum_task / n),
            loss_surj: sum_surj / n,
            loss_stab: Some(sum_stab / n),
            loss_natural: None,
            accuracy,
            r_distance: None,
        });
        state.epochs_done += 1;
        task_history.push(sum_task / n);
        let k = cfg.plateau_epochs;
        if cfg.plateau_tol > 0.0 && k > 0 && task_history.len() > k {
            let old = task_history[task_history.len() - 1 - k];
            if old - sum_task / n < cfg.plateau_tol {
                break;
            }
        }
    }
    Ok(TrainOutcome { metrics, state })
}

/// Phase II: `λ_natural·L_natural + λ_r_surj·L_surj + λ_r_stab·L_stab` over
/// the `r` nets only. The stability term needs input samples `xs`.
pub fn train_phase2(
    m: &mut SpnnModel,
    ys: &[Vec<f64>],
    xs: Option<&[Vec<f64>]>,
    cfg: &TrainConfig,
    resume: Option<OptimState>,
) -> Result<TrainOutcome, LossError> {
    cfg.validate()?;
    if !m.is_forward_frozen() {
        return Err(LossError::NotFrozen);
    }
    if ys.is_empty() {
        return Err(LossError::Invalid("no target samples".into()));
    }
    let w = cfg.weights;
    if w.r_stab > 0.0 && xs.is_none_or(|x| x.len() != ys.len()) {
        return Err(LossError::Invalid("the stability term needs one input sample per target".into()));
    }
    train_r(m, ys, xs, cfg, resume, 2, |model, i, weight, g| {
        let origin = model.completion(&vec![0.0; model.input_dim()])?;
        let nat = natural_sample(model, &ys[i], &origin, w.natural * weight, g)?;
        let surj = surj_sample(model, &ys[i], w.r_surj * weight, g)?;
        let stab = match xs {
            Some(xs) if w.r_stab > 0.0 => Some(stab_sample(model, &xs[i], w.r_stab * weight, g)?),
            _ => None,
        };
        Ok([nat, surj, stab.unwrap_or(f64::NAN)])
    })
}

/// Trains `r` to minimize `E‖g†(y)‖²` (plus `λ_r_surj·L_surj`), the
/// minimum-norm alternative to the natural criterion.
pub fn train_min_norm_r(m: &mut SpnnModel, ys: &[Vec<f64>], cfg: &TrainConfig) -> Result<TrainOutcome, LossError> {
    cfg.validate()?;
    if !m.is_forward_frozen() {
        return Err(LossError::NotFrozen);
    }
    let w = cfg.weights;
    train_r(m, ys, None, cfg, None, 3, |model, i, weight, g| {
        let norm = min_norm_sample(model, &ys[i], weight, g)?;
        let surj = surj_sample(model, &ys[i], w.r_surj * weight, g)?;
        Ok([norm, surj, f64::NAN])
    })
}

fn train_r<F>(
    m: &mut SpnnModel,
    ys: &[Vec<f64>],
    _xs: Option<&[Vec<f64>]>,
    cfg: &TrainConfig,
    resume: Option<OptimState>,
    phase: u8,
    sample: F,
) -> Result<TrainOutcome, LossError>
where
    F: Fn(&SpnnModel, usize, f64, &mut ModelGrads) -> Result<[f64; 3], SpnnError> + Sync + Send,
{
    let frozen = m.params(ParamGroup::Forward);
    let mut state = resume.unwrap_or_else(|| OptimState {
        forward: None,
        inverse: AdamState::new(m.param_count(ParamGroup::Inverse), cfg.adam(cfg.phase2_lr_r)),
        epochs_done: 0,
    });
    let mut metrics = Vec::new();
    while state.epochs_done < cfg.phase2_epochs {
        let epoch = state.epochs_done;
        let mut rng = epoch_rng(cfg.seed, phase as u64, epoch);
        let mut sums = [0.0; 3];
        for batch in batches(ys.len(), cfg.phase2_batch_size, &mut rng) {
            let weight = 1.0 / batch.len() as f64;
            let model: &SpnnModel = m;
            let parts = par::map(Exec::Parallel, &batch, |&i| {
                let mut g = ModelGrads::zeros(model);
                sample(model, i, weight, &mut g).map(|v| (v, g))
            });
            let mut grads = ModelGrads::zeros(m);
            let mut vals = [0.0; 3];
            for p in parts {
                let (v, g) = p?;
                for (a, b) in vals.iter_mut().zip(v) {
                    *a += b;
                }
                grads.add_assign(&g);
            }
            if !vals[0].is_finite() || !vals[1].is_finite() {
                return Err(LossError::Diverged {
                    phase,
                    epoch,
                    step: state.inverse.steps(),
                    last_good: Box::new(m.clone()),
                });
            }
            let mut pr = m.params(ParamGroup::Inverse);
            let snapshot = m.clone();
            state
                .inverse
                .step(&mut pr, &grads.flatten(m, ParamGroup::Inverse))
                .map_err(|_| LossError::Diverged {
                    phase,
                    epoch,
                    step: state.inverse.steps(),
                    last_good: Box::new(snapshot),
                })?;
            m.set_params(ParamGroup::Inverse, &pr)?;
            for (a, b) in sums.iter_mut().zip(vals) {
                *a += b;
            }
        }
        let n = ys.len() as f64;
        metrics.push(EpochMetrics {
            phase,
            epoch,
            loss_task: None,
            loss_surj: sums[1] / n,
            loss_stab: sums[2].is_finite().then(|| sums[2] / n),
            loss_natural: (phase == 2).then(|| sums[0] / n),
            accuracy: None,
            r_distance: Some(r_distance(m, ys)?),
        });
        state.epochs_done += 1;
    }
    // Frozen parameters are never written; this guards the invariant.
    if m.params(ParamGroup::Forward) != frozen {
        return Err(SpnnError::Frozen.into());
    }
    Ok(TrainOutcome { metrics, state })
}
