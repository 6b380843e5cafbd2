use super::{CompletionPoint, SpnnError, SpnnModel};
use crate::linalg::{dist, norm_sq};
use crate::nn::Rng;

/// Settings for the brute-force pre-image search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub restarts: usize,
    pub step: f64,
    pub max_iters: usize,
    pub fd_eps: f64,
    /// Spread of initial null guesses around the origin.
    pub init_std: f64,
    /// Restart endpoints further apart than this are reported as a bug.
    pub disagreement_tol: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            restarts: 32,
            step: 0.25,
            max_iters: 200,
            fd_eps: 1e-4,
            init_std: 2.0,
            disagreement_tol: 1e-4,
            seed: 0,
        }
    }
}

/// Largest null dimension the oracle accepts.
pub const ORACLE_MAX_NULL_DIM: usize = 8;

/// Minimizes `‖G(x) − G(0)‖²` over the pre-image of `y` by multi-start
/// finite-difference gradient descent on the null coordinates `z`, with
/// `x = G⁻¹([y | z])`. Nothing about the optimum is assumed: every objective
/// evaluation runs the full inverse and forward completion.
pub fn preimage_oracle(m: &SpnnModel, y: &[f64], cfg: &OracleConfig) -> Result<Vec<f64>, SpnnError> {
    let nd = m.null_dim();
    if nd > ORACLE_MAX_NULL_DIM {
        return Err(SpnnError::Topology(format!(
            "pre-image oracle supports null_dim <= {ORACLE_MAX_NULL_DIM}, model has {nd}"
        )));
    }
    let origin = m.completion(&vec![0.0; m.input_dim()])?.concat();
    let objective = |z: &[f64]| -> Result<f64, SpnnError> {
        let x = m.completion_inverse(&CompletionPoint {
            range: y.to_vec(),
            null: z.to_vec(),
        })?;
        let g = m.completion(&x)?.concat();
        Ok(dist(&g, &origin).powi(2))
    };

    let base = Rng::new(cfg.seed);
    let mut ends: Vec<(f64, Vec<f64>)> = Vec::with_capacity(cfg.restarts);
    for k in 0..cfg.restarts.max(1) {
        let mut rng = base.split(k as u64);
        let mut z: Vec<f64> = (0..nd).map(|_| cfg.init_std * rng.normal()).collect();
        for _ in 0..cfg.max_iters {
            let mut grad = vec![0.0; nd];
            for i in 0..nd {
                let orig = z[i];
                z[i] = orig + cfg.fd_eps;
                let plus = objective(&z)?;
                z[i] = orig - cfg.fd_eps;
                let minus = objective(&z)?;
                z[i] = orig;
                grad[i] = (plus - minus) / (2.0 * cfg.fd_eps);
            }
            let delta: Vec<f64> = grad.iter().map(|g| cfg.step * g).collect();
            for (zi, d) in z.iter_mut().zip(&delta) {
                *zi -= d;
            }
            if norm_sq(&delta) < 1e-26 {
                break;
            }
        }
        ends.push((objective(&z)?, z));
    }

    let best = ends
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|e| e.1.clone())
        .expect("at least one restart");
    let spread = ends.iter().map(|(_, z)| dist(z, &best)).fold(0.0, f64::max);
    if spread > cfg.disagreement_tol {
        return Err(SpnnError::OracleDisagreement { spread });
    }
    m.completion_inverse(&CompletionPoint {
        range: y.to_vec(),
        null: best,
    })
}
