//! One-sided (Hestenes) Jacobi SVD and everything built directly on it:
//! the Moore-Penrose pseudo-inverse, null-space bases and the Penrose
//! residuals used as the linear oracle throughout the crate.

use super::{dot, norm, DenseMatrix, LinalgError};

/// Maximum number of full Jacobi sweeps before giving up.
pub const SWEEP_LIMIT: usize = 60;
/// A pair of columns is considered orthogonal once
/// `|<a_i, a_j>| <= ORTHO_TOL * |a_i| |a_j|`.
pub const ORTHO_TOL: f64 = 1e-12;

/// Thin SVD `A = U diag(sigma) Vᵀ` with `k = min(m, n)` singular triplets.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
    /// Sweeps the Jacobi iteration needed.
    pub sweeps: usize,
}

impl SvdResult {
    /// Multiplies the factors back together.
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, k) = self.u.shape();
        let n = self.v.rows();
        let mut out = DenseMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += self.u.get(i, l) * self.sigma[l] * self.v.get(j, l);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Numerical rank with respect to `rcond * sigma_max`.
    pub fn rank(&self, rcond: f64) -> usize {
        let cutoff = rcond * self.sigma.first().copied().unwrap_or(0.0);
        self.sigma.iter().filter(|s| **s > cutoff).count()
    }
}

/// Computes the thin SVD of `a` by one-sided Jacobi rotations.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult, LinalgError> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(LinalgError::Empty);
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if m < n {
        let t = svd(&a.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
            sweeps: t.sweeps,
        });
    }

    // Column-major working copy of A and the accumulated right rotations.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // Columns this small are rounding noise; rotating noise against noise
    // never meets a relative tolerance, so such pairs are skipped.
    let fro2: f64 = a.data().iter().map(|x| x * x).sum();
    let negligible = f64::EPSILON * f64::EPSILON * fro2 * (m * n) as f64;

    let mut sweeps = 0;
    loop {
        if sweeps == SWEEP_LIMIT {
            return Err(LinalgError::NoConvergence { sweeps });
        }
        sweeps += 1;
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&w[i], &w[i]);
                let beta = dot(&w[j], &w[j]);
                let gamma = dot(&w[i], &w[j]);
                let scale = (alpha * beta).sqrt();
                if alpha <= negligible || beta <= negligible || gamma.abs() <= ORTHO_TOL * scale {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<f64> = w.iter().map(|c| norm(c)).collect();
    order.sort_by(|&x, &y| sig[y].total_cmp(&sig[x]));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for &idx in &order {
        let s = sig[idx];
        v_cols.push(v[idx].clone());
        if s * s > negligible && s > f64::MIN_POSITIVE * 1e8 {
            u_cols.push(w[idx].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            pending.push(u_cols.len());
            u_cols.push(Vec::new());
            sigma.push(0.0);
        }
    }
    complete_orthonormal(&mut u_cols, &pending, m);

    Ok(SvdResult {
        u: DenseMatrix::from_columns(&u_cols),
        sigma,
        v: DenseMatrix::from_columns(&v_cols),
        sweeps,
    })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the columns listed in `pending` with unit vectors orthogonal to
/// every other column (Gram-Schmidt against the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], pending: &[usize], dim: usize) {
    let mut candidate = 0;
    for &slot in pending {
        loop {
            assert!(candidate < dim, "cannot complete orthonormal basis");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.is_empty() {
                        continue;
                    }
                    let p = dot(&e, c);
                    for (x, y) in e.iter_mut().zip(c) {
                        *x -= p * y;
                    }
                }
            }
            let nrm = norm(&e);
            if nrm > 0.5 {
                cols[slot] = e.iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

/// Default relative cutoff for singular values: `max(m, n) * eps`.
pub fn default_rcond(a: &DenseMatrix) -> f64 {
    a.rows().max(a.cols()) as f64 * f64::EPSILON
}

/// Moore-Penrose pseudo-inverse. Singular values `<= rcond * sigma_max`
/// are treated as zero; `None` selects [`default_rcond`].
pub fn pinv(a: &DenseMatrix, rcond: Option<f64>) -> Result<DenseMatrix, LinalgError> {
    let rcond = rcond.unwrap_or_else(|| default_rcond(a));
    if rcond < 0.0 || !rcond.is_finite() {
        return Err(LinalgError::InvalidArgument("rcond must be a finite non-negative value"));
    }
    let f = svd(a)?;
    let (m, n) = a.shape();
    let cutoff = rcond * f.sigma.first().copied().unwrap_or(0.0);
    let mut out = DenseMatrix::zeros(n, m);
    for (l, &s) in f.sigma.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..n {
            let vi = f.v.get(i, l) * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..m {
                let cur = out.get(i, j);
                out.set(i, j, cur + vi * f.u.get(j, l));
            }
        }
    }
    Ok(out)
}

/// Orthonormal basis (as columns, `n x nullity`) of the null space of `a`.
pub fn null_space(a: &DenseMatrix, rcond: Option<f64>) -> Result<DenseMatrix, LinalgError> {
    let (m, n) = a.shape();
    let rcond = rcond.unwrap_or_else(|| default_rcond(a));
    // Pad to square so V is the full n x n rotation.
    let padded = if m < n {
        let mut data = a.data().to_vec();
        data.resize(n * n, 0.0);
        DenseMatrix::new(n, n, data)?
    } else {
        a.clone()
    };
    let f = svd(&padded)?;
    let rank = f.rank(rcond);
    let cols: Vec<Vec<f64>> = (rank..n).map(|l| f.v.column(l)).collect();
    if cols.is_empty() {
        return Ok(DenseMatrix::zeros(n, 0));
    }
    Ok(DenseMatrix::from_columns(&cols))
}

/// Frobenius residuals of the four Penrose identities
/// `[‖AXA − A‖, ‖XAX − X‖, ‖(AX)ᵀ − AX‖, ‖(XA)ᵀ − XA‖]`.
pub fn penrose_residuals(a: &DenseMatrix, x: &DenseMatrix) -> Result<[f64; 4], LinalgError> {
    let ax = a.matmul(x)?;
    let xa = x.matmul(a)?;
    let axa = ax.matmul(a)?;
    let xax = xa.matmul(x)?;
    Ok([
        axa.sub(a)?.frobenius_norm(),
        xax.sub(x)?.frobenius_norm(),
        ax.transpose().sub(&ax)?.frobenius_norm(),
        xa.transpose().sub(&xa)?.frobenius_norm(),
    ])
}
