//! Cayley parameterization of rotations, `U = (I − S)(I + S)⁻¹`, with `S`
//! skew-symmetric.
//!
//! Since `I − S = 2I − (I + S)`, the transform equals `2(I + S)⁻¹ − I`,
//! which is what gets evaluated. For a loss `L(U)` with upstream `G = ∂L/∂U`
//! the gradient with respect to `S` is `−2 M⁻ᵀ G M⁻ᵀ` where `M = I + S`; a
//! free parameter `p` sitting at `S[i][j] = p, S[j][i] = −p` collects the
//! difference of the two entries.

use serde::{Deserialize, Serialize};

use super::{DenseMatrix, LinalgError};

/// Strict upper triangle of a skew-symmetric matrix, row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewGenerator {
    dim: usize,
    params: Vec<f64>,
}

impl SkewGenerator {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            params: vec![0.0; Self::param_count(dim)],
        }
    }

    pub fn new(dim: usize, params: Vec<f64>) -> Result<Self, LinalgError> {
        let expected = Self::param_count(dim);
        if params.len() != expected {
            return Err(LinalgError::InvalidData {
                expected,
                got: params.len(),
            });
        }
        Ok(Self { dim, params })
    }

    #[inline]
    pub fn param_count(dim: usize) -> usize {
        dim * dim.saturating_sub(1) / 2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Materializes `S`; the lower triangle is the exact negation of the upper.
    pub fn matrix(&self) -> DenseMatrix {
        let n = self.dim;
        let mut s = DenseMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                s.set(i, j, self.params[k]);
                s.set(j, i, -self.params[k]);
                k += 1;
            }
        }
        s
    }
}

fn shifted(gen: &SkewGenerator) -> DenseMatrix {
    let mut m = gen.matrix();
    for i in 0..gen.dim {
        m.set(i, i, 1.0);
    }
    m
}

/// Orthogonal matrix `(I − S)(I + S)⁻¹`.
pub fn cayley(gen: &SkewGenerator) -> DenseMatrix {
    let n = gen.dim;
    // I + S is always invertible for real skew-symmetric S (eigenvalues 1 + iω).
    let inv = shifted(gen)
        .inverse()
        .expect("I + S is invertible for skew-symmetric S");
    let mut u = inv.scale(2.0);
    for i in 0..n {
        let d = u.get(i, i);
        u.set(i, i, d - 1.0);
    }
    u
}

/// Gradient of `L(cayley(gen))` with respect to the free parameters, given
/// `upstream = ∂L/∂U`.
pub fn cayley_grad(gen: &SkewGenerator, upstream: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    let n = gen.dim;
    if upstream.shape() != (n, n) {
        return Err(LinalgError::ShapeMismatch {
            op: "cayley_grad",
            left: (n, n),
            right: upstream.shape(),
        });
    }
    let inv_t = shifted(gen)
        .inverse()
        .expect("I + S is invertible for skew-symmetric S")
        .transpose();
    let ds = inv_t.matmul(upstream)?.matmul(&inv_t)?.scale(-2.0);
    let mut out = Vec::with_capacity(SkewGenerator::param_count(n));
    for i in 0..n {
        for j in i + 1..n {
            out.push(ds.get(i, j) - ds.get(j, i));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Rng;

    fn random_gen(rng: &mut Rng, dim: usize, scale: f64) -> SkewGenerator {
        let p = (0..SkewGenerator::param_count(dim))
            .map(|_| scale * rng.normal())
            .collect();
        SkewGenerator::new(dim, p).unwrap()
    }

    fn fd_grad(gen: &SkewGenerator, upstream: &DenseMatrix, h: f64) -> Vec<f64> {
        let loss = |g: &SkewGenerator| -> f64 {
            let u = cayley(g);
            u.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };
        (0..gen.params().len())
            .map(|k| {
                let mut plus = gen.clone();
                plus.params_mut()[k] += h;
                let mut minus = gen.clone();
                minus.params_mut()[k] -= h;
                (loss(&plus) - loss(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_generator_is_identity() {
        assert_eq!(cayley(&SkewGenerator::zeros(4)), DenseMatrix::identity(4));
    }

    #[test]
    fn two_by_two_quarter_turn() {
        let u = cayley(&SkewGenerator::new(2, vec![1.0]).unwrap());
        let expected = DenseMatrix::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        assert!(u.sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn skew_symmetry_is_exact() {
        let mut rng = Rng::new(1);
        let s = random_gen(&mut rng, 6, 1.0).matrix();
        assert_eq!(s.transpose(), s.scale(-1.0));
    }

    #[test]
    fn random_dim8_is_orthogonal() {
        let mut rng = Rng::new(2);
        let u = cayley(&random_gen(&mut rng, 8, 1.0));
        let err = u
            .transpose()
            .matmul(&u)
            .unwrap()
            .sub(&DenseMatrix::identity(8))
            .unwrap()
            .frobenius_norm();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = Rng::new(4);
        let g = random_gen(&mut rng, 5, 0.5);
        let grad = cayley_grad(&g, &DenseMatrix::zeros(5, 5)).unwrap();
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_at_origin_matches_finite_differences() {
        let g = SkewGenerator::zeros(2);
        let up = DenseMatrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let analytic = cayley_grad(&g, &up).unwrap();
        let numeric = fd_grad(&g, &up, 1e-6);
        assert!((analytic[0] - numeric[0]).abs() <= 1e-6, "{analytic:?} vs {numeric:?}");
        // d/dp of <U, up> at 0: dU = -2 dS, so -2 * (1*1 + (-1)*(-1)) = -4.
        assert!((analytic[0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn random_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let g = random_gen(&mut rng, 6, 0.7);
        let up = DenseMatrix::new(6, 6, (0..36).map(|_| rng.normal()).collect()).unwrap();
        let analytic = cayley_grad(&g, &up).unwrap();
        let numeric = fd_grad(&g, &up, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel <= 1e-5, "{a} vs {n}");
        }
    }

    #[test]
    fn rejects_wrong_upstream_shape() {
        assert!(cayley_grad(&SkewGenerator::zeros(3), &DenseMatrix::zeros(2, 2)).is_err());
    }
}
