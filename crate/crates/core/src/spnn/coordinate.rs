use super::SpnnError;
use crate::linalg::{cayley, pinv, null_space, DenseMatrix, SkewGenerator};
use crate::nn::{Activation, Head, MlpNet, Rng};

/// Bijective affine coupling `φ: ℝ^D → ℝ^D`,
/// `φ(x) = [x̃₀ ⊙ s(x̃₁) + t(x̃₁) | x̃₁]` with `x̃ = Ux`.
/// All biases of `t` are zero and its hidden activation is odd, so `φ(0) = 0`.
#[derive(Debug, Clone)]
pub struct BijectiveCoupling {
    u: DenseMatrix,
    split: usize,
    s_net: MlpNet,
    t_net: MlpNet,
}

impl BijectiveCoupling {
    pub fn random(dim: usize, split: usize, hidden: usize, rng: &mut Rng) -> Self {
        assert!(split >= 1 && split < dim);
        let gen = SkewGenerator::new(
            dim,
            (0..SkewGenerator::param_count(dim)).map(|_| 0.5 * rng.normal()).collect(),
        )
        .expect("size");
        let n = dim - split;
        let s_net = MlpNet::new(&[n, hidden, split], Activation::Tanh, Head::Scale, rng);
        let mut t_net = MlpNet::new(&[n, hidden, split], Activation::Tanh, Head::Linear, rng);
        // zero every bias: layer l occupies out*in weights then out biases
        let mut off = 0;
        let dims = t_net.dims().to_vec();
        let p = t_net.params_mut();
        for w in dims.windows(2) {
            off += w[0] * w[1];
            p[off..off + w[1]].fill(0.0);
            off += w[1];
        }
        Self {
            u: cayley(&gen),
            split,
            s_net,
            t_net,
        }
    }

    /// The identity map.
    pub fn identity(dim: usize) -> Self {
        Self {
            u: DenseMatrix::identity(dim),
            split: dim / 2,
            s_net: MlpNet::zeros(&[dim - dim / 2, 1, dim / 2], Activation::Tanh, Head::Scale),
            t_net: MlpNet::zeros(&[dim - dim / 2, 1, dim / 2], Activation::Tanh, Head::Linear),
        }
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.u.mul_vec(x);
        let (x0, x1) = v.split_at_mut(self.split);
        let s = self.s_net.eval(x1);
        let t = self.t_net.eval(x1);
        for ((a, s), t) in x0.iter_mut().zip(&s).zip(&t) {
            *a = *a * s + t;
        }
        v
    }

    pub fn invert(&self, w: &[f64]) -> Vec<f64> {
        let mut v = w.to_vec();
        let (x0, x1) = v.split_at_mut(self.split);
        let s = self.s_net.eval(x1);
        let t = self.t_net.eval(x1);
        for ((a, s), t) in x0.iter_mut().zip(&s).zip(&t) {
            *a = (*a - t) / s;
        }
        self.u.mul_vec_transposed(&v)
    }
}

/// `g = A ∘ φ` with a surjective `A`.
#[derive(Debug, Clone)]
pub struct CoordinateTestCase {
    pub phi: BijectiveCoupling,
    pub a: DenseMatrix,
}

impl CoordinateTestCase {
    pub fn random(dim: usize, rows: usize, rng: &mut Rng) -> Self {
        assert!(rows >= 1 && rows < dim);
        let a = DenseMatrix::new(rows, dim, rng.normal_vec(rows * dim)).expect("size");
        Self {
            phi: BijectiveCoupling::random(dim, (dim / 2).max(1), 6, rng),
            a,
        }
    }
}

/// Natural pseudo-inverse of `g = Aφ` computed through its completion
/// `G(x) = [Aφ(x) | Nᵀφ(x)]` (`N` an orthonormal null-space basis of `A`),
/// compared against `φ⁻¹(A†y)`. Returns the Euclidean discrepancy.
pub fn coordinate_consistency_check(tc: &CoordinateTestCase, y: &[f64]) -> Result<f64, SpnnError> {
    let (m, d) = tc.a.shape();
    if y.len() != m {
        return Err(SpnnError::Dim {
            what: "target",
            expected: m,
            got: y.len(),
        });
    }
    let n = null_space(&tc.a, None)?;
    if n.cols() != d - m {
        return Err(SpnnError::Topology("A is not full row rank".into()));
    }
    // Stacked M = [A; Nᵀ] so that G = M ∘ φ.
    let mut data = tc.a.data().to_vec();
    data.extend_from_slice(n.transpose().data());
    let big_m = DenseMatrix::new(d, d, data)?;

    let q0: Vec<f64> = big_m.mul_vec(&tc.phi.apply(&vec![0.0; d]))[m..].to_vec();
    let mut target = y.to_vec();
    target.extend_from_slice(&q0);
    let natural = tc.phi.invert(&big_m.solve(&target)?);

    let reference = tc.phi.invert(&pinv(&tc.a, None)?.mul_vec(y));
    Ok(crate::linalg::dist(&natural, &reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;

    #[test]
    fn coupling_round_trip_and_origin() {
        let mut rng = Rng::new(5);
        let phi = BijectiveCoupling::random(6, 3, 5, &mut rng);
        assert!(phi.apply(&[0.0; 6]).iter().all(|v| v.abs() < 1e-15));
        let x = rng.normal_vec(6);
        assert!(max_abs_diff(&phi.invert(&phi.apply(&x)), &x) < 1e-9);
    }

    #[test]
    fn identity_phi_is_linear_check() {
        let mut rng = Rng::new(6);
        let tc = CoordinateTestCase {
            phi: BijectiveCoupling::identity(4),
            a: DenseMatrix::new(2, 4, rng.normal_vec(8)).unwrap(),
        };
        let y = rng.normal_vec(2);
        assert!(coordinate_consistency_check(&tc, &y).unwrap() < 1e-10);
    }

    #[test]
    fn random_case_and_zero_target() {
        let mut rng = Rng::new(7);
        let tc = CoordinateTestCase::random(4, 2, &mut rng);
        assert!(coordinate_consistency_check(&tc, &rng.normal_vec(2)).unwrap() < 1e-6);
        assert!(coordinate_consistency_check(&tc, &[0.0, 0.0]).unwrap() < 1e-12);
    }
}
