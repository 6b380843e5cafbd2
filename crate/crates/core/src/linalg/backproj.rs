//! Linear back-projection `x + A†(y − Ax)` and its iterative relative
//! `x ← x + λ H (y − A x)`.

use super::{norm, pinv, sub, DenseMatrix, LinalgError};

/// Projects `x` onto `{x' : A x' = y}` along the row space of `A`.
pub fn linear_back_project(x: &[f64], y: &[f64], a: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    let a_pinv = pinv(a, None)?;
    back_project_with(x, y, a, &a_pinv)
}

/// Same as [`linear_back_project`] with a precomputed pseudo-inverse.
pub fn back_project_with(
    x: &[f64],
    y: &[f64],
    a: &DenseMatrix,
    a_pinv: &DenseMatrix,
) -> Result<Vec<f64>, LinalgError> {
    check_shapes(x, y, a)?;
    let residual = sub(y, &a.mul_vec(x));
    let step = a_pinv.matvec(&residual)?;
    Ok(x.iter().zip(&step).map(|(xi, si)| xi + si).collect())
}

fn check_shapes(x: &[f64], y: &[f64], a: &DenseMatrix) -> Result<(), LinalgError> {
    if x.len() != a.cols() || y.len() != a.rows() {
        return Err(LinalgError::ShapeMismatch {
            op: "back_project",
            left: a.shape(),
            right: (x.len(), y.len()),
        });
    }
    Ok(())
}

/// Runs exactly `iters` back-projection updates with kernel `h` (shape of `Aᵀ`).
///
/// Fails with [`LinalgError::Diverged`] as soon as the residual norm exceeds
/// ten times its initial value.
pub fn iterative_back_project(
    x0: &[f64],
    y: &[f64],
    a: &DenseMatrix,
    h: &DenseMatrix,
    lambda: f64,
    iters: usize,
) -> Result<Vec<f64>, LinalgError> {
    check_shapes(x0, y, a)?;
    if h.shape() != (a.cols(), a.rows()) {
        return Err(LinalgError::ShapeMismatch {
            op: "iterative_back_project",
            left: (a.cols(), a.rows()),
            right: h.shape(),
        });
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(LinalgError::InvalidArgument("lambda must be positive"));
    }
    let mut x = x0.to_vec();
    let initial = norm(&sub(y, &a.mul_vec(&x)));
    for iter in 0..iters {
        let residual = sub(y, &a.mul_vec(&x));
        let r = norm(&residual);
        if r > 10.0 * initial || !r.is_finite() {
            return Err(LinalgError::Diverged {
                iter,
                residual: r,
                initial,
            });
        }
        let step = h.mul_vec(&residual);
        for (xi, si) in x.iter_mut().zip(&step) {
            *xi += lambda * si;
        }
    }
    let r = norm(&sub(y, &a.mul_vec(&x)));
    if r > 10.0 * initial || !r.is_finite() {
        return Err(LinalgError::Diverged {
            iter: iters,
            residual: r,
            initial,
        });
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, max_abs_diff, null_space};
    use crate::nn::Rng;

    fn random(rng: &mut Rng, m: usize, n: usize) -> DenseMatrix {
        DenseMatrix::new(m, n, (0..m * n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn slicing_example() {
        let a = DenseMatrix::from_rows(&[&[1.0, 0.0]]);
        let x = linear_back_project(&[1.0, 2.0], &[3.0], &a).unwrap();
        assert_eq!(x, vec![3.0, 2.0]);
    }

    #[test]
    fn consistent_input_is_fixed() {
        let mut rng = Rng::new(11);
        let a = random(&mut rng, 3, 5);
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let y = a.mul_vec(&x);
        let xp = linear_back_project(&x, &y, &a).unwrap();
        assert!(max_abs_diff(&x, &xp) < 1e-12);
    }

    #[test]
    fn orthonormal_rows_move_by_residual_norm() {
        let mut rng = Rng::new(12);
        let q = crate::linalg::svd(&random(&mut rng, 5, 2)).unwrap().u.transpose(); // 2x5
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let y = vec![0.3, -1.2];
        let xp = linear_back_project(&x, &y, &q).unwrap();
        let moved = norm(&sub(&xp, &x));
        let resid = norm(&sub(&y, &q.mul_vec(&x)));
        assert!((moved - resid).abs() < 1e-12);
        assert!(max_abs_diff(&q.mul_vec(&xp), &y) < 1e-12);
    }

    #[test]
    fn displacement_is_orthogonal_to_null_space() {
        let mut rng = Rng::new(13);
        let a = random(&mut rng, 2, 6);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let y = vec![1.0, 2.0];
        let xp = linear_back_project(&x, &y, &a).unwrap();
        let d = sub(&xp, &x);
        let n = null_space(&a, None).unwrap();
        for j in 0..n.cols() {
            assert!(dot(&d, &n.column(j)).abs() < 1e-8);
        }
    }

    #[test]
    fn one_ibp_step_with_pinv_is_back_projection() {
        let mut rng = Rng::new(14);
        let a = random(&mut rng, 3, 4);
        let h = pinv(&a, None).unwrap();
        let x0: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let ibp = iterative_back_project(&x0, &y, &a, &h, 1.0, 1).unwrap();
        let lbp = linear_back_project(&x0, &y, &a).unwrap();
        assert!(max_abs_diff(&ibp, &lbp) <= 1e-10);
    }

    #[test]
    fn zero_residual_keeps_start() {
        let mut rng = Rng::new(15);
        let a = random(&mut rng, 2, 4);
        let h = random(&mut rng, 4, 2);
        let x0: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let y = a.mul_vec(&x0);
        assert_eq!(iterative_back_project(&x0, &y, &a, &h, 0.5, 7).unwrap(), x0);
    }

    #[test]
    fn transpose_kernel_converges() {
        // well conditioned: rows of a random orthogonal matrix scaled mildly
        let a = DenseMatrix::from_rows(&[&[2.0, 0.0, 0.5], &[0.0, 1.5, 0.2]]);
        let h = a.transpose();
        let y = [1.0, -2.0];
        let x = iterative_back_project(&[0.0; 3], &y, &a, &h, 0.2, 200).unwrap();
        assert!(norm(&sub(&y, &a.mul_vec(&x))) < 1e-4);
    }

    #[test]
    fn divergence_is_reported() {
        let a = DenseMatrix::from_rows(&[&[1.0, 0.0]]);
        let h = a.transpose();
        let err = iterative_back_project(&[0.0, 0.0], &[1.0], &a, &h, 5.0, 20).unwrap_err();
        assert!(matches!(err, LinalgError::Diverged { .. }));
    }

    #[test]
    fn shape_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(linear_back_project(&[0.0; 2], &[0.0; 2], &a).is_err());
    }
}
