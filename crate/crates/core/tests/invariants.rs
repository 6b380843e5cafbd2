use proptest::prelude::*;

use spnn::checkpoint::Checkpoint;
use spnn::data::{generate, Dataset, SyntheticSpec};
use spnn::diffusion::{time_travel, DiffusionSchedule};
use spnn::linalg::{
    cayley, linear_back_project, max_abs_diff, penrose_residuals, pinv, pixel_shuffle, pixel_unshuffle, DenseMatrix,
    ImageShape, SkewGenerator,
};
use spnn::nlbp::{nlbp_exact, nlbp_gentle};
use spnn::nn::{Activation, Rng};
use spnn::spnn::{ParamGroup, PinvMode, SpnnModel, Topology};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::new(rows, cols, rng.normal_vec(rows * cols)).unwrap()
}

/// Random model over a small vector topology.
fn model(seed: u64, input: usize, out: usize) -> SpnnModel {
    // two blocks when there is room for an intermediate width
    let dims = if input - out >= 2 { vec![(input + out).div_ceil(2), out] } else { vec![out] };
    SpnnModel::new(&Topology::vector(input, &dims, &[6], Activation::Tanh), &mut Rng::new(seed)).unwrap()
}

fn modes(m: &SpnnModel) -> [PinvMode; 3] {
    [PinvMode::LearnedR, PinvMode::Natural, PinvMode::Constant(vec![0.5; m.null_dim()])]
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn pinv_satisfies_penrose(rows in 1usize..8, cols in 1usize..8, rank in 1usize..8, seed: u64) {
        let mut rng = Rng::new(seed);
        let k = rank.min(rows).min(cols);
        let a = gaussian(rows, k, &mut rng).matmul(&gaussian(k, cols, &mut rng)).unwrap();
        let p = pinv(&a, None).unwrap();
        let scale = 1.0 + a.max_abs() * p.max_abs();
        for r in penrose_residuals(&a, &p).unwrap() {
            prop_assert!(r < 1e-8 * scale * scale, "residual {r}");
        }
    }

    #[test]
    fn back_projection_lands_on_constraint(rows in 1usize..5, extra in 1usize..5, seed: u64) {
        let mut rng = Rng::new(seed);
        let a = gaussian(rows, rows + extra, &mut rng);
        let x = rng.normal_vec(rows + extra);
        let y = rng.normal_vec(rows);
        let xp = linear_back_project(&x, &y, &a).unwrap();
        prop_assert!(max_abs_diff(&a.matvec(&xp).unwrap(), &y) < 1e-9);
        // idempotent once on the constraint set
        let again = linear_back_project(&xp, &y, &a).unwrap();
        prop_assert!(max_abs_diff(&again, &xp) < 1e-9);
    }

    #[test]
    fn pixel_shuffle_inverts_unshuffle(c in 1usize..4, hb in 1usize..4, wb in 1usize..4, factor in 1usize..4, seed: u64) {
        let shape = ImageShape::new(c, hb * factor, wb * factor);
        let x = Rng::new(seed).normal_vec(shape.len());
        let u = pixel_unshuffle(&x, shape, factor).unwrap();
        let mut sorted_u = u.clone();
        let mut sorted_x = x.clone();
        sorted_u.sort_by(f64::total_cmp);
        sorted_x.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_u, sorted_x);
        prop_assert_eq!(pixel_shuffle(&u, shape, factor).unwrap(), x);
    }

    #[test]
    fn cayley_is_orthogonal(dim in 1usize..9, scale in 0.01f64..5.0, seed: u64) {
        let params: Vec<f64> = Rng::new(seed).normal_vec(SkewGenerator::param_count(dim)).iter().map(|v| v * scale).collect();
        let q = cayley(&SkewGenerator::new(dim, params).unwrap());
        let qtq = q.transpose().matmul(&q).unwrap();
        prop_assert!(qtq.sub(&DenseMatrix::identity(dim)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn pinv_is_a_right_inverse(seed: u64, input in 4usize..10, out in 1usize..4, amp in 0.1f64..3.0) {
        let m = model(seed, input, out);
        let y: Vec<f64> = Rng::new(seed ^ 1).normal_vec(out).iter().map(|v| v * amp).collect();
        for mode in modes(&m) {
            let x = m.pinv(&y, &mode).unwrap();
            prop_assert!(max_abs_diff(&m.forward(&x).unwrap(), &y) < 1e-8);
            // a pre-image of its own image is returned again
            let x2 = m.pinv(&m.forward(&x).unwrap(), &mode).unwrap();
            prop_assert!(max_abs_diff(&x2, &x) < 1e-7);
        }
    }

    #[test]
    fn nlbp_hits_target_and_keeps_null(seed: u64, input in 4usize..10, out in 1usize..4, lambda in 0.0f64..=1.0) {
        let m = model(seed, input, out);
        let mut rng = Rng::new(seed ^ 2);
        let x = rng.normal_vec(input);
        let y = rng.normal_vec(out);
        let gx = m.forward(&x).unwrap();
        let q = m.completion(&x).unwrap().null;
        for mode in modes(&m) {
            let exact = nlbp_exact(&m, &x, &y, &mode).unwrap();
            prop_assert!(max_abs_diff(&m.forward(&exact).unwrap(), &y) < 1e-8);
            let gentle = nlbp_gentle(&m, &x, &y, lambda, &mode).unwrap();
            let want: Vec<f64> = gx.iter().zip(&y).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
            prop_assert!(max_abs_diff(&m.forward(&gentle).unwrap(), &want) < 1e-8);
        }
        let gentle = nlbp_gentle(&m, &x, &y, lambda, &PinvMode::Natural).unwrap();
        prop_assert!(max_abs_diff(&m.completion(&gentle).unwrap().null, &q) < 1e-8);
    }

    #[test]
    fn checkpoint_round_trips(seed: u64, input in 4usize..10, out in 1usize..4) {
        let m = model(seed, input, out);
        let bytes = Checkpoint::from_model(&m, None, serde_json::json!({"seed": seed}), seed).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let m2 = back.model().unwrap();
        prop_assert_eq!(m2.params(ParamGroup::Forward), m.params(ParamGroup::Forward));
        prop_assert_eq!(m2.params(ParamGroup::Inverse), m.params(ParamGroup::Inverse));
    }

    #[test]
    fn truncated_checkpoints_are_rejected(seed: u64, cut in 0.0f64..1.0) {
        let m = model(seed, 6, 2);
        let bytes = Checkpoint::from_model(&m, None, serde_json::json!({}), seed).to_bytes();
        let n = (bytes.len() as f64 * cut) as usize;
        prop_assert!(Checkpoint::from_bytes(&bytes[..n]).is_err());
    }

    #[test]
    fn dataset_round_trips(n in 1usize..64, seed: u64) {
        let ds = generate(&SyntheticSpec::default(), n, seed).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(generate(&SyntheticSpec::default(), n, seed).unwrap(), ds);
    }

    #[test]
    fn time_travel_is_seeded_and_bounded(t in 0usize..99, len in 0usize..10, seed: u64) {
        let sched = DiffusionSchedule::desk();
        let x = Rng::new(seed).normal_vec(8);
        let r = time_travel(&x, t, len, &sched, &mut Rng::new(seed ^ 3));
        if t + len >= sched.len() {
            prop_assert!(r.is_err());
        } else {
            let a = r.unwrap();
            prop_assert_eq!(&a, &time_travel(&x, t, len, &sched, &mut Rng::new(seed ^ 3)).unwrap());
            if len == 0 {
                prop_assert_eq!(a, x);
            }
        }
    }
}

#[test]
fn time_travel_matches_marginal_moments() {
    // x_{t+L} | x_t has mean sqrt(r) x_t and variance 1 - r with r = abar_{t+L} / abar_t.
    let sched = DiffusionSchedule::desk();
    let (t, len) = (20, 15);
    let r = sched.alpha_bars[t + len] / sched.alpha_bars[t];
    let x = vec![1.5; 20_000];
    let out = time_travel(&x, t, len, &sched, &mut Rng::new(7)).unwrap();
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 1.5 * r.sqrt()).abs() < 0.02, "mean {mean}");
    assert!((var - (1.0 - r)).abs() < 0.03, "var {var}");
}
