use crate::linalg::{cayley, cayley_grad, DenseMatrix, SkewGenerator};
use crate::nn::{Activation, Head, MlpNet, Rng, Tape};

/// Affine surjective coupling block `ℝ^D → ℝ^d`.
///
/// The input is rotated by `U = cayley(mixer)` and split into
/// `[x̃₀ | x̃₁]` with `x̃₀ ∈ ℝ^d`. The output is `x̃₀ ⊙ s(x̃₁) + t(x̃₁)`;
/// `x̃₁` is the block's null component. `r` maps an output back to a guess
/// for the null component.
#[derive(Debug, Clone, PartialEq)]
pub struct SurjectiveBlock {
    in_dim: usize,
    out_dim: usize,
    mixer: SkewGenerator,
    mixer_matrix: DenseMatrix,
    s_net: MlpNet,
    t_net: MlpNet,
    r_net: MlpNet,
}

/// Gradient buffers for one block. The mixer gradient is kept with respect to
/// `U` and converted to generator coordinates on demand (the map is linear).
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub mixer_u: DenseMatrix,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
}

impl BlockGrads {
    pub fn zeros(block: &SurjectiveBlock) -> Self {
        Self {
            mixer_u: DenseMatrix::zeros(block.in_dim, block.in_dim),
            s: vec![0.0; block.s_net.param_count()],
            t: vec![0.0; block.t_net.param_count()],
            r: vec![0.0; block.r_net.param_count()],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.mixer_u.data_mut().iter_mut().zip(other.mixer_u.data()) {
            *a += b;
        }
        for (a, b) in self
            .s
            .iter_mut()
            .chain(self.t.iter_mut())
            .chain(self.r.iter_mut())
            .zip(other.s.iter().chain(&other.t).chain(&other.r))
        {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.mixer_u.data_mut().iter_mut().for_each(|v| *v *= k);
        for v in self.s.iter_mut().chain(self.t.iter_mut()).chain(self.r.iter_mut()) {
            *v *= k;
        }
    }

    pub fn mixer_params(&self, block: &SurjectiveBlock) -> Vec<f64> {
        cayley_grad(&block.mixer, &self.mixer_u).expect("mixer gradient shape")
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    x: Vec<f64>,
    mixed: Vec<f64>,
    s_tape: Tape,
    t_tape: Tape,
    sv: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct InverseTrace {
    mixed: Vec<f64>,
    s_tape: Tape,
    t_tape: Tape,
    sv: Vec<f64>,
    r_tape: Option<Tape>,
}

/// Network shapes for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl BlockShape {
    pub fn null_dim(&self) -> usize {
        self.in_dim - self.out_dim
    }

    fn net_dims(&self, from: usize, to: usize) -> Vec<usize> {
        let mut d = vec![from];
        d.extend_from_slice(&self.hidden);
        d.push(to);
        d
    }
}

/// Standard deviation of the random mixer generator at initialization.
pub const MIXER_INIT_STD: f64 = 0.3;

impl SurjectiveBlock {
    pub fn new(shape: &BlockShape, rng: &mut Rng) -> Self {
        assert!(
            shape.out_dim >= 1 && shape.out_dim < shape.in_dim,
            "block needs 1 <= d < D"
        );
        let (d, n) = (shape.out_dim, shape.null_dim());
        let params = (0..SkewGenerator::param_count(shape.in_dim))
            .map(|_| MIXER_INIT_STD * rng.normal())
            .collect();
        let mixer = SkewGenerator::new(shape.in_dim, params).expect("generator size");
        let s_net = MlpNet::new(&shape.net_dims(n, d), shape.activation, Head::Scale, rng);
        let t_net = MlpNet::new(&shape.net_dims(n, d), shape.activation, Head::Linear, rng);
        let r_net = MlpNet::new(&shape.net_dims(d, n), shape.activation, Head::Linear, rng);
        Self::from_parts(mixer, s_net, t_net, r_net)
    }

    /// Assembles a block; panics if the network shapes do not fit together.
    pub fn from_parts(mixer: SkewGenerator, s_net: MlpNet, t_net: MlpNet, r_net: MlpNet) -> Self {
        let in_dim = mixer.dim();
        let out_dim = s_net.output_dim();
        let n = in_dim - out_dim;
        assert!(out_dim >= 1 && out_dim < in_dim);
        assert_eq!(s_net.input_dim(), n, "s input");
        assert_eq!(t_net.input_dim(), n, "t input");
        assert_eq!(t_net.output_dim(), out_dim, "t output");
        assert_eq!(r_net.input_dim(), out_dim, "r input");
        assert_eq!(r_net.output_dim(), n, "r output");
        assert_eq!(s_net.head(), Head::Scale, "s must use the scale head");
        let mixer_matrix = cayley(&mixer);
        Self {
            in_dim,
            out_dim,
            mixer,
            mixer_matrix,
            s_net,
            t_net,
            r_net,
        }
    }

    pub fn shape(&self) -> BlockShape {
        let dims = self.s_net.dims();
        BlockShape {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            hidden: dims[1..dims.len() - 1].to_vec(),
            activation: self.s_net.hidden(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn null_dim(&self) -> usize {
        self.in_dim - self.out_dim
    }

    pub fn mixer(&self) -> &SkewGenerator {
        &self.mixer
    }

    /// The rotation `U`.
    pub fn mixer_matrix(&self) -> &DenseMatrix {
        &self.mixer_matrix
    }

    pub fn set_mixer(&mut self, params: &[f64]) {
        self.mixer.params_mut().copy_from_slice(params);
        self.mixer_matrix = cayley(&self.mixer);
    }

    pub fn s_net(&self) -> &MlpNet {
        &self.s_net
    }

    pub fn t_net(&self) -> &MlpNet {
        &self.t_net
    }

    pub fn r_net(&self) -> &MlpNet {
        &self.r_net
    }

    pub fn s_net_mut(&mut self) -> &mut MlpNet {
        &mut self.s_net
    }

    pub fn t_net_mut(&mut self) -> &mut MlpNet {
        &mut self.t_net
    }

    pub fn r_net_mut(&mut self) -> &mut MlpNet {
        &mut self.r_net
    }

    /// `U x`.
    pub fn mix(&self, x: &[f64]) -> Vec<f64> {
        self.mixer_matrix.mul_vec(x)
    }

    /// `Uᵀ x̃`.
    pub fn unmix(&self, mixed: &[f64]) -> Vec<f64> {
        self.mixer_matrix.mul_vec_transposed(mixed)
    }

    /// Returns `(y, null)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mixed = self.mix(x);
        let (x0, x1) = mixed.split_at(self.out_dim);
        let sv = self.s_net.eval(x1);
        let tv = self.t_net.eval(x1);
        let y = x0
            .iter()
            .zip(&sv)
            .zip(&tv)
            .map(|((a, s), t)| a * s + t)
            .collect();
        (y, x1.to_vec())
    }

    /// Inverts the coupling for a given null component:
    /// `Uᵀ [(y − t(x̃₁)) ⊘ s(x̃₁) | x̃₁]`.
    pub fn invert(&self, y: &[f64], null: &[f64]) -> Vec<f64> {
        let sv = self.s_net.eval(null);
        let tv = self.t_net.eval(null);
        let mut mixed: Vec<f64> = y
            .iter()
            .zip(&sv)
            .zip(&tv)
            .map(|((y, s), t)| (y - t) / s)
            .collect();
        mixed.extend_from_slice(null);
        self.unmix(&mixed)
    }

    /// Learned pseudo-inverse: `invert(y, r(y))`.
    pub fn pinv(&self, y: &[f64]) -> Vec<f64> {
        let null = self.r_net.eval(y);
        self.invert(y, &null)
    }

    pub(crate) fn forward_trace(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, ForwardTrace) {
        let mixed = self.mix(x);
        let (x0, x1) = mixed.split_at(self.out_dim);
        let (sv, s_tape) = self.s_net.trace(x1);
        let (tv, t_tape) = self.t_net.trace(x1);
        let y = x0
            .iter()
            .zip(&sv)
            .zip(&tv)
            .map(|((a, s), t)| a * s + t)
            .collect();
        let null = x1.to_vec();
        (
            y,
            null,
            ForwardTrace {
                x: x.to_vec(),
                mixed,
                s_tape,
                t_tape,
                sv,
            },
        )
    }

    /// Reverse pass of [`Self::forward`]; `dnull` is the gradient arriving at
    /// the null output, if any. Returns `∂/∂x`.
    pub(crate) fn backward_forward(
        &self,
        tr: &ForwardTrace,
        dy: &[f64],
        dnull: Option<&[f64]>,
        g: &mut BlockGrads,
    ) -> Vec<f64> {
        let d = self.out_dim;
        let x0 = &tr.mixed[..d];
        let dx0: Vec<f64> = dy.iter().zip(&tr.sv).map(|(a, s)| a * s).collect();
        let dsv: Vec<f64> = dy.iter().zip(x0).map(|(a, x)| a * x).collect();
        let mut dx1 = self.s_net.accumulate(&tr.s_tape, &dsv, &mut g.s);
        let dt = self.t_net.accumulate(&tr.t_tape, dy, &mut g.t);
        for (a, b) in dx1.iter_mut().zip(&dt) {
            *a += b;
        }
        if let Some(dn) = dnull {
            for (a, b) in dx1.iter_mut().zip(dn) {
                *a += b;
            }
        }
        let mut dmixed = dx0;
        dmixed.extend(dx1);
        outer_acc(&mut g.mixer_u, &dmixed, &tr.x);
        self.unmix(&dmixed)
    }

    pub(crate) fn invert_trace(&self, y: &[f64], null: &[f64], r_tape: Option<Tape>) -> (Vec<f64>, InverseTrace) {
        let (sv, s_tape) = self.s_net.trace(null);
        let (tv, t_tape) = self.t_net.trace(null);
        let mut mixed: Vec<f64> = y
            .iter()
            .zip(&sv)
            .zip(&tv)
            .map(|((y, s), t)| (y - t) / s)
            .collect();
        mixed.extend_from_slice(null);
        let x = self.unmix(&mixed);
        (
            x,
            InverseTrace {
                mixed,
                s_tape,
                t_tape,
                sv,
                r_tape,
            },
        )
    }

    pub(crate) fn pinv_trace(&self, y: &[f64]) -> (Vec<f64>, InverseTrace) {
        let (null, r_tape) = self.r_net.trace(y);
        self.invert_trace(y, &null, Some(r_tape))
    }

    /// Reverse pass of the inverse. Returns `(∂/∂y, ∂/∂null)`; when the null
    /// came from `r` its gradient is already pushed through `r` into `∂/∂y`.
    pub(crate) fn backward_invert(&self, tr: &InverseTrace, dx: &[f64], g: &mut BlockGrads) -> (Vec<f64>, Vec<f64>) {
        let d = self.out_dim;
        let dmixed = self.mix(dx);
        outer_acc(&mut g.mixer_u, &tr.mixed, dx);
        let (dx0, dx1) = dmixed.split_at(d);
        let x0 = &tr.mixed[..d];
        let mut dy: Vec<f64> = dx0.iter().zip(&tr.sv).map(|(a, s)| a / s).collect();
        let dtv: Vec<f64> = dy.iter().map(|v| -v).collect();
        let dsv: Vec<f64> = dy.iter().zip(x0).map(|(a, x)| -a * x).collect();
        let mut dnull = dx1.to_vec();
        let ds = self.s_net.accumulate(&tr.s_tape, &dsv, &mut g.s);
        let dt = self.t_net.accumulate(&tr.t_tape, &dtv, &mut g.t);
        for ((a, b), c) in dnull.iter_mut().zip(&ds).zip(&dt) {
            *a += b + c;
        }
        if let Some(rt) = &tr.r_tape {
            let dyr = self.r_net.accumulate(rt, &dnull, &mut g.r);
            for (a, b) in dy.iter_mut().zip(&dyr) {
                *a += b;
            }
            dnull.iter_mut().for_each(|v| *v = 0.0);
        }
        (dy, dnull)
    }
}

/// `m += a ⊗ b`.
fn outer_acc(m: &mut DenseMatrix, a: &[f64], b: &[f64]) {
    let cols = m.cols();
    let data = m.data_mut();
    for (i, ai) in a.iter().enumerate() {
        if *ai == 0.0 {
            continue;
        }
        for (v, bj) in data[i * cols..(i + 1) * cols].iter_mut().zip(b) {
            *v += ai * bj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;

    fn shape(in_dim: usize, out_dim: usize) -> BlockShape {
        BlockShape {
            in_dim,
            out_dim,
            hidden: vec![8],
            activation: Activation::Tanh,
        }
    }

    fn identity_block(in_dim: usize, out_dim: usize) -> SurjectiveBlock {
        let n = in_dim - out_dim;
        SurjectiveBlock::from_parts(
            SkewGenerator::zeros(in_dim),
            MlpNet::zeros(&[n, 4, out_dim], Activation::Tanh, Head::Scale),
            MlpNet::zeros(&[n, 4, out_dim], Activation::Tanh, Head::Linear),
            MlpNet::zeros(&[out_dim, 4, n], Activation::Tanh, Head::Linear),
        )
    }

    /// Block with constant `s` and `t` (zero weights, chosen output biases).
    fn constant_st_block(rng: &mut Rng, s_pre: &[f64], t: &[f64]) -> SurjectiveBlock {
        let d = t.len();
        let mut b = SurjectiveBlock::new(&shape(d + 3, d), rng);
        b.s_net_mut().params_mut().fill(0.0);
        b.s_net_mut().last_bias_mut().copy_from_slice(s_pre);
        b.t_net_mut().params_mut().fill(0.0);
        b.t_net_mut().last_bias_mut().copy_from_slice(t);
        b
    }

    #[test]
    fn identity_coupling_slices() {
        let b = identity_block(5, 2);
        let (y, null) = b.forward(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(y, vec![1.0, 2.0]);
        assert_eq!(null, vec![3.0, 4.0, 5.0]);
        assert_eq!(b.pinv(&[7.0, 8.0]), vec![7.0, 8.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn direct_substitution() {
        // x̃₀ = (1,2), s = (2,2), t = (1,-1) -> y = (3,3)
        let mut rng = Rng::new(1);
        let ln2_half = (2f64.ln() / 2.0).atanh();
        let b = constant_st_block(&mut rng, &[ln2_half, ln2_half], &[1.0, -1.0]);
        let mut mixed = vec![1.0, 2.0];
        mixed.extend(rng.normal_vec(3));
        let x = b.unmix(&mixed);
        let (y, _) = b.forward(&x);
        assert!(max_abs_diff(&y, &[3.0, 3.0]) < 1e-12, "{y:?}");
    }

    #[test]
    fn null_only_enters_through_s_and_t() {
        let mut rng = Rng::new(2);
        let b = constant_st_block(&mut rng, &[0.3, -0.2], &[0.5, 0.1]);
        let mut mixed = rng.normal_vec(5);
        let (y1, _) = b.forward(&b.unmix(&mixed));
        for v in &mut mixed[2..] {
            *v += 3.0;
        }
        let (y2, _) = b.forward(&b.unmix(&mixed));
        assert!(max_abs_diff(&y1, &y2) < 1e-13);
    }

    #[test]
    fn forward_after_pinv_is_identity() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let b = SurjectiveBlock::new(&shape(7, 3), &mut rng);
            let y = rng.normal_vec(3);
            let (back, _) = b.forward(&b.pinv(&y));
            assert!(max_abs_diff(&back, &y) <= 1e-9);
        }
    }

    #[test]
    fn exact_null_recovers_input() {
        let mut rng = Rng::new(4);
        let b = SurjectiveBlock::new(&shape(6, 2), &mut rng);
        let x = rng.normal_vec(6);
        let (y, null) = b.forward(&x);
        assert!(max_abs_diff(&b.invert(&y, &null), &x) <= 1e-9);
    }
}
