use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{NnError, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Output head applied to the last pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    /// `exp(2 tanh(z))`, strictly inside `[e^-2, e^2]`.
    Scale,
}

/// Multiplier applied inside the scale head before the exponential.
pub const SCALE_HEAD_GAIN: f64 = 2.0;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Fully connected feed-forward network with all parameters in one flat
/// buffer: for each layer the `out x in` weight block (row-major) followed
/// by the bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpNet {
    dims: Vec<usize>,
    hidden: Activation,
    head: Head,
    params: Vec<f64>,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for MlpNet {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.hidden == other.hidden
            && self.head == other.head
            && self.params == other.params
    }
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    /// Input to every layer (`inputs[0]` is the network input).
    inputs: Vec<Vec<f64>>,
    /// Last pre-activation (needed by the scale head).
    last_pre: Vec<f64>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

impl MlpNet {
    pub fn param_count_for(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// All-zero parameters.
    pub fn zeros(dims: &[usize], hidden: Activation, head: Head) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output dim");
        Self {
            dims: dims.to_vec(),
            hidden,
            head,
            params: vec![0.0; Self::param_count_for(dims)],
            generation: next_generation(),
        }
    }

    /// Glorot-uniform weights `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(dims: &[usize], hidden: Activation, head: Head, rng: &mut Rng) -> Self {
        let mut net = Self::zeros(dims, hidden, head);
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = rng.uniform_range(-bound, bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn from_params(
        dims: &[usize],
        hidden: Activation,
        head: Head,
        params: Vec<f64>,
    ) -> Result<Self, NnError> {
        let mut net = Self::zeros(dims, hidden, head);
        net.set_params(&params)?;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn hidden(&self) -> Activation {
        self.hidden
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::ShapeMismatch {
                what: "parameter vector",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    /// Sets every parameter of the final layer to zero.
    pub fn zero_last_layer(&mut self) {
        let l = self.dims.len() - 2;
        let n = self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        let total = self.params.len();
        self.params_mut()[total - n..].fill(0.0);
    }

    /// Bias of the final layer.
    pub fn last_bias_mut(&mut self) -> &mut [f64] {
        let out = self.output_dim();
        let total = self.params.len();
        &mut self.params_mut()[total - out..]
    }

    fn apply_head(&self, z: &[f64]) -> Vec<f64> {
        match self.head {
            Head::Linear => z.to_vec(),
            Head::Scale => z.iter().map(|v| (SCALE_HEAD_GAIN * v.tanh()).exp()).collect(),
        }
    }

    fn affine(&self, layer_off: usize, n_in: usize, n_out: usize, x: &[f64]) -> Vec<f64> {
        let w = &self.params[layer_off..layer_off + n_in * n_out];
        let b = &self.params[layer_off + n_in * n_out..layer_off + n_in * n_out + n_out];
        (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    }

    fn activate(&self, z: &mut [f64]) {
        match self.hidden {
            Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
    }

    /// Forward pass without recording; `x.len()` must equal the input dim.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "MLP input dim");
        let mut a = x.to_vec();
        let mut off = 0;
        let last = self.dims.len() - 2;
        for (l, w) in self.dims.windows(2).enumerate() {
            let mut z = self.affine(off, w[0], w[1], &a);
            off += w[0] * w[1] + w[1];
            if l < last {
                self.activate(&mut z);
                a = z;
            } else {
                return self.apply_head(&z);
            }
        }
        unreachable!()
    }

    /// Forward pass that records a [`Tape`]; panics on a dimension mismatch.
    pub fn trace(&self, x: &[f64]) -> (Vec<f64>, Tape) {
        assert_eq!(x.len(), self.input_dim(), "MLP input dim");
        let mut inputs = Vec::with_capacity(self.dims.len() - 1);
        let mut a = x.to_vec();
        let mut off = 0;
        let last = self.dims.len() - 2;
        for (l, w) in self.dims.windows(2).enumerate() {
            let mut z = self.affine(off, w[0], w[1], &a);
            off += w[0] * w[1] + w[1];
            inputs.push(std::mem::take(&mut a));
            if l < last {
                self.activate(&mut z);
                a = z;
            } else {
                let y = self.apply_head(&z);
                let tape = Tape {
                    generation: self.generation,
                    inputs,
                    last_pre: z,
                    output: y.clone(),
                };
                return (y, tape);
            }
        }
        unreachable!()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                what: "MLP input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.trace(x))
    }

    /// Reverse pass: returns `(param_grads, input_grad)`.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        if tape.generation != self.generation {
            return Err(NnError::StaleTape);
        }
        if upstream.len() != self.output_dim() {
            return Err(NnError::ShapeMismatch {
                what: "MLP upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let dx = self.accumulate(tape, upstream, &mut grads);
        Ok((grads, dx))
    }

    /// Adds parameter gradients into `grads` and returns the input gradient.
    /// Panics on a stale tape.
    pub fn accumulate(&self, tape: &Tape, upstream: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(tape.generation, self.generation, "stale MLP tape");
        debug_assert_eq!(grads.len(), self.params.len());
        let mut g: Vec<f64> = match self.head {
            Head::Linear => upstream.to_vec(),
            Head::Scale => upstream
                .iter()
                .zip(&tape.output)
                .zip(&tape.last_pre)
                .map(|((u, y), z)| {
                    let th = z.tanh();
                    u * y * SCALE_HEAD_GAIN * (1.0 - th * th)
                })
                .collect(),
        };
        let n_layers = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.dims.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let woff = offsets[l];
            let a = &tape.inputs[l];
            {
                let (gw, gb) = grads[woff..woff + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    for (gwi, ai) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(a) {
                        *gwi += go * ai;
                    }
                }
            }
            let w = &self.params[woff..woff + n_in * n_out];
            let mut da = vec![0.0; n_in];
            for o in 0..n_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                for (d, wi) in da.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *d += go * wi;
                }
            }
            if l > 0 {
                // a is the activation output of the previous layer
                match self.hidden {
                    Activation::Tanh => {
                        for (d, ai) in da.iter_mut().zip(a) {
                            *d *= 1.0 - ai * ai;
                        }
                    }
                    Activation::Relu => {
                        for (d, ai) in da.iter_mut().zip(a) {
                            if *ai <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                }
            }
            g = da;
        }
        g
    }
}
