use serde::{Deserialize, Serialize};

use super::block::{BlockGrads, BlockShape, ForwardTrace, InverseTrace, SurjectiveBlock};
use super::SpnnError;
use crate::linalg::{unshuffle_table, ImageShape};
use crate::nn::{Activation, Rng};
use crate::par::{self, Exec};

/// Serializable description of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageSpec {
    Unshuffle {
        channels: usize,
        height: usize,
        width: usize,
        factor: usize,
    },
    Block {
        in_dim: usize,
        out_dim: usize,
        hidden: Vec<usize>,
        activation: Activation,
    },
}

/// Ordered stage list; enough to rebuild a model skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub stages: Vec<StageSpec>,
}

impl Topology {
    /// `image → pixel_unshuffle(factor) → blocks` with the listed output dims.
    pub fn image(shape: ImageShape, factor: usize, dims: &[usize], hidden: &[usize], activation: Activation) -> Self {
        let mut stages = vec![StageSpec::Unshuffle {
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            factor,
        }];
        stages.extend(Self::vector(shape.len(), dims, hidden, activation).stages);
        Self { stages }
    }

    /// Blocks only, starting from `input_dim`.
    pub fn vector(input_dim: usize, dims: &[usize], hidden: &[usize], activation: Activation) -> Self {
        let mut cur = input_dim;
        let stages = dims
            .iter()
            .map(|&d| {
                let s = StageSpec::Block {
                    in_dim: cur,
                    out_dim: d,
                    hidden: hidden.to_vec(),
                    activation,
                };
                cur = d;
                s
            })
            .collect();
        Self { stages }
    }

    /// Checks that the stage dims chain and returns `(input_dim, output_dim)`.
    pub fn validate(&self) -> Result<(usize, usize), SpnnError> {
        let mut cur: Option<usize> = None;
        let mut input = None;
        let mut has_block = false;
        for (i, st) in self.stages.iter().enumerate() {
            let (din, dout) = match st {
                StageSpec::Unshuffle {
                    channels,
                    height,
                    width,
                    factor,
                } => {
                    let shape = ImageShape::new(*channels, *height, *width);
                    shape
                        .unshuffled(*factor)
                        .map_err(|_| SpnnError::Topology(format!("stage {i}: size not divisible by factor")))?;
                    (shape.len(), shape.len())
                }
                StageSpec::Block { in_dim, out_dim, .. } => {
                    if *out_dim == 0 || out_dim >= in_dim {
                        return Err(SpnnError::Topology(format!("stage {i}: need 1 <= out_dim < in_dim")));
                    }
                    has_block = true;
                    (*in_dim, *out_dim)
                }
            };
            if let Some(c) = cur {
                if c != din {
                    return Err(SpnnError::Topology(format!("stage {i}: expects {din} inputs, previous stage gives {c}")));
                }
            }
            input.get_or_insert(din);
            cur = Some(dout);
        }
        match (input, cur, has_block) {
            (Some(i), Some(o), true) => Ok((i, o)),
            _ => Err(SpnnError::Topology("model needs at least one block".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Unshuffle {
        shape: ImageShape,
        factor: usize,
        table: Vec<usize>,
    },
    Block(SurjectiveBlock),
}

/// Stacked surjective network `g: ℝ^input_dim → ℝ^output_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpnnModel {
    stages: Vec<Stage>,
    input_dim: usize,
    output_dim: usize,
    forward_frozen: bool,
}

/// `G(x) = [g(x) | q(x)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionPoint {
    pub range: Vec<f64>,
    pub null: Vec<f64>,
}

impl CompletionPoint {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.range.clone();
        v.extend_from_slice(&self.null);
        v
    }

    pub fn split(v: &[f64], output_dim: usize) -> Self {
        Self {
            range: v[..output_dim].to_vec(),
            null: v[output_dim..].to_vec(),
        }
    }
}

/// How the network selects a pre-image.
#[derive(Debug, Clone, PartialEq)]
pub enum PinvMode {
    /// Chain each block's `r` in reverse block order.
    LearnedR,
    /// `G⁻¹([y | q(0)])`.
    Natural,
    /// `G⁻¹([y | z])` for a fixed `z`.
    Constant(Vec<f64>),
}

/// Parameter groups: the forward map `{U, s, t}` and the inverse nets `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Forward,
    Inverse,
}

#[derive(Debug, Clone)]
enum StageForward {
    Unshuffle,
    Block(ForwardTrace),
}

/// Recorded forward pass through the whole model.
#[derive(Debug, Clone)]
pub struct ModelForwardTrace {
    stages: Vec<StageForward>,
    pub range: Vec<f64>,
    /// Completion-order null (last block first).
    pub null: Vec<f64>,
}

/// Recorded learned-r pseudo-inverse pass.
#[derive(Debug, Clone)]
pub struct ModelPinvTrace {
    stages: Vec<Option<InverseTrace>>,
    pub x: Vec<f64>,
}

/// Accumulated gradients, one entry per block in stage order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub blocks: Vec<BlockGrads>,
}

impl ModelGrads {
    pub fn zeros(model: &SpnnModel) -> Self {
        Self {
            blocks: model.blocks().map(BlockGrads::zeros).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.blocks.iter_mut().for_each(|b| b.scale(k));
    }

    /// Flattens one group in the layout of [`SpnnModel::params`].
    pub fn flatten(&self, model: &SpnnModel, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        for (g, b) in self.blocks.iter().zip(model.blocks()) {
            match group {
                ParamGroup::Forward => {
                    out.extend(g.mixer_params(b));
                    out.extend_from_slice(&g.s);
                    out.extend_from_slice(&g.t);
                }
                ParamGroup::Inverse => out.extend_from_slice(&g.r),
            }
        }
        out
    }
}

impl SpnnModel {
    pub fn new(topology: &Topology, rng: &mut Rng) -> Result<Self, SpnnError> {
        let (input_dim, output_dim) = topology.validate()?;
        let stages = topology
            .stages
            .iter()
            .map(|st| match st {
                StageSpec::Unshuffle {
                    channels,
                    height,
                    width,
                    factor,
                } => {
                    let shape = ImageShape::new(*channels, *height, *width);
                    Stage::Unshuffle {
                        shape,
                        factor: *factor,
                        table: unshuffle_table(shape, *factor).expect("validated"),
                    }
                }
                StageSpec::Block {
                    in_dim,
                    out_dim,
                    hidden,
                    activation,
                } => Stage::Block(SurjectiveBlock::new(
                    &BlockShape {
                        in_dim: *in_dim,
                        out_dim: *out_dim,
                        hidden: hidden.clone(),
                        activation: *activation,
                    },
                    rng,
                )),
            })
            .collect();
        Ok(Self {
            stages,
            input_dim,
            output_dim,
            forward_frozen: false,
        })
    }

    /// Builds a model whose couplings are `s ≡ 1`, `t ≡ 0`, so `g` is the
    /// linear map `S·U` with orthonormal rows. Mixers stay random.
    pub fn linear(topology: &Topology, rng: &mut Rng) -> Result<Self, SpnnError> {
        let mut m = Self::new(topology, rng)?;
        for b in m.blocks_mut_unchecked() {
            b.s_net_mut().params_mut().fill(0.0);
            b.t_net_mut().params_mut().fill(0.0);
        }
        Ok(m)
    }

    /// Assembles a model from ready blocks; used by tests and checkpoints.
    pub fn from_blocks(unshuffle: Option<(ImageShape, usize)>, blocks: Vec<SurjectiveBlock>) -> Result<Self, SpnnError> {
        let mut stages = Vec::new();
        if let Some((shape, factor)) = unshuffle {
            let table = unshuffle_table(shape, factor)?;
            stages.push(Stage::Unshuffle { shape, factor, table });
        }
        stages.extend(blocks.into_iter().map(Stage::Block));
        let m = Self {
            stages,
            input_dim: 0,
            output_dim: 0,
            forward_frozen: false,
        };
        let (input_dim, output_dim) = m.topology().validate()?;
        Ok(Self {
            input_dim,
            output_dim,
            ..m
        })
    }

    pub fn topology(&self) -> Topology {
        Topology {
            stages: self
                .stages
                .iter()
                .map(|st| match st {
                    Stage::Unshuffle { shape, factor, .. } => StageSpec::Unshuffle {
                        channels: shape.channels,
                        height: shape.height,
                        width: shape.width,
                        factor: *factor,
                    },
                    Stage::Block(b) => {
                        let s = b.shape();
                        StageSpec::Block {
                            in_dim: s.in_dim,
                            out_dim: s.out_dim,
                            hidden: s.hidden,
                            activation: s.activation,
                        }
                    }
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn null_dim(&self) -> usize {
        self.input_dim - self.output_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks().count()
    }

    pub fn blocks(&self) -> impl DoubleEndedIterator<Item = &SurjectiveBlock> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Block(b) => Some(b),
            _ => None,
        })
    }

    fn blocks_mut_unchecked(&mut self) -> impl Iterator<Item = &mut SurjectiveBlock> {
        self.stages.iter_mut().filter_map(|s| match s {
            Stage::Block(b) => Some(b),
            _ => None,
        })
    }

    /// Mutable access to block `k`. Refused while the forward map is frozen,
    /// since a block exposes its forward parameters.
    pub fn block_mut(&mut self, k: usize) -> Result<&mut SurjectiveBlock, SpnnError> {
        if self.forward_frozen {
            return Err(SpnnError::Frozen);
        }
        self.blocks_mut_unchecked().nth(k).ok_or(SpnnError::Topology(format!("no block {k}")))
    }

    pub fn freeze_forward(&mut self) {
        self.forward_frozen = true;
    }

    pub fn unfreeze_forward(&mut self) {
        self.forward_frozen = false;
    }

    pub fn is_forward_frozen(&self) -> bool {
        self.forward_frozen
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.blocks()
            .map(|b| match group {
                ParamGroup::Forward => b.mixer().params().len() + b.s_net().param_count() + b.t_net().param_count(),
                ParamGroup::Inverse => b.r_net().param_count(),
            })
            .sum()
    }

    /// Flat parameter vector of one group: per block `[mixer | s | t]` for the
    /// forward group, per block `r` for the inverse group.
    pub fn params(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count(group));
        for b in self.blocks() {
            match group {
                ParamGroup::Forward => {
                    out.extend_from_slice(b.mixer().params());
                    out.extend_from_slice(b.s_net().params());
                    out.extend_from_slice(b.t_net().params());
                }
                ParamGroup::Inverse => out.extend_from_slice(b.r_net().params()),
            }
        }
        out
    }

    pub fn set_params(&mut self, group: ParamGroup, params: &[f64]) -> Result<(), SpnnError> {
        if group == ParamGroup::Forward && self.forward_frozen {
            return Err(SpnnError::Frozen);
        }
        let expected = self.param_count(group);
        if params.len() != expected {
            return Err(SpnnError::Dim {
                what: "parameter vector",
                expected,
                got: params.len(),
            });
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &params[off..off + n];
            off += n;
            s
        };
        for b in self.blocks_mut_unchecked() {
            match group {
                ParamGroup::Forward => {
                    let mp = take(b.mixer().params().len()).to_vec();
                    b.set_mixer(&mp);
                    let sp = take(b.s_net().param_count());
                    b.s_net_mut().set_params(sp)?;
                    let tp = take(b.t_net().param_count());
                    b.t_net_mut().set_params(tp)?;
                }
                ParamGroup::Inverse => {
                    let rp = take(b.r_net().param_count());
                    b.r_net_mut().set_params(rp)?;
                }
            }
        }
        Ok(())
    }

    /// Copy of this model with freshly initialized `r` nets.
    pub fn with_random_r(&self, rng: &mut Rng) -> Self {
        let mut m = self.clone();
        for b in m.blocks_mut_unchecked() {
            let r = b.r_net();
            let fresh = crate::nn::MlpNet::new(r.dims(), r.hidden(), r.head(), rng);
            b.r_net_mut().set_params(fresh.params()).expect("same shape");
        }
        m
    }

    fn check(&self, what: &'static str, v: &[f64], expected: usize) -> Result<(), SpnnError> {
        if v.len() != expected {
            return Err(SpnnError::Dim {
                what,
                expected,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `g(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, SpnnError> {
        Ok(self.completion(x)?.range)
    }

    /// `G(x) = [g(x) | q(x)]`.
    pub fn completion(&self, x: &[f64]) -> Result<CompletionPoint, SpnnError> {
        self.check("input", x, self.input_dim)?;
        let mut cur = x.to_vec();
        let mut null = Vec::with_capacity(self.null_dim());
        let mut parts = Vec::new();
        for st in &self.stages {
            match st {
                Stage::Unshuffle { table, .. } => cur = table.iter().map(|&i| cur[i]).collect(),
                Stage::Block(b) => {
                    let (y, n) = b.forward(&cur);
                    parts.push(n);
                    cur = y;
                }
            }
        }
        for p in parts.iter().rev() {
            null.extend_from_slice(p);
        }
        Ok(CompletionPoint { range: cur, null })
    }

    /// `q(0)`.
    pub fn natural_null(&self) -> Vec<f64> {
        self.completion(&vec![0.0; self.input_dim]).expect("dims").null
    }

    /// `G⁻¹([range | null])`, inverting every block with the given null.
    pub fn completion_inverse(&self, p: &CompletionPoint) -> Result<Vec<f64>, SpnnError> {
        self.check("range", &p.range, self.output_dim)?;
        self.check("null", &p.null, self.null_dim())?;
        let mut cur = p.range.clone();
        let mut off = 0;
        for st in self.stages.iter().rev() {
            match st {
                Stage::Unshuffle { table, .. } => cur = unpermute(table, &cur),
                Stage::Block(b) => {
                    let n = b.null_dim();
                    cur = b.invert(&cur, &p.null[off..off + n]);
                    off += n;
                }
            }
        }
        Ok(cur)
    }

    /// `g†(y)` in the chosen mode.
    pub fn pinv(&self, y: &[f64], mode: &PinvMode) -> Result<Vec<f64>, SpnnError> {
        self.check("range", y, self.output_dim)?;
        match mode {
            PinvMode::LearnedR => {
                let mut cur = y.to_vec();
                for st in self.stages.iter().rev() {
                    match st {
                        Stage::Unshuffle { table, .. } => cur = unpermute(table, &cur),
                        Stage::Block(b) => cur = b.pinv(&cur),
                    }
                }
                Ok(cur)
            }
            PinvMode::Natural => self.completion_inverse(&CompletionPoint {
                range: y.to_vec(),
                null: self.natural_null(),
            }),
            PinvMode::Constant(z) => self.completion_inverse(&CompletionPoint {
                range: y.to_vec(),
                null: z.clone(),
            }),
        }
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>], exec: Exec) -> Result<Vec<Vec<f64>>, SpnnError> {
        par::map(exec, xs, |x| self.forward(x)).into_iter().collect()
    }

    pub fn pinv_batch(&self, ys: &[Vec<f64>], mode: &PinvMode, exec: Exec) -> Result<Vec<Vec<f64>>, SpnnError> {
        // Resolve q(0) once instead of per sample.
        let mode = match mode {
            PinvMode::Natural => PinvMode::Constant(self.natural_null()),
            m => m.clone(),
        };
        par::map(exec, ys, |y| self.pinv(y, &mode)).into_iter().collect()
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ModelForwardTrace, SpnnError> {
        self.check("input", x, self.input_dim)?;
        let mut cur = x.to_vec();
        let mut parts = Vec::new();
        let mut stages = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            match st {
                Stage::Unshuffle { table, .. } => {
                    cur = table.iter().map(|&i| cur[i]).collect();
                    stages.push(StageForward::Unshuffle);
                }
                Stage::Block(b) => {
                    let (y, n, tr) = b.forward_trace(&cur);
                    parts.push(n);
                    stages.push(StageForward::Block(tr));
                    cur = y;
                }
            }
        }
        let null = parts.iter().rev().flatten().copied().collect();
        Ok(ModelForwardTrace {
            stages,
            range: cur,
            null,
        })
    }

    /// Reverse pass of [`Self::forward_trace`]. `dnull` is in completion
    /// order. Returns `∂/∂x`.
    pub fn backward_forward(
        &self,
        tr: &ModelForwardTrace,
        dy: &[f64],
        dnull: Option<&[f64]>,
        grads: &mut ModelGrads,
    ) -> Vec<f64> {
        let mut cur = dy.to_vec();
        let mut off = 0;
        let mut k = grads.blocks.len();
        for (st, t) in self.stages.iter().zip(&tr.stages).rev() {
            match (st, t) {
                (Stage::Unshuffle { table, .. }, StageForward::Unshuffle) => cur = unpermute(table, &cur),
                (Stage::Block(b), StageForward::Block(bt)) => {
                    k -= 1;
                    let n = b.null_dim();
                    let dn = dnull.map(|d| &d[off..off + n]);
                    off += n;
                    cur = b.backward_forward(bt, &cur, dn, &mut grads.blocks[k]);
                }
                _ => unreachable!("trace does not match model"),
            }
        }
        cur
    }

    /// Learned-r pseudo-inverse with a recorded trace.
    pub fn pinv_trace(&self, y: &[f64]) -> Result<ModelPinvTrace, SpnnError> {
        self.check("range", y, self.output_dim)?;
        let mut cur = y.to_vec();
        let mut stages: Vec<Option<InverseTrace>> = vec![None; self.stages.len()];
        for (i, st) in self.stages.iter().enumerate().rev() {
            match st {
                Stage::Unshuffle { table, .. } => cur = unpermute(table, &cur),
                Stage::Block(b) => {
                    let (x, tr) = b.pinv_trace(&cur);
                    stages[i] = Some(tr);
                    cur = x;
                }
            }
        }
        Ok(ModelPinvTrace { stages, x: cur })
    }

    /// `G⁻¹` with a recorded trace (nulls given, no `r`).
    pub fn completion_inverse_trace(&self, p: &CompletionPoint) -> Result<ModelPinvTrace, SpnnError> {
        self.check("range", &p.range, self.output_dim)?;
        self.check("null", &p.null, self.null_dim())?;
        let mut cur = p.range.clone();
        let mut off = 0;
        let mut stages: Vec<Option<InverseTrace>> = vec![None; self.stages.len()];
        for (i, st) in self.stages.iter().enumerate().rev() {
            match st {
                Stage::Unshuffle { table, .. } => cur = unpermute(table, &cur),
                Stage::Block(b) => {
                    let n = b.null_dim();
                    let (x, tr) = b.invert_trace(&cur, &p.null[off..off + n], None);
                    off += n;
                    stages[i] = Some(tr);
                    cur = x;
                }
            }
        }
        Ok(ModelPinvTrace { stages, x: cur })
    }

    /// Reverse pass of [`Self::pinv_trace`] or
    /// [`Self::completion_inverse_trace`]. Returns `(∂/∂y, ∂/∂null)`, the
    /// null gradient in completion order (zero where `r` supplied the null).
    pub fn backward_pinv(&self, tr: &ModelPinvTrace, dx: &[f64], grads: &mut ModelGrads) -> (Vec<f64>, Vec<f64>) {
        let mut cur = dx.to_vec();
        let mut k = 0;
        let mut null_parts: Vec<Vec<f64>> = Vec::new();
        for (st, t) in self.stages.iter().zip(&tr.stages) {
            match st {
                Stage::Unshuffle { table, .. } => cur = table.iter().map(|&i| cur[i]).collect(),
                Stage::Block(b) => {
                    let bt = t.as_ref().expect("trace does not match model");
                    let (dy, dn) = b.backward_invert(bt, &cur, &mut grads.blocks[k]);
                    null_parts.push(dn);
                    k += 1;
                    cur = dy;
                }
            }
        }
        let dnull = null_parts.iter().rev().flatten().copied().collect();
        (cur, dnull)
    }
}

/// Inverse of the gather `out[k] = x[table[k]]`.
fn unpermute(table: &[usize], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (k, &i) in table.iter().enumerate() {
        out[i] = v[k];
    }
    out
}
