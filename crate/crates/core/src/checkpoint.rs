//! Checkpoint container: `SPNNCKPT`, u64 manifest length, JSON manifest,
//! then little-endian f64 tensor data.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::Denoiser;
use crate::losses::OptimState;
use crate::nn::{AdamConfig, AdamState, Activation, Head, MlpNet, NnError, Rng};
use crate::spnn::{ParamGroup, SpnnError, SpnnModel, Topology};

pub const MAGIC: &[u8; 8] = b"SPNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    UnknownVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds a {found}, expected a {expected}")]
    WrongKind { expected: &'static str, found: String },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Spnn(#[from] SpnnError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shape of a denoiser MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub data_dim: usize,
    pub emb_dim: usize,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamEcho {
    pub config: AdamConfig,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// `"spnn"` or `"denoiser"`.
    pub kind: String,
    pub topology: Option<Topology>,
    pub denoiser: Option<DenoiserShape>,
    pub forward_frozen: bool,
    pub tensors: Vec<TensorEntry>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub epochs_done: usize,
    pub adam_forward: Option<AdamEcho>,
    pub adam_inverse: Option<AdamEcho>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blob: Vec<f64>,
}

struct Builder {
    tensors: Vec<TensorEntry>,
    blob: Vec<f64>,
}

impl Builder {
    fn new() -> Self {
        Self {
            tensors: Vec::new(),
            blob: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(TensorEntry {
            name,
            shape,
            offset: (self.blob.len() * 8) as u64,
        });
        self.blob.extend_from_slice(data);
    }
}

fn spnn_tensor_names(m: &SpnnModel) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (k, b) in m.blocks().enumerate() {
        out.push((format!("block{k}.mixer"), b.mixer().params().len()));
        out.push((format!("block{k}.s"), b.s_net().param_count()));
        out.push((format!("block{k}.t"), b.t_net().param_count()));
    }
    for (k, b) in m.blocks().enumerate() {
        out.push((format!("block{k}.r"), b.r_net().param_count()));
    }
    out
}

impl Checkpoint {
    /// SPNN weights, optionally with optimizer moments for resuming.
    pub fn from_model(m: &SpnnModel, opt: Option<&OptimState>, config: serde_json::Value, seed: u64) -> Self {
        let mut b = Builder::new();
        let fwd = m.params(ParamGroup::Forward);
        let inv = m.params(ParamGroup::Inverse);
        let flat: Vec<f64> = fwd.iter().chain(&inv).copied().collect();
        let mut off = 0;
        for (name, n) in spnn_tensor_names(m) {
            b.push(name, vec![n], &flat[off..off + n]);
            off += n;
        }
        let mut adam_forward = None;
        let mut adam_inverse = None;
        if let Some(o) = opt {
            if let Some(f) = &o.forward {
                let (mm, vv) = f.moments();
                b.push("adam.forward.m".into(), vec![mm.len()], mm);
                b.push("adam.forward.v".into(), vec![vv.len()], vv);
                adam_forward = Some(AdamEcho {
                    config: f.config,
                    steps: f.steps(),
                });
            }
            let (mm, vv) = o.inverse.moments();
            b.push("adam.inverse.m".into(), vec![mm.len()], mm);
            b.push("adam.inverse.v".into(), vec![vv.len()], vv);
            adam_inverse = Some(AdamEcho {
                config: o.inverse.config,
                steps: o.inverse.steps(),
            });
        }
        Self {
            manifest: Manifest {
                version: FORMAT_VERSION,
                kind: "spnn".into(),
                topology: Some(m.topology()),
                denoiser: None,
                forward_frozen: m.is_forward_frozen(),
                tensors: b.tensors,
                config,
                seed,
                epochs_done: opt.map_or(0, |o| o.epochs_done),
                adam_forward,
                adam_inverse,
            },
            blob: b.blob,
        }
    }

    pub fn from_denoiser(den: &Denoiser, config: serde_json::Value, seed: u64) -> Self {
        let mut b = Builder::new();
        b.push("denoiser.net".into(), vec![den.net.param_count()], den.net.params());
        Self {
            manifest: Manifest {
                version: FORMAT_VERSION,
                kind: "denoiser".into(),
                topology: None,
                denoiser: Some(DenoiserShape {
                    data_dim: den.data_dim,
                    emb_dim: den.emb_dim,
                    dims: den.net.dims().to_vec(),
                }),
                forward_frozen: false,
                tensors: b.tensors,
                config,
                seed,
                epochs_done: 0,
                adam_forward: None,
                adam_inverse: None,
            },
            blob: b.blob,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&[f64], CheckpointError> {
        let e = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
        let start = (e.offset / 8) as usize;
        Ok(&self.blob[start..start + e.len()])
    }

    fn expect_kind(&self, kind: &'static str) -> Result<(), CheckpointError> {
        if self.manifest.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind,
                found: self.manifest.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn model(&self) -> Result<SpnnModel, CheckpointError> {
        self.expect_kind("spnn")?;
        let topo = self
            .manifest
            .topology
            .as_ref()
            .ok_or_else(|| CheckpointError::Corrupt("spnn checkpoint without topology".into()))?;
        let mut m = SpnnModel::new(topo, &mut Rng::new(0))?;
        let names = spnn_tensor_names(&m);
        let n_fwd = 3 * m.num_blocks();
        let mut fwd = Vec::with_capacity(m.param_count(ParamGroup::Forward));
        let mut inv = Vec::with_capacity(m.param_count(ParamGroup::Inverse));
        for (i, (name, n)) in names.iter().enumerate() {
            let t = self.tensor(name)?;
            if t.len() != *n {
                return Err(CheckpointError::Corrupt(format!("{name} has {} values, topology needs {n}", t.len())));
            }
            if i < n_fwd {
                fwd.extend_from_slice(t);
            } else {
                inv.extend_from_slice(t);
            }
        }
        m.set_params(ParamGroup::Forward, &fwd)?;
        m.set_params(ParamGroup::Inverse, &inv)?;
        if self.manifest.forward_frozen {
            m.freeze_forward();
        }
        Ok(m)
    }

    /// Optimizer state, if one was saved.
    pub fn optim_state(&self) -> Result<Option<OptimState>, CheckpointError> {
        self.expect_kind("spnn")?;
        let Some(inv) = &self.manifest.adam_inverse else {
            return Ok(None);
        };
        let inverse = AdamState::from_parts(
            inv.config,
            self.tensor("adam.inverse.m")?.to_vec(),
            self.tensor("adam.inverse.v")?.to_vec(),
            inv.steps,
        )?;
        let forward = match &self.manifest.adam_forward {
            Some(f) => Some(AdamState::from_parts(
                f.config,
                self.tensor("adam.forward.m")?.to_vec(),
                self.tensor("adam.forward.v")?.to_vec(),
                f.steps,
            )?),
            None => None,
        };
        Ok(Some(OptimState {
            forward,
            inverse,
            epochs_done: self.manifest.epochs_done,
        }))
    }

    pub fn denoiser(&self) -> Result<Denoiser, CheckpointError> {
        self.expect_kind("denoiser")?;
        let shape = self
            .manifest
            .denoiser
            .as_ref()
            .ok_or_else(|| CheckpointError::Corrupt("denoiser checkpoint without shape".into()))?;
        let mut net = MlpNet::zeros(&shape.dims, Activation::Relu, Head::Linear);
        net.set_params(self.tensor("denoiser.net")?)?;
        Denoiser::from_net(net, shape.data_dim, shape.emb_dim)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    fn validate(&self) -> Result<(), CheckpointError> {
        let mut seen = HashSet::new();
        let mut expected_offset = 0u64;
        for t in &self.manifest.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {}", t.name)));
            }
            if t.offset != expected_offset {
                return Err(CheckpointError::Corrupt(format!("tensor {} at offset {}, expected {expected_offset}", t.name, t.offset)));
            }
            expected_offset += 8 * t.len() as u64;
        }
        if expected_offset != 8 * self.blob.len() as u64 {
            return Err(CheckpointError::Corrupt(format!(
                "blob holds {} bytes, table describes {expected_offset}",
                8 * self.blob.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + 8 * self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for v in &self.blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| CheckpointError::Corrupt("manifest truncated".into()))?;
        // check the version before the full schema so future formats fail clearly
        let raw: serde_json::Value = serde_json::from_slice(body)?;
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Corrupt("manifest without version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(CheckpointError::UnknownVersion(version as u32));
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        let rest = &bytes[16 + len..];
        if !rest.len().is_multiple_of(8) {
            return Err(CheckpointError::Corrupt("blob is not a whole number of f64".into()));
        }
        let blob = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let ck = Self { manifest, blob };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ImageShape;

    fn model() -> SpnnModel {
        let topo = Topology::image(ImageShape::new(1, 4, 4), 2, &[8, 4], &[6], Activation::Tanh);
        SpnnModel::new(&topo, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_identical() {
        let mut m = model();
        m.freeze_forward();
        let ck = Checkpoint::from_model(&m, None, serde_json::json!({"lr": 2e-4}), 556);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let m2 = back.model().unwrap();
        assert!(m2.is_forward_frozen());
        for g in [ParamGroup::Forward, ParamGroup::Inverse] {
            let a: Vec<u64> = m.params(g).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = m2.params(g).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn table_covers_every_tensor_once() {
        let m = model();
        let ck = Checkpoint::from_model(&m, None, serde_json::Value::Null, 0);
        assert_eq!(ck.manifest.tensors.len(), 4 * m.num_blocks());
        let total: usize = ck.manifest.tensors.iter().map(|t| t.len()).sum();
        assert_eq!(total, ck.blob.len());
        assert_eq!(total, m.param_count(ParamGroup::Forward) + m.param_count(ParamGroup::Inverse));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let m = model();
        let mut rng = Rng::new(4);
        let n_f = m.param_count(ParamGroup::Forward);
        let n_r = m.param_count(ParamGroup::Inverse);
        let cfg = AdamConfig::default();
        let opt = OptimState {
            forward: Some(AdamState::from_parts(cfg, rng.normal_vec(n_f), rng.normal_vec(n_f).iter().map(|v| v * v).collect(), 17).unwrap()),
            inverse: AdamState::from_parts(cfg, rng.normal_vec(n_r), vec![0.5; n_r], 9).unwrap(),
            epochs_done: 3,
        };
        let ck = Checkpoint::from_bytes(&Checkpoint::from_model(&m, Some(&opt), serde_json::Value::Null, 0).to_bytes()).unwrap();
        assert_eq!(ck.optim_state().unwrap(), Some(opt));
    }

    #[test]
    fn denoiser_round_trip() {
        let den = Denoiser::with_shape(16, 8, 2, 4, &mut Rng::new(5));
        let ck = Checkpoint::from_bytes(&Checkpoint::from_denoiser(&den, serde_json::Value::Null, 1).to_bytes()).unwrap();
        assert_eq!(ck.denoiser().unwrap(), den);
        assert!(matches!(ck.model(), Err(CheckpointError::WrongKind { .. })));
    }

    #[test]
    fn rejects_unknown_version_and_corruption() {
        let ck = Checkpoint::from_model(&model(), None, serde_json::Value::Null, 0);
        let mut future = ck.clone();
        future.manifest.version = 2;
        assert!(matches!(Checkpoint::from_bytes(&future.to_bytes()), Err(CheckpointError::UnknownVersion(2))));

        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(CheckpointError::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut dup = ck.clone();
        dup.manifest.tensors[1].name = dup.manifest.tensors[0].name.clone();
        assert!(matches!(Checkpoint::from_bytes(&dup.to_bytes()), Err(CheckpointError::Corrupt(_))));
    }
}
