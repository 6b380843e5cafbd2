//! Synthetic attribute images: each binary attribute switches on a spatial
//! template over a constant background, plus Gaussian noise.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{dot, norm_sq, svd, DenseMatrix, ImageShape};
use crate::nlbp::AttributeStats;
use crate::nn::Rng;
use crate::par::{self, Exec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("dataset must contain at least one sample")]
    Empty,
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Attribute `to` copies attribute `from` with probability `agreement`,
/// otherwise it is drawn from its own marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCoupling {
    pub from: usize,
    pub to: usize,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub shape: ImageShape,
    pub templates: Vec<Vec<f64>>,
    pub background: f64,
    pub noise_std: f64,
    pub marginals: Vec<f64>,
    pub couplings: Vec<AttributeCoupling>,
}

/// Pixel value contributed by an active template.
pub const TEMPLATE_AMPLITUDE: f64 = 2.0;

impl Default for SyntheticSpec {
    /// 1×4×4 images, one attribute per 2×2 quadrant, attribute 1 coupled to
    /// attribute 0 with correlation 0.7.
    fn default() -> Self {
        let shape = ImageShape::new(1, 4, 4);
        let templates = (0..4)
            .map(|q| {
                let (qr, qc) = (q / 2, q % 2);
                let mut t = vec![0.0; 16];
                for r in 0..2 {
                    for c in 0..2 {
                        t[(qr * 2 + r) * 4 + qc * 2 + c] = TEMPLATE_AMPLITUDE;
                    }
                }
                t
            })
            .collect();
        Self {
            shape,
            templates,
            background: -1.0,
            noise_std: 0.1,
            marginals: vec![0.5; 4],
            couplings: vec![AttributeCoupling {
                from: 0,
                to: 1,
                agreement: 0.7,
            }],
        }
    }
}

impl SyntheticSpec {
    pub fn sample_dim(&self) -> usize {
        self.shape.len()
    }

    pub fn n_attributes(&self) -> usize {
        self.templates.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        let (d, k) = (self.sample_dim(), self.n_attributes());
        if k == 0 || d == 0 {
            return bad("need at least one attribute and pixel".into());
        }
        if self.templates.iter().any(|t| t.len() != d) {
            return bad(format!("templates must have {d} entries"));
        }
        if self.marginals.len() != k || self.marginals.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("one marginal probability in [0, 1] per attribute".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !self.background.is_finite() {
            return bad("noise_std and background must be finite, noise_std >= 0".into());
        }
        for c in &self.couplings {
            if c.from >= c.to || c.to >= k || !(0.0..=1.0).contains(&c.agreement) {
                return bad(format!("coupling {c:?} needs from < to < {k} and agreement in [0, 1]"));
            }
        }
        let t = DenseMatrix::from_columns(&self.templates);
        let rank = svd(&t).map_err(|e| DataError::InvalidSpec(e.to_string()))?.rank(1e-10);
        if rank < k {
            return bad("templates are linearly dependent".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&bytes).into()
    }

    fn draw_labels(&self, rng: &mut Rng) -> Vec<u8> {
        let mut labels = vec![0u8; self.n_attributes()];
        for k in 0..labels.len() {
            let coupled = self.couplings.iter().find(|c| c.to == k);
            labels[k] = match coupled {
                Some(c) if rng.bernoulli(c.agreement) => labels[c.from],
                _ => rng.bernoulli(self.marginals[k]) as u8,
            };
        }
        labels
    }

    /// `Σ_k label_k·template_k + background` without noise.
    pub fn render(&self, labels: &[u8]) -> Vec<f64> {
        let mut x = vec![self.background; self.sample_dim()];
        for (t, &l) in self.templates.iter().zip(labels) {
            if l != 0 {
                for (v, tv) in x.iter_mut().zip(t) {
                    *v += tv;
                }
            }
        }
        x
    }

    /// Ground-truth attribute reading: project the background-free sample on
    /// each template and threshold the coefficient at one half.
    pub fn decode_attributes(&self, x: &[f64]) -> Vec<u8> {
        let centered: Vec<f64> = x.iter().map(|v| v - self.background).collect();
        self.templates
            .iter()
            .map(|t| (dot(&centered, t) / norm_sq(t) > 0.5) as u8)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
    pub split: Split,
    pub seed: u64,
    pub spec_hash: [u8; 32],
}

/// Training split of `n` samples.
pub fn generate(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Dataset, DataError> {
    generate_split(spec, n, seed, Split::Train)
}

/// Each sample draws from its own stream `(seed, split, index)`, so the result
/// does not depend on how generation is scheduled.
pub fn generate_split(spec: &SyntheticSpec, n: usize, seed: u64, split: Split) -> Result<Dataset, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::Empty);
    }
    let base = Rng::new(seed).split(split.tag());
    let pairs = par::map_range(Exec::Parallel, n, |i| {
        let mut rng = base.split(i as u64 + 1);
        let labels = spec.draw_labels(&mut rng);
        let mut x = spec.render(&labels);
        if spec.noise_std > 0.0 {
            for v in &mut x {
                *v += spec.noise_std * rng.normal();
            }
        }
        (x, labels)
    });
    let (samples, labels) = pairs.into_iter().unzip();
    Ok(Dataset {
        samples,
        labels,
        split,
        seed,
        spec_hash: spec.hash(),
    })
}

/// Moments of the label vectors, or of supplied per-sample logits.
pub fn attribute_stats(ds: &Dataset, logits: Option<&[Vec<f64>]>) -> Result<AttributeStats, DataError> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let rows = match logits {
        Some(l) => l.to_vec(),
        None => ds.label_rows(),
    };
    AttributeStats::from_rows(&rows).map_err(|e| DataError::InvalidSpec(e.to_string()))
}

const MAGIC: &[u8; 8] = b"SPNNDATA";
const VERSION: u32 = 1;

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn n_attributes(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    /// Labels as `0.0 / 1.0` rows.
    pub fn label_rows(&self) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .map(|l| l.iter().map(|&b| b as f64).collect())
            .collect()
    }

    /// First `n` samples as a new dataset.
    pub fn head(&self, n: usize) -> Self {
        Self {
            samples: self.samples[..n.min(self.len())].to_vec(),
            labels: self.labels[..n.min(self.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d, k) = (self.len(), self.sample_dim(), self.n_attributes());
        let mut out = Vec::with_capacity(8 + 4 + 33 + 32 + n * (8 * d + k));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [n as u64, d as u64, k as u64, self.seed] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.split.tag() as u8);
        out.extend_from_slice(&self.spec_hash);
        for s in &self.samples {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for l in &self.labels {
            out.extend_from_slice(l);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| DataError::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(DataError::Format("bad magic".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| DataError::Format("truncated header".into()))?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let mut u64s = [0u64; 4];
        for v in &mut u64s {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| DataError::Format("truncated header".into()))?;
            *v = u64::from_le_bytes(b);
        }
        let [n, d, k, seed] = u64s.map(|v| v as usize);
        let mut tail = [0u8; 33];
        r.read_exact(&mut tail).map_err(|_| DataError::Format("truncated header".into()))?;
        let split = match tail[0] {
            0 => Split::Train,
            1 => Split::Test,
            t => return Err(DataError::Format(format!("unknown split tag {t}"))),
        };
        let spec_hash: [u8; 32] = tail[1..].try_into().expect("32 bytes");
        let need = n
            .checked_mul(d)
            .and_then(|v| v.checked_mul(8))
            .and_then(|v| v.checked_add(n * k))
            .ok_or_else(|| DataError::Format("size overflow".into()))?;
        if r.len() != need {
            return Err(DataError::Format(format!("expected {need} payload bytes, found {}", r.len())));
        }
        let (sample_bytes, label_bytes) = r.split_at(n * d * 8);
        let flat: Vec<f64> = sample_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let samples = if d == 0 { vec![Vec::new(); n] } else { flat.chunks(d).map(<[f64]>::to_vec).collect() };
        let labels: Vec<Vec<u8>> = if k == 0 { vec![Vec::new(); n] } else { label_bytes.chunks(k).map(<[u8]>::to_vec).collect() };
        if labels.iter().flatten().any(|&b| b > 1) {
            return Err(DataError::Format("labels must be 0 or 1".into()));
        }
        Ok(Self {
            samples,
            labels,
            split,
            seed: seed as u64,
            spec_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
