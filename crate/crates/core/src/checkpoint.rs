//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"SPRLCKPT"
//! version  u32
//! hlen     u64        length of the JSON header
//! header   hlen bytes UTF-8 JSON (config, network specs, normalizers,
//!                     scalar state, mask and tensor directory)
//! masks    per masked layer, ceil(n / 64) u64 words, row-major bits
//! tensors  per tensor, rows * cols f32 values, row-major
//! checksum u64        FNV-1a over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Agent;
use crate::nn::{NetworkSpec, ObsNormalizer};
use crate::rng::fnv1a64;

const MAGIC: &[u8; 8] = b"SPRLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch: file is corrupt")]
    Checksum,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("checkpoint does not match the agent: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub network: String,
    pub layer: String,
    pub len: usize,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// Resolved experiment configuration; enough to rebuild the agent.
    pub config: serde_json::Value,
    pub seed: u64,
    pub env_steps: u64,
    pub specs: BTreeMap<String, NetworkSpec>,
    pub normalizers: BTreeMap<String, ObsNormalizer>,
    pub scalars: BTreeMap<String, f64>,
    pub masks: Vec<MaskEntry>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub masks: Vec<Vec<u64>>,
    pub tensors: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn capture(
        agent: &dyn Agent,
        config: serde_json::Value,
        seed: u64,
        env_steps: u64,
    ) -> Self {
        let mut specs = BTreeMap::new();
        let mut normalizers = BTreeMap::new();
        let mut mask_entries = Vec::new();
        let mut masks = Vec::new();
        for (label, net) in agent.networks() {
            specs.insert(label.to_string(), net.spec().clone());
            normalizers.insert(label.to_string(), net.normalizer().clone());
            for lin in net.linears() {
                if let Some(mask) = lin.mask() {
                    mask_entries.push(MaskEntry {
                        network: label.to_string(),
                        layer: lin.name().to_string(),
                        len: mask.len(),
                        active: mask.active_count(),
                    });
                    masks.push(mask.packed().to_vec());
                }
            }
        }
        let (tensor_entries, tensors) = agent
            .tensors()
            .into_iter()
            .map(|(name, t)| {
                let (rows, cols) = t.dim();
                (
                    TensorEntry { name, rows, cols },
                    t.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
                )
            })
            .unzip();
        Self {
            header: Header {
                config,
                seed,
                env_steps,
                specs,
                normalizers,
                scalars: agent
                    .scalars()
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
                masks: mask_entries,
                tensors: tensor_entries,
            },
            masks,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for words in &self.masks {
            for w in words {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 4 + 8 + 8 {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let masks = header
            .masks
            .iter()
            .map(|m| (0..m.len.div_ceil(64)).map(|_| r.u64()).collect())
            .collect::<Result<Vec<Vec<u64>>, _>>()?;
        let tensors = header
            .tensors
            .iter()
            .map(|t| {
                (0..t.rows * t.cols)
                    .map(|_| {
                        Ok::<_, CheckpointError>(f32::from_le_bytes(r.take(4)?.try_into().unwrap()))
                    })
                    .collect()
            })
            .collect::<Result<Vec<Vec<f32>>, _>>()?;
        if r.pos != body.len() {
            return Err(CheckpointError::Header(
                "trailing bytes after tensors".into(),
            ));
        }
        Ok(Self {
            header,
            masks,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Writes the stored state into an agent built from the same
    /// configuration. Masks must match bit for bit.
    pub fn restore(&self, agent: &mut dyn Agent) -> Result<(), CheckpointError> {
        let mismatch = |msg: String| CheckpointError::Mismatch(msg);
        let mut stored = self.header.masks.iter().zip(&self.masks);
        for (label, net) in agent.networks() {
            if self.header.specs.get(label) != Some(net.spec()) {
                return Err(mismatch(format!("network `{label}` spec differs")));
            }
            for lin in net.linears() {
                if let Some(mask) = lin.mask() {
                    let (entry, words) = stored
                        .next()
                        .ok_or_else(|| mismatch(format!("missing mask for `{}`", lin.name())))?;
                    if entry.network != label || entry.layer != lin.name() || words != mask.packed()
                    {
                        return Err(mismatch(format!(
                            "mask for `{label}/{}` differs",
                            lin.name()
                        )));
                    }
                }
            }
        }
        if stored.next().is_some() {
            return Err(mismatch("checkpoint holds extra masks".into()));
        }

        let mut targets = agent.tensors_mut();
        if targets.len() != self.tensors.len() {
            return Err(mismatch(format!(
                "{} tensors stored, agent has {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for ((name, dst), (entry, values)) in targets
            .iter_mut()
            .zip(self.header.tensors.iter().zip(&self.tensors))
        {
            if *name != entry.name || dst.dim() != (entry.rows, entry.cols) {
                return Err(mismatch(format!(
                    "tensor `{}` does not match `{name}`",
                    entry.name
                )));
            }
            let src = Array2::from_shape_vec(
                (entry.rows, entry.cols),
                values.iter().map(|&v| v as f64).collect(),
            )
            .expect("sized by header");
            dst.assign(&src);
        }
        drop(targets);

        for (label, net) in agent.networks_mut() {
            let norm = self
                .header
                .normalizers
                .get(label)
                .ok_or_else(|| mismatch(format!("no normalizer for `{label}`")))?;
            *net.normalizer_mut() = norm.clone();
        }
        for (name, value) in &self.header.scalars {
            if !agent.set_scalar(name, *value) {
                return Err(mismatch(format!("unknown scalar `{name}`")));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self
            .buf
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
