//! Checkpoint file: 8-byte magic, little-endian u64 header length, JSON
//! header, then every parameter as contiguous little-endian f64 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParameters, Mtdt};
use crate::error::{Error, Result};
use crate::graph::{edge_feature_len, GraphTemplate};
use crate::norm::NormalizationSpec;
use crate::sim::topology::PhaseMap;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTDTCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub id: String,
    pub config: ModelConfig,
    pub norm: NormalizationSpec,
    pub exit_template: GraphTemplate,
    pub inflow_template: GraphTemplate,
    pub phase_map: PhaseMap,
    pub tmc_size: usize,
    pub params: Vec<ParamEntry>,
    /// Free-form training metadata (selected hyperparameters, best epoch).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// First 16 hex digits of the SHA-256 of the parameter payload.
pub fn checkpoint_id(payload: &[u8]) -> String {
    Sha256::digest(payload).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl Mtdt {
    fn payload(&self) -> (Vec<ParamEntry>, Vec<u8>) {
        let mut entries = Vec::new();
        let mut bytes = Vec::with_capacity(self.params.num_scalars() * 8);
        let mut offset = 0;
        for (name, t) in self.params.named() {
            entries.push(ParamEntry { name, shape: t.shape().to_vec(), offset });
            offset += t.len();
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        (entries, bytes)
    }

    pub fn checkpoint_id(&self) -> String {
        checkpoint_id(&self.payload().1)
    }

    pub fn header(&self, meta: BTreeMap<String, serde_json::Value>) -> CheckpointHeader {
        let (params, payload) = self.payload();
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            id: checkpoint_id(&payload),
            config: self.config.clone(),
            norm: self.norm.clone(),
            exit_template: self.exit_template.clone(),
            inflow_template: self.inflow_template.clone(),
            phase_map: self.phase_map.clone(),
            tmc_size: self.tmc_size,
            params,
            meta,
        }
    }

    pub fn to_bytes(&self, meta: BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
        let header = self.header(meta);
        let json = serde_json::to_vec(&header)?;
        let (_, payload) = self.payload();
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
        fs::write(path, self.to_bytes(meta)?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointHeader)> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not an MTDT checkpoint"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &body[len..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        if checkpoint_id(payload) != header.id {
            return Err(bad("payload does not match the checkpoint id"));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParameters::init(&mut rng, &header.config, edge_feature_len(header.tmc_size))?;
        let names: Vec<(String, Vec<usize>)> =
            params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if names.len() != header.params.len() {
            return Err(bad(format!("expected {} tensors, header lists {}", names.len(), header.params.len())));
        }
        for ((name, shape), (slot, entry)) in names.iter().zip(params.tensors_mut().into_iter().zip(&header.params)) {
            if *name != entry.name || *shape != entry.shape {
                return Err(bad(format!("tensor {} {:?} does not match {name} {shape:?}", entry.name, entry.shape)));
            }
            let n: usize = shape.iter().product();
            let data = values
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| bad(format!("tensor {name} runs past the payload")))?;
            *slot = Tensor::new(shape.clone(), data.to_vec())?;
        }
        let model = Mtdt {
            config: header.config.clone(),
            params,
            norm: header.norm.clone(),
            exit_template: header.exit_template.clone(),
            inflow_template: header.inflow_template.clone(),
            phase_map: header.phase_map.clone(),
            tmc_size: header.tmc_size,
        };
        Ok((model, header))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        Self::from_bytes(&fs::read(path)?)
    }
}
