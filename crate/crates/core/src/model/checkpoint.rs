//! Checkpoint files: one line of JSON metadata, a newline, then the raw
//! little-endian `f64` parameter data in the declared tensor order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, Parameters, TensorInfo};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub run_id: String,
    pub step: usize,
    pub epoch: Option<usize>,
    pub validation_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    provenance: Provenance,
    n_params: usize,
    tensors: Vec<TensorInfo>,
}

impl Checkpoint {
    pub fn new(params: Parameters, provenance: Provenance) -> Self {
        Self { params, provenance }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.params.config.clone(),
            provenance: self.provenance.clone(),
            n_params: self.params.n_params(),
            tensors: self.params.layout().tensors.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(self.params.data.len() * 8);
        for v in &self.params.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header terminator".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        let body = &bytes[nl + 1..];
        if body.len() != header.n_params * 8 {
            return Err(Error::Format(format!(
                "expected {} data bytes, found {}",
                header.n_params * 8,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let params = Parameters::from_data(header.config, data)?;
        if params.layout().tensors != header.tensors {
            return Err(Error::Format("tensor table does not match config".into()));
        }
        Ok(Self {
            params,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the parameter bytes, used to tie reports to weights.
    pub fn params_hash(&self) -> String {
        params_hash(&self.params)
    }
}

pub fn params_hash(params: &Parameters) -> String {
    let mut h = Sha256::new();
    for v in &params.data {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}
