//! Policy files: an 8-byte magic, a little-endian `u64` header length, a JSON
//! header and the parameters as little-endian `f64`s. Parameters are written
//! layer by layer, each layer as its row-major `outputs × inputs` weights
//! followed by its biases.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Architecture, Dense, Network};
use crate::error::{Error, Result};
use crate::synthgen::{Schema, UseCase};

pub const MAGIC: &[u8; 8] = b"PRLPOL01";
pub const FORMAT: &str = "policy-artifact/1";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub algorithm: String,
    pub seed: u64,
    pub timestep: u64,
    pub total_timesteps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_wpahm: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format: String,
    pub architecture: Architecture,
    pub use_case: UseCase,
    pub schema_hash: String,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub training: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyArtifact {
    pub header: ArtifactHeader,
    pub network: Network,
}

impl PolicyArtifact {
    pub fn new(
        network: Network,
        schema: &Schema,
        lambda: Option<f64>,
        max_steps: Option<usize>,
        training: TrainingMeta,
    ) -> Self {
        Self {
            header: ArtifactHeader {
                format: FORMAT.into(),
                architecture: network.architecture().clone(),
                use_case: schema.use_case,
                schema_hash: schema.hash(),
                feature_names: schema.feature_names().map(str::to_owned).collect(),
                class_names: schema.classes.clone(),
                lambda,
                max_steps,
                training,
            },
            network,
        }
    }

    /// Fails unless the artifact was trained against `schema`.
    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        if self.header.schema_hash != schema.hash() {
            return Err(Error::config(format!(
                "policy was trained on a different {} schema",
                self.header.use_case
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.network.n_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for l in self.network.layers() {
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::config(format!("malformed policy file: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: ArtifactHeader = serde_json::from_slice(body)?;
        let mut payload = bytes[16 + len..].chunks_exact(8);
        if payload.len() * 8 != bytes.len() - 16 - len {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let arch = header.architecture.clone();
        let mut widths = vec![arch.inputs];
        widths.extend(&arch.hidden);
        widths.push(match arch.head {
            super::Head::Plain => arch.outputs,
            super::Head::Dueling => arch.outputs + 1,
        });
        let n = widths.len() - 1;
        let mut layers = Vec::with_capacity(n);
        let mut read = |count: usize| -> Result<Vec<f64>> {
            (0..count)
                .map(|_| {
                    payload
                        .next()
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .ok_or_else(|| bad("truncated payload"))
                })
                .collect()
        };
        for (i, w) in widths.windows(2).enumerate() {
            let weights = read(w[0] * w[1])?;
            let bias = read(w[1])?;
            layers.push(Dense {
                inputs: w[0],
                outputs: w[1],
                weights,
                bias,
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    arch.activation
                },
            });
        }
        if payload.next().is_some() {
            return Err(bad("trailing payload"));
        }
        let network = Network::from_layers(arch, layers)?;
        Ok(Self { header, network })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
