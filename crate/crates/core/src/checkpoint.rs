//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `A3DF` |
//! | 4 | `u32` format version |
//! | 4 | `u32` length `L` of the config block |
//! | L | JSON config block: field config, density bias, prompts, iteration |
//! | 8 | `u64` parameter count `P` |
//! | 4·P | parameters as `f32`, in [`crate::field::ParamLayout`] order |
//! | 4 | CRC-32 of every preceding byte |
//!
//! Parameters are kept `f32`-representable during training, so a round trip
//! is exact.

use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams, NeuralField, ParamLayout};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"A3DF";
pub const VERSION: u32 = 1;
const MAX_CONFIG_BLOCK: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    field: FieldConfig,
    density_bias: f64,
    prompts: Vec<String>,
    iteration: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: FieldConfig,
    pub params: FieldParams,
    pub prompts: Vec<String>,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn from_field(field: &NeuralField, prompts: &[String], iteration: u64) -> Self {
        Checkpoint {
            config: field.config().clone(),
            params: field.params.clone(),
            prompts: prompts.to_vec(),
            iteration,
        }
    }

    pub fn to_field(&self) -> Result<NeuralField> {
        NeuralField::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.params.values.iter().any(|&v| (v as f32) as f64 != v) || (self.params.density_bias as f32) as f64 != self.params.density_bias {
            return Err(Error::invalid("parameters are not f32-representable; round them to storage precision first"));
        }
        let block = ConfigBlock {
            field: self.config.clone(),
            density_bias: self.params.density_bias,
            prompts: self.prompts.clone(),
            iteration: self.iteration,
        };
        let json = serde_json::to_vec(&block).map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(24 + json.len() + 4 * self.params.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.values.len() as u64).to_le_bytes());
        for &v in &self.params.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Decodes and fully validates a checkpoint; `origin` names the source
    /// in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Integrity {
            path: origin.into(),
            reason: reason.to_string(),
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing A3DF magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
        }
        if bytes.len() < 16 {
            return Err(bad("truncated header"));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if len > MAX_CONFIG_BLOCK || 12 + len + 8 > body.len() {
            return Err(bad("truncated config block"));
        }
        let block: ConfigBlock = serde_json::from_slice(&bytes[12..12 + len]).map_err(|e| bad(&format!("config block: {e}")))?;
        let count_at = 12 + len;
        let count = u64::from_le_bytes(bytes[count_at..count_at + 8].try_into().expect("8 bytes")) as usize;
        let params_at = count_at + 8;
        if body.len() != params_at + 4 * count {
            return Err(bad(&format!("expected {} parameter bytes, found {}", 4 * count, body.len().saturating_sub(params_at))));
        }
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(bad("checksum mismatch"));
        }
        block.field.validate()?;
        let expected = ParamLayout::new(&block.field).total;
        if count != expected {
            return Err(bad(&format!("{count} parameters stored, config implies {expected}")));
        }
        let values = body[params_at..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Ok(Checkpoint {
            config: block.field,
            params: FieldParams {
                values,
                density_bias: block.density_bias,
            },
            prompts: block.prompts,
            iteration: block.iteration,
        })
    }

    /// Writes to a sibling temporary file, syncs, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let name = path.file_name().ok_or_else(|| Error::invalid("checkpoint path has no file name"))?;
        let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().inspect_err(|_| {
            let _ = std::fs::remove_file(&tmp);
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
