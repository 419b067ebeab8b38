//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "MEDCLCK\0"
//! 8 bytes   header length L (u64, little endian)
//! L bytes   JSON header (CheckpointHeader)
//! ...       payload: every section's f64 values, little endian, in header order
//! ```
//!
//! The header carries a format version, the model spec and layout, the
//! section table and free-form JSON metadata. Model checkpoints hold a single
//! `params` section; training states add more sections and metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LayerInfo, ModelParams, ModelSpec, SegnetError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEDCLCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const PARAMS_SECTION: &str = "params";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint layout does not match its model spec")]
    LayoutMismatch,
    #[error("checkpoint is missing section {0:?}")]
    MissingSection(String),
    #[error("checkpoint holds non-finite parameters")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] SegnetError),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// `"model"` or `"train_state"`.
    pub kind: String,
    pub model: ModelSpec,
    pub layout: Vec<LayerInfo>,
    pub sections: Vec<SectionInfo>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub model: ModelSpec,
    pub sections: Vec<Section>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// A model-only checkpoint.
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            kind: "model".into(),
            model: *params.spec(),
            sections: vec![Section {
                name: PARAMS_SECTION.into(),
                values: params.data().to_vec(),
            }],
            meta: serde_json::Value::Null,
        }
    }

    pub fn section(&self, name: &str) -> Result<&[f64], CheckpointError> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.values.as_slice())
            .ok_or_else(|| CheckpointError::MissingSection(name.into()))
    }

    pub fn params(&self) -> Result<ModelParams, CheckpointError> {
        let values = self.section(PARAMS_SECTION)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite);
        }
        Ok(ModelParams::from_vec(self.model, values.to_vec())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            model: self.model,
            layout: self.model.layout(),
            sections: self
                .sections
                .iter()
                .map(|s| SectionInfo {
                    name: s.name.clone(),
                    len: s.values.len(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec_pretty(&header)?;
        let payload: usize = self.sections.iter().map(|s| s.values.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in &self.sections {
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        Self::read_from(&mut &bytes[..])
    }

    fn read_from(reader: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        read_exact(reader, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 8];
        read_exact(reader, &mut len, "header length")?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        read_exact(reader, &mut json, "header")?;
        // Version first, so newer files fail with a clear message rather
        // than a schema error.
        let probe: serde_json::Value = serde_json::from_slice(&json)?;
        let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header: CheckpointHeader = serde_json::from_value(probe)?;
        header.model.validate()?;
        if header.layout != header.model.layout() {
            return Err(CheckpointError::LayoutMismatch);
        }
        let mut sections = Vec::with_capacity(header.sections.len());
        for info in &header.sections {
            let mut raw = vec![0u8; info.len * 8];
            read_exact(reader, &mut raw, &info.name)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            sections.push(Section {
                name: info.name.clone(),
                values,
            });
        }
        Ok(Self {
            kind: header.kind,
            model: header.model,
            sections,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(what.to_string()),
        _ => CheckpointError::Io(e),
    })
}
