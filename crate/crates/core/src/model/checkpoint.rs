//! Binary checkpoint: magic, version, length-prefixed JSON header (schema,
//! shapes, calibration stats), then every tensor as little-endian `f32` in
//! declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Layout, Params};
use super::{D_MODEL, N_HEADS, N_LAYERS};
use crate::encoding::StatsTable;
use crate::error::{Error, Result};
use crate::sensor::{HomeSchema, SchemaFile};

pub const MAGIC: &[u8; 4] = b"TURS";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: SchemaFile,
    window_len: usize,
    d_model: usize,
    layers: usize,
    heads: usize,
    stats: StatsTable,
}

/// A trained model together with the schema and calibration statistics it
/// was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub schema: HomeSchema,
    pub stats: StatsTable,
}

impl Checkpoint {
    pub fn new(params: Params, schema: HomeSchema, stats: StatsTable) -> Result<Self> {
        if params.layout().input_width != schema.width() {
            return Err(Error::ShapeMismatch(format!(
                "parameters expect width {}, schema has {}",
                params.layout().input_width,
                schema.width()
            )));
        }
        Ok(Checkpoint { params, schema, stats })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            schema: self.schema.to_file(),
            window_len: self.params.layout().window_len,
            d_model: D_MODEL,
            layers: N_LAYERS,
            heads: N_HEADS,
            stats: self.stats.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(10 + json.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 10 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = 10usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[10..body]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        if header.d_model != D_MODEL || header.layers != N_LAYERS || header.heads != N_HEADS {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has d={}, layers={}, heads={}",
                header.d_model, header.layers, header.heads
            )));
        }
        let schema = HomeSchema::from_file(&header.schema)?;
        if schema.width() < 2 || header.window_len == 0 {
            return Err(corrupt("degenerate shapes"));
        }
        let layout = Layout::new(schema.width(), header.window_len);
        let tensor_bytes = &bytes[body..];
        if tensor_bytes.len() != 4 * layout.total {
            return Err(corrupt(&format!(
                "expected {} tensor bytes, found {}",
                4 * layout.total,
                tensor_bytes.len()
            )));
        }
        let data: Vec<f64> = tensor_bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let params = Params::from_data(layout, data).map_err(|e| corrupt(&e.to_string()))?;
        Ok(Checkpoint {
            params,
            schema,
            stats: header.stats,
        })
    }

    /// Loads and checks that the embedded schema equals `expected`.
    pub fn from_bytes_for(bytes: &[u8], expected: &HomeSchema) -> Result<Self> {
        let ck = Self::from_bytes(bytes)?;
        if &ck.schema != expected {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint schema has width {}, expected {}",
                ck.schema.width(),
                expected.width()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
