//! Binary checkpoint container.
//!
//! ```text
//! "PLMF"  u32 version
//! u32 config_len, config as JSON
//! u32 tensor_count, then per tensor:
//!     u16 name_len, name (UTF-8)
//!     u8 precision (0 = f32, 1 = int8)
//!     u8 ndims, u32 dims[ndims]
//!     f32 payload                               (precision 0)
//!     f32 scales[dims[0]], i8 payload           (precision 1)
//! u32 state_len, optional JSON training state (state_len may be 0)
//! ```
//!
//! All integers and floats are little-endian. Tensors are written in the
//! canonical order of [`Parameters::tensors`].

use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::params::Parameters;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PLMF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    /// Symmetric int8 with one scale per row (`dims[0]` rows).
    I8 { scales: Vec<f32>, values: Vec<i8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
    pub state: Option<serde_json::Value>,
}

impl CheckpointFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            if name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor `{}` header too large", t.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let tag: u8 = match t.payload {
                Payload::F32(_) => 0,
                Payload::I8 { .. } => 1,
            };
            out.push(tag);
            out.push(t.shape.len() as u8);
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            match &t.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::I8 { scales, values } => {
                    scales
                        .iter()
                        .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                    out.extend(values.iter().map(|&v| v as u8));
                }
            }
        }
        match &self.state {
            Some(s) => {
                let bytes = serde_json::to_vec(s)?;
                out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                out.extend_from_slice(&bytes);
            }
            None => out.extend_from_slice(&0u32.to_le_bytes()),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let cfg_len = r.u32("config length")? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
            .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let tag = r.u8(&name)?;
            let ndims = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.u32(&name)? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = match tag {
                0 => Payload::F32(r.f32s(numel, &name)?),
                1 => {
                    let rows = shape.first().copied().unwrap_or(0);
                    let scales = r.f32s(rows, &name)?;
                    let values = r.take(numel, &name)?.iter().map(|&b| b as i8).collect();
                    Payload::I8 { scales, values }
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has unknown precision tag {other}"
                    )))
                }
            };
            tensors.push(TensorRecord {
                name,
                shape,
                payload,
            });
        }
        let state_len = r.u32("state length")? as usize;
        let state = if state_len == 0 {
            None
        } else {
            Some(
                serde_json::from_slice(r.take(state_len, "training state")?)
                    .map_err(|e| Error::Checkpoint(format!("invalid training state: {e}")))?,
            )
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(CheckpointFile {
            config,
            tensors,
            state,
        })
    }

    /// Writes through a temporary file and renames, so readers never see a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "file truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// FP32 records for every parameter tensor, in canonical order.
pub fn param_records(params: &Parameters<f32>, prefix: &str) -> Vec<TensorRecord> {
    params
        .tensors()
        .into_iter()
        .map(|t| TensorRecord {
            name: format!("{prefix}{}", t.name),
            shape: t.shape,
            payload: Payload::F32(t.data.to_vec()),
        })
        .collect()
}

/// Rebuilds parameters from FP32 records named `{prefix}{tensor}`, checking
/// every shape against `config`.
pub fn params_from_records(
    config: &ModelConfig,
    file: &CheckpointFile,
    prefix: &str,
) -> Result<Parameters<f32>> {
    let mut params = Parameters::<f32>::zeros(config)?;
    for t in params.tensors_mut() {
        let name = format!("{prefix}{}", t.name);
        let rec = file
            .tensor(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if rec.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, config expects {:?}",
                rec.shape, t.shape
            )));
        }
        match &rec.payload {
            Payload::F32(v) => t.data.copy_from_slice(v),
            Payload::I8 { .. } => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` is int8; load it as a quantized model"
                )))
            }
        }
    }
    Ok(params)
}

pub fn save_params(params: &Parameters<f32>, path: &Path) -> Result<()> {
    CheckpointFile {
        config: params.config.clone(),
        tensors: param_records(params, ""),
        state: None,
    }
    .write(path)
}

pub fn load_params(path: &Path) -> Result<Parameters<f32>> {
    let file = CheckpointFile::read(path)?;
    file.config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
    params_from_records(&file.config, &file, "")
}
