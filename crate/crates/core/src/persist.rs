//! Weight and checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "DMTNETW\0"
//! version      u32       1
//! header_len   u64
//! header       header_len bytes of UTF-8 TOML
//! payload      raw little-endian tensors, in header order
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! The header records the element type, the model config, an optional
//! optimizer section and one `[[tensors]]` table per tensor with its name,
//! section (`param`, `adam_m` or `adam_v`), shape, dtype and payload offset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::param_specs;
use crate::optim::{AdamState, Moments};
use crate::params::{ParamSpec, ParamStore};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: [u8; 8] = *b"DMTNETW\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const CHECKSUM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub section: Section,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

impl TensorEntry {
    fn byte_len(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.size_of()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: DType,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

/// Parameters, their config and optionally the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub optimizer: Option<AdamState<T>>,
}

fn push_tensor<T: Element>(
    tensors: &mut Vec<TensorEntry>,
    payload: &mut Vec<u8>,
    name: &str,
    section: Section,
    t: &Tensor<T>,
) {
    tensors.push(TensorEntry {
        name: name.to_string(),
        section,
        shape: t.shape().to_vec(),
        dtype: T::DTYPE,
        offset: payload.len() as u64,
    });
    for &v in t.data() {
        v.write_le(payload);
    }
}

pub fn to_bytes<T: Element>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for e in ckpt.params.iter() {
        push_tensor(&mut tensors, &mut payload, &e.name, Section::Param, &e.value);
    }
    if let Some(opt) = &ckpt.optimizer {
        for mo in &opt.moments {
            push_tensor(&mut tensors, &mut payload, &mo.name, Section::AdamM, &mo.m);
        }
        for mo in &opt.moments {
            push_tensor(&mut tensors, &mut payload, &mo.name, Section::AdamV, &mo.v);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        config: ckpt.config.clone(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader { step: o.step }),
        tensors,
    };
    let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX + text.len() + payload.len() + CHECKSUM);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Checks framing and checksum, returning the header and payload.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a weight container (bad magic)".into()));
    }
    if bytes.len() < PREFIX + CHECKSUM {
        return Err(Error::Format("truncated file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body_end = bytes.len() - CHECKSUM;
    if header_len > (body_end - PREFIX) as u64 {
        return Err(Error::Format("truncated file".into()));
    }
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let header_end = PREFIX + header_len as usize;
    let text = std::str::from_utf8(&bytes[PREFIX..header_end]).map_err(|e| Error::Format(e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Format("header and prefix disagree on the format version".into()));
    }
    let payload = &bytes[header_end..body_end];
    let mut expected = 0u64;
    for t in &header.tensors {
        if t.offset != expected {
            return Err(Error::Format(format!("tensor `{}` at offset {}, expected {expected}", t.name, t.offset)));
        }
        expected += t.byte_len();
    }
    if expected != payload.len() as u64 {
        return Err(Error::Format(format!("payload holds {} bytes, header describes {expected}", payload.len())));
    }
    Ok((header, payload))
}

fn decode_tensor<T: Element>(entry: &TensorEntry, payload: &[u8]) -> Result<Tensor<T>> {
    let start = entry.offset as usize;
    let bytes = &payload[start..start + entry.byte_len() as usize];
    let size = entry.dtype.size_of();
    let data: Vec<T> = match entry.dtype {
        DType::F32 => bytes.chunks_exact(size).map(|b| T::of(f32::read_le(b) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(size).map(|b| T::of(f64::read_le(b))).collect(),
    };
    Tensor::from_vec(entry.shape.clone(), data)
}

/// Checks the header's parameter list against `specs` before anything is
/// decoded. Reports the first missing or unexpected parameter.
fn check_header_params(header: &Header, specs: &[ParamSpec]) -> Result<()> {
    let stored: Vec<&TensorEntry> = header.tensors.iter().filter(|t| t.section == Section::Param).collect();
    for spec in specs {
        match stored.iter().find(|t| t.name == spec.name) {
            None => return Err(Error::ParamMismatch(format!("missing parameter `{}`", spec.name))),
            Some(t) if t.shape != spec.shape => {
                return Err(Error::ParamMismatch(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name, t.shape, spec.shape
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = stored.iter().find(|t| !specs.iter().any(|s| s.name == t.name)) {
        return Err(Error::ParamMismatch(format!("unexpected parameter `{}`", extra.name)));
    }
    Ok(())
}

fn decode<T: Element>(header: &Header, payload: &[u8]) -> Result<Checkpoint<T>> {
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for t in &header.tensors {
        let value = decode_tensor::<T>(t, payload)?;
        match t.section {
            Section::Param => params.insert(t.name.clone(), value)?,
            Section::AdamM => m.push((t.name.clone(), value)),
            Section::AdamV => v.push((t.name.clone(), value)),
        }
    }
    let optimizer = match &header.optimizer {
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(Error::Format("optimizer tensors without an optimizer section".into())),
        Some(o) => {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::Format("optimizer section does not cover every parameter".into()));
            }
            let mut moments = Vec::with_capacity(m.len());
            for ((e, (mn, mt)), (vn, vt)) in params.iter().zip(m).zip(v) {
                if mn != e.name || vn != e.name || mt.shape() != e.value.shape() || vt.shape() != e.value.shape() {
                    return Err(Error::Format(format!("optimizer slot `{mn}` does not match `{}`", e.name)));
                }
                moments.push(Moments { name: mn, m: mt, v: vt });
            }
            Some(AdamState { step: o.step, moments })
        }
    };
    Ok(Checkpoint { config: header.config.clone(), params, optimizer })
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, payload) = read_header(bytes)?;
    decode(&header, payload)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint<T: Element>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(ckpt)?)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    from_bytes(&std::fs::read(path)?)
}

pub fn save_weights<T: Element>(params: &ParamStore<T>, config: &ModelConfig, path: &Path) -> Result<()> {
    save_checkpoint(&Checkpoint { config: config.clone(), params: params.clone(), optimizer: None }, path)
}

pub fn load_weights<T: Element>(path: &Path) -> Result<(ParamStore<T>, ModelConfig)> {
    let ckpt = load_checkpoint::<T>(path)?;
    Ok((ckpt.params, ckpt.config))
}

/// Loads the parameters of a file into a store laid out for `config`,
/// failing before any tensor is decoded if the parameter sets differ.
pub fn load_weights_for<T: Element>(path: &Path, config: &ModelConfig) -> Result<ParamStore<T>> {
    config.validate()?;
    let bytes = std::fs::read(path)?;
    let (header, payload) = read_header(&bytes)?;
    check_header_params(&header, &param_specs(config))?;
    Ok(decode::<T>(&header, payload)?.params)
}
