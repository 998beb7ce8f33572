//! Single-file model artifact: a JSON manifest followed by one binary payload.
//!
//! ```text
//! 0      8 bytes   magic "D2QMODEL"
//! 8      u64 LE    manifest length N
//! 16     N bytes   manifest, UTF-8 JSON
//! ...    0x00 pad  up to the next multiple of 64
//! P      payload   tensor sections, each at a 64-byte aligned offset from P
//! ```
//!
//! All numbers in the payload are little-endian. `f32` tensors are stored
//! as IEEE-754 bits, quantization codes and zero-points one byte per value.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{BlockWeights, ColScale, ModelBundle, ModelConfig, PROJECTIONS};
use crate::numerics::Matrix;
use crate::quant::{QuantizedTensor, Weight};

pub const MAGIC: &[u8; 8] = b"D2QMODEL";
pub const FORMAT_VERSION: &str = "d2q-model/1";
pub const ALIGNMENT: usize = 64;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("not a model artifact (bad magic)")]
    BadMagic,
    #[error("unsupported artifact version {found:?} (expected {FORMAT_VERSION:?})")]
    VersionMismatch { found: String },
    #[error("truncated artifact: need {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("tensor {name}: section [{offset}, {offset}+{length}) outside payload of {payload} bytes")]
    OutOfBounds {
        name: String,
        offset: u64,
        length: u64,
        payload: u64,
    },
    #[error("tensor {name}: {reason}")]
    ShapeInconsistency { name: String, reason: String },
    #[error("tensor {name} contains non-finite values")]
    NonFinite { name: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

/// Quantization metadata attached to the parts of a quantized weight.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantMeta {
    pub bits: u8,
    pub group_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub byte_order: String,
    pub alignment: usize,
    pub config: ModelConfig,
    pub payload_length: u64,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|e| e.name == name)
    }
}

/// Parsed manifest plus raw payload bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub manifest: Manifest,
    pub payload: Vec<u8>,
}

struct PayloadWriter {
    tensors: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, dtype: DType, shape: Vec<usize>, bytes: &[u8], quant: Option<QuantMeta>) {
        let pad = (ALIGNMENT - self.payload.len() % ALIGNMENT) % ALIGNMENT;
        self.payload.extend(std::iter::repeat_n(0u8, pad));
        self.tensors.push(TensorEntry {
            name,
            dtype,
            shape,
            offset: self.payload.len() as u64,
            length: bytes.len() as u64,
            quant,
        });
        self.payload.extend_from_slice(bytes);
    }

    fn f32s(&mut self, name: String, shape: Vec<usize>, values: &[f32]) {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, DType::F32, shape, &bytes, None);
    }

    fn weight(&mut self, name: String, w: &Weight) {
        match w {
            Weight::Dense(m) => self.f32s(name, vec![m.rows(), m.cols()], m.data()),
            Weight::Quantized(q) => {
                let meta = QuantMeta {
                    bits: q.bits(),
                    group_size: q.group_size(),
                };
                let groups = vec![q.rows(), q.n_groups()];
                self.push(format!("{name}.codes"), DType::U8, vec![q.rows(), q.cols()], q.codes(), Some(meta.clone()));
                let scales: Vec<u8> = q.scales().iter().flat_map(|v| v.to_le_bytes()).collect();
                self.push(format!("{name}.scales"), DType::F32, groups.clone(), &scales, Some(meta.clone()));
                self.push(format!("{name}.zero_points"), DType::U8, groups, q.zero_points(), Some(meta));
            }
        }
    }
}

fn block_prefix(l: usize) -> String {
    format!("blocks.{l}")
}

impl ModelArtifact {
    pub fn from_bundle(m: &ModelBundle) -> Result<Self> {
        m.validate()?;
        let mut w = PayloadWriter {
            tensors: Vec::new(),
            payload: Vec::new(),
        };
        let d = m.config.d_model;
        w.f32s("embedding".into(), vec![m.config.vocab, d], m.embedding.data());
        for (l, b) in m.blocks.iter().enumerate() {
            let p = block_prefix(l);
            for name in PROJECTIONS {
                w.weight(format!("{p}.{name}"), b.projection(name).expect("known projection"));
            }
            w.f32s(format!("{p}.pre_ln_gamma"), vec![d], &b.pre_ln_gamma);
            w.f32s(format!("{p}.post_attn_ln_gamma"), vec![d], &b.post_attn_ln_gamma);
            w.f32s(format!("{p}.post_attn_ln_bias"), vec![d], &b.post_attn_ln_bias);
            match &b.down_col_scale {
                ColScale::None => {}
                ColScale::Folded(c) => w.f32s(format!("{p}.down_col_scale.folded"), vec![c.len()], c),
                ColScale::Explicit(c) => w.f32s(format!("{p}.down_col_scale.explicit"), vec![c.len()], c),
            }
        }
        w.f32s("final_norm_gamma".into(), vec![d], &m.final_norm_gamma);
        w.f32s("head".into(), vec![m.config.vocab, d], m.head.data());
        Ok(Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION.into(),
                byte_order: "little-endian".into(),
                alignment: ALIGNMENT,
                config: m.config.clone(),
                payload_length: w.payload.len() as u64,
                tensors: w.tensors,
            },
            payload: w.payload,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + ALIGNMENT + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        let pad = (ALIGNMENT - out.len() % ALIGNMENT) % ALIGNMENT;
        out.extend(std::iter::repeat_n(0u8, pad));
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses and fully validates an artifact. Nothing is decoded until the
    /// version and every section's bounds and shape have been checked.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ArtifactError> {
        if bytes.len() < HEADER_LEN {
            return Err(if bytes.starts_with(&MAGIC[..bytes.len().min(8)]) && !bytes.is_empty() {
                ArtifactError::Truncated {
                    expected: HEADER_LEN as u64,
                    actual: bytes.len() as u64,
                }
            } else {
                ArtifactError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(ArtifactError::BadMagic);
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let manifest_end = (HEADER_LEN as u64).checked_add(n).ok_or(ArtifactError::Truncated {
            expected: u64::MAX,
            actual: bytes.len() as u64,
        })?;
        if manifest_end > bytes.len() as u64 {
            return Err(ArtifactError::Truncated {
                expected: manifest_end,
                actual: bytes.len() as u64,
            });
        }
        let raw: serde_json::Value = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end as usize])
            .map_err(|e| ArtifactError::Manifest(e.to_string()))?;
        let version = raw.get("format_version").and_then(|v| v.as_str()).unwrap_or("");
        if version != FORMAT_VERSION {
            return Err(ArtifactError::VersionMismatch {
                found: version.to_string(),
            });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| ArtifactError::Manifest(e.to_string()))?;
        if manifest.byte_order != "little-endian" || manifest.alignment != ALIGNMENT {
            return Err(ArtifactError::Manifest(format!(
                "unsupported layout: byte_order {}, alignment {}",
                manifest.byte_order, manifest.alignment
            )));
        }
        let payload_start = manifest_end.div_ceil(ALIGNMENT as u64) * ALIGNMENT as u64;
        let expected = payload_start + manifest.payload_length;
        if (bytes.len() as u64) < expected {
            return Err(ArtifactError::Truncated {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let payload = bytes[payload_start as usize..expected as usize].to_vec();
        for e in &manifest.tensors {
            check_entry(e, manifest.payload_length)?;
        }
        Ok(Self { manifest, payload })
    }

    fn section(&self, name: &str) -> std::result::Result<(&TensorEntry, &[u8]), ArtifactError> {
        let e = self
            .manifest
            .entry(name)
            .ok_or_else(|| ArtifactError::MissingTensor(name.to_string()))?;
        Ok((e, &self.payload[e.offset as usize..(e.offset + e.length) as usize]))
    }

    fn f32s(&self, name: &str, shape: &[usize]) -> std::result::Result<Vec<f32>, ArtifactError> {
        let (e, bytes) = self.section(name)?;
        expect(e, DType::F32, shape)?;
        let v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ArtifactError::NonFinite { name: name.into() });
        }
        Ok(v)
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> std::result::Result<Matrix, ArtifactError> {
        let data = self.f32s(name, &[rows, cols])?;
        Matrix::new(rows, cols, data).map_err(|e| ArtifactError::ShapeInconsistency {
            name: name.into(),
            reason: e.to_string(),
        })
    }

    fn weight(&self, name: &str, rows: usize, cols: usize) -> std::result::Result<Weight, ArtifactError> {
        if self.manifest.entry(name).is_some() {
            return Ok(Weight::Dense(self.matrix(name, rows, cols)?));
        }
        let codes_name = format!("{name}.codes");
        let (ce, codes) = self.section(&codes_name)?;
        expect(ce, DType::U8, &[rows, cols])?;
        let meta = ce.quant.clone().ok_or_else(|| ArtifactError::ShapeInconsistency {
            name: codes_name.clone(),
            reason: "quantized codes without bits/group_size".into(),
        })?;
        if meta.group_size == 0 || !cols.is_multiple_of(meta.group_size) {
            return Err(ArtifactError::ShapeInconsistency {
                name: codes_name,
                reason: format!("group_size {} does not divide {cols}", meta.group_size),
            });
        }
        let groups = [rows, cols / meta.group_size];
        let scales = self.f32s(&format!("{name}.scales"), &groups)?;
        let (ze, zps) = self.section(&format!("{name}.zero_points"))?;
        expect(ze, DType::U8, &groups)?;
        for e in [ce, ze, self.section(&format!("{name}.scales"))?.0] {
            if e.quant.as_ref() != Some(&meta) {
                return Err(ArtifactError::ShapeInconsistency {
                    name: e.name.clone(),
                    reason: "quantization metadata disagrees between parts".into(),
                });
            }
        }
        QuantizedTensor::from_parts(rows, cols, meta.bits, meta.group_size, codes.to_vec(), scales, zps.to_vec())
            .map(Weight::Quantized)
            .map_err(|e| ArtifactError::ShapeInconsistency {
                name: name.into(),
                reason: e.to_string(),
            })
    }

    pub fn to_bundle(&self) -> Result<ModelBundle> {
        let cfg = self.manifest.config.clone();
        cfg.validate()?;
        let (d, f, v) = (cfg.d_model, cfg.d_ffn, cfg.vocab);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = block_prefix(l);
            let w = |name: &str, r, c| self.weight(&format!("{p}.{name}"), r, c);
            let folded = format!("{p}.down_col_scale.folded");
            let explicit = format!("{p}.down_col_scale.explicit");
            let down_col_scale = if self.manifest.entry(&folded).is_some() {
                ColScale::Folded(self.f32s(&folded, &[f])?)
            } else if self.manifest.entry(&explicit).is_some() {
                ColScale::Explicit(self.f32s(&explicit, &[f])?)
            } else {
                ColScale::None
            };
            blocks.push(BlockWeights {
                w_q: w("w_q", d, d)?,
                w_k: w("w_k", d, d)?,
                w_v: w("w_v", d, d)?,
                w_o: w("w_o", d, d)?,
                w_up: w("w_up", f, d)?,
                w_gate: w("w_gate", f, d)?,
                w_down: w("w_down", d, f)?,
                pre_ln_gamma: self.f32s(&format!("{p}.pre_ln_gamma"), &[d])?,
                post_attn_ln_gamma: self.f32s(&format!("{p}.post_attn_ln_gamma"), &[d])?,
                post_attn_ln_bias: self.f32s(&format!("{p}.post_attn_ln_bias"), &[d])?,
                down_col_scale,
            });
        }
        let bundle = ModelBundle {
            embedding: self.matrix("embedding", v, d)?,
            blocks,
            final_norm_gamma: self.f32s("final_norm_gamma", &[d])?,
            head: self.matrix("head", v, d)?,
            config: cfg,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Bits of weight payload at nominal precision over all projection
    /// slots, and the same slots at 16 bits per weight.
    pub fn projection_bits(&self) -> (u64, u64) {
        let mut quantized = 0u64;
        let mut dense16 = 0u64;
        for e in &self.manifest.tensors {
            let is_projection = PROJECTIONS.iter().any(|p| {
                e.name.ends_with(&format!(".{p}"))
                    || e.name.ends_with(&format!(".{p}.codes"))
                    || e.name.ends_with(&format!(".{p}.scales"))
                    || e.name.ends_with(&format!(".{p}.zero_points"))
            });
            if !is_projection {
                continue;
            }
            let n: u64 = e.shape.iter().product::<usize>() as u64;
            match (&e.quant, e.name.rsplit('.').next()) {
                (Some(meta), Some("codes")) => {
                    quantized += n * meta.bits as u64;
                    dense16 += n * 16;
                }
                (Some(_), Some("scales")) => quantized += n * crate::quant::GROUP_OVERHEAD_BITS,
                (Some(_), _) => {}
                (None, _) => {
                    quantized += n * 16;
                    dense16 += n * 16;
                }
            }
        }
        (quantized, dense16)
    }

    /// Weight-payload compression ratio against 16-bit dense storage.
    pub fn theoretical_ratio(&self) -> f64 {
        let (q, d) = self.projection_bits();
        d as f64 / q as f64
    }
}

fn check_entry(e: &TensorEntry, payload: u64) -> std::result::Result<(), ArtifactError> {
    let end = e.offset.checked_add(e.length);
    if end.is_none_or(|end| end > payload) {
        return Err(ArtifactError::OutOfBounds {
            name: e.name.clone(),
            offset: e.offset,
            length: e.length,
            payload,
        });
    }
    if !e.offset.is_multiple_of(ALIGNMENT as u64) {
        return Err(ArtifactError::ShapeInconsistency {
            name: e.name.clone(),
            reason: format!("offset {} not {ALIGNMENT}-byte aligned", e.offset),
        });
    }
    let elems = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    if elems.and_then(|n| n.checked_mul(e.dtype.size() as u64)) != Some(e.length) {
        return Err(ArtifactError::ShapeInconsistency {
            name: e.name.clone(),
            reason: format!("shape {:?} of {:?} does not match length {}", e.shape, e.dtype, e.length),
        });
    }
    Ok(())
}

fn expect(e: &TensorEntry, dtype: DType, shape: &[usize]) -> std::result::Result<(), ArtifactError> {
    if e.dtype != dtype || e.shape != shape {
        return Err(ArtifactError::ShapeInconsistency {
            name: e.name.clone(),
            reason: format!("expected {dtype:?} {shape:?}, found {:?} {:?}", e.dtype, e.shape),
        });
    }
    Ok(())
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn save_model(m: &ModelBundle, path: &Path) -> Result<()> {
    write_atomic(path, &ModelArtifact::from_bundle(m)?.to_bytes())
}

pub fn read_artifact(path: &Path) -> Result<ModelArtifact> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(ModelArtifact::from_bytes(&bytes)?)
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    read_artifact(path)?.to_bundle()
}
