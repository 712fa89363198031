//! Binary container shared by models, coefficients and importance reports.
//!
//! Layout:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `EMCK` |
//! | 1 | format version (`1`) |
//! | 4 | header length `h`, `u32` little-endian |
//! | h | header, UTF-8 JSON with sorted keys |
//! | p | tensor payload, `f64` little-endian, row-major, in header order |
//! | 32 | SHA-256 of every preceding byte |
//!
//! The header has keys `config`, `kind`, `metadata` and `tensors`; each tensor
//! entry records `name`, `shape`, byte `offset` into the payload and byte `len`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use emerge_core::chunked::{ChunkCoefficients, ChunkPlan, ImportanceReport};
use emerge_core::{LayerCoefficients, ModelConfig, ModelParams, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MAGIC: [u8; 4] = *b"EMCK";
pub const VERSION: u8 = 1;
const PREFIX: usize = 9;
const DIGEST: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint checksum mismatch (file is corrupted)")]
    Checksum,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind {
        expected: &'static str,
        found: String,
    },
}

impl CheckpointError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CheckpointError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigHeader {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
}

impl Default for ConfigHeader {
    fn default() -> Self {
        ModelConfig::default().into()
    }
}

impl From<ModelConfig> for ConfigHeader {
    fn from(c: ModelConfig) -> Self {
        ConfigHeader {
            vocab_size: c.vocab_size,
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_blocks: c.n_blocks,
            d_mlp: c.d_mlp,
            max_seq_len: c.max_seq_len,
        }
    }
}

impl From<ConfigHeader> for ModelConfig {
    fn from(c: ConfigHeader) -> Self {
        ModelConfig {
            vocab_size: c.vocab_size,
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_blocks: c.n_blocks,
            d_mlp: c.d_mlp,
            max_seq_len: c.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: ConfigHeader,
    pub tensors: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, Value>,
}

/// Decoded container: header plus tensors in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: ModelConfig,
    pub metadata: BTreeMap<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str, config: ModelConfig) -> Self {
        Container {
            kind: kind.to_string(),
            config,
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.tensors.push((name.to_string(), tensor));
    }

    fn take(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::Inconsistent(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(idx).1)
    }

    fn expect_kind(&self, kind: &'static str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind,
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = 8 * t.numel() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.into(),
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let header_bytes = canonical_json(&header);
        let mut out = Vec::with_capacity(PREFIX + header_bytes.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated("missing magic".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREFIX {
            return Err(CheckpointError::Truncated("missing header length".into()));
        }
        if bytes[4] != VERSION {
            return Err(CheckpointError::UnsupportedVersion(bytes[4]));
        }
        if bytes.len() < PREFIX + DIGEST {
            return Err(CheckpointError::Truncated("missing checksum".into()));
        }
        let (bytes, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(bytes).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let header_len = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
        let payload_start = PREFIX
            .checked_add(header_len)
            .ok_or_else(|| CheckpointError::Inconsistent("header length overflow".into()))?;
        if bytes.len() < payload_start {
            return Err(CheckpointError::Truncated(format!(
                "header needs {header_len} bytes, file has {}",
                bytes.len() - PREFIX
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[PREFIX..payload_start])
            .map_err(|e| CheckpointError::Inconsistent(format!("header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
            if e.len != 8 * numel {
                return Err(CheckpointError::Inconsistent(format!(
                    "tensor {} declares {} bytes for shape {:?}",
                    e.name, e.len, e.shape
                )));
            }
            if e.offset != expected_offset {
                return Err(CheckpointError::Inconsistent(format!(
                    "tensor {} at offset {}, expected {}",
                    e.name, e.offset, expected_offset
                )));
            }
            expected_offset += e.len;
        }
        let payload_len = payload.len() as u64;
        if payload_len < expected_offset {
            return Err(CheckpointError::Truncated(format!(
                "payload has {payload_len} bytes, header declares {expected_offset}"
            )));
        }
        if payload_len > expected_offset {
            return Err(CheckpointError::Inconsistent(format!(
                "payload has {} trailing bytes",
                payload_len - expected_offset
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.len) as usize];
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| {
                CheckpointError::Inconsistent(format!("tensor {}: {err}", e.name))
            })?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Container {
            kind: header.kind,
            config: header.config.into(),
            metadata: header.metadata,
            tensors,
        })
    }
}

/// JSON with object keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("header is serializable");
    serde_json::to_vec(&v).expect("value is serializable")
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CheckpointError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CheckpointError::io(dir, e))?;
    tmp.write_all(bytes)
        .map_err(|e| CheckpointError::io(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| CheckpointError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| CheckpointError::io(path, e.error))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::io(path, e))?;
    Container::from_bytes(&bytes)
}

pub const KIND_MODEL: &str = "model";
pub const KIND_LAYER: &str = "layer_coefficients";
pub const KIND_CHUNK: &str = "chunk_coefficients";
pub const KIND_IMPORTANCE: &str = "importance_report";

pub fn model_container(params: &ModelParams) -> Container {
    let mut c = Container::new(KIND_MODEL, *params.config());
    for (unit, t) in params.iter() {
        c.push(&unit.name(), t.clone());
    }
    c
}

pub fn model_from_container(mut c: Container) -> Result<ModelParams, CheckpointError> {
    c.expect_kind(KIND_MODEL)?;
    c.config
        .validate()
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    let units = c.config.units();
    if units.len() != c.tensors.len() {
        return Err(CheckpointError::Inconsistent(format!(
            "model has {} tensors, config needs {}",
            c.tensors.len(),
            units.len()
        )));
    }
    let mut tensors = Vec::with_capacity(units.len());
    for (unit, (name, t)) in units.iter().zip(std::mem::take(&mut c.tensors)) {
        if unit.name() != name {
            return Err(CheckpointError::Inconsistent(format!(
                "tensor {name} where {} was expected",
                unit.name()
            )));
        }
        tensors.push(t);
    }
    ModelParams::from_tensors(c.config, tensors)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))
}

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows.first().map_or(0, Vec::len);
    let data = rows.iter().flatten().copied().collect();
    Tensor::new(vec![rows.len(), cols], data).expect("rectangular finite matrix")
}

fn rows_of(t: &Tensor, what: &str) -> Result<Vec<Vec<f64>>, CheckpointError> {
    if t.shape().len() != 2 {
        return Err(CheckpointError::Inconsistent(format!(
            "{what} must be a matrix"
        )));
    }
    let cols = t.shape()[1];
    Ok(t.data()
        .chunks(cols.max(1))
        .take(t.shape()[0])
        .map(<[f64]>::to_vec)
        .collect())
}

fn vector(values: &[f64]) -> Tensor {
    Tensor::from_vec(values.to_vec())
}

fn counts_tensor(values: &[usize]) -> Tensor {
    Tensor::from_vec(values.iter().map(|&v| v as f64).collect())
}

fn counts_of(t: &Tensor, what: &str) -> Result<Vec<usize>, CheckpointError> {
    t.data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 2f64.powi(53) {
                Ok(x as usize)
            } else {
                Err(CheckpointError::Inconsistent(format!(
                    "{what} holds non-integer {x}"
                )))
            }
        })
        .collect()
}

pub fn layer_container(config: ModelConfig, coeffs: &LayerCoefficients) -> Container {
    let mut c = Container::new(KIND_LAYER, config);
    c.push("alpha", matrix(&coeffs.alpha));
    c.push("prior", vector(&coeffs.prior));
    c
}

pub fn layer_from_container(
    mut c: Container,
) -> Result<(ModelConfig, LayerCoefficients), CheckpointError> {
    c.expect_kind(KIND_LAYER)?;
    let alpha = rows_of(&c.take("alpha")?, "alpha")?;
    let prior = c.take("prior")?.into_data();
    let units = c.config.unit_count();
    if alpha.len() != prior.len() || alpha.iter().any(|r| r.len() != units) {
        return Err(CheckpointError::Inconsistent(
            "alpha shape disagrees with prior/config".into(),
        ));
    }
    Ok((c.config, LayerCoefficients { alpha, prior }))
}

pub fn chunk_container(
    config: ModelConfig,
    plan: &ChunkPlan,
    coeffs: &ChunkCoefficients,
) -> Container {
    let mut c = Container::new(KIND_CHUNK, config);
    c.push("plan.params", vector(&[plan.budget, plan.kappa]));
    c.push("plan.counts", counts_tensor(&plan.counts));
    c.push("plan.unit_sizes", counts_tensor(&plan.unit_sizes));
    c.push("prior", vector(&coeffs.prior));
    c.push("frozen", matrix(&coeffs.frozen));
    c.push("chunks", vector(&coeffs.flatten()));
    c
}

pub fn chunk_from_container(
    mut c: Container,
) -> Result<(ModelConfig, ChunkPlan, ChunkCoefficients), CheckpointError> {
    c.expect_kind(KIND_CHUNK)?;
    let params = c.take("plan.params")?.into_data();
    if params.len() != 2 {
        return Err(CheckpointError::Inconsistent(
            "plan.params must hold budget and kappa".into(),
        ));
    }
    let counts = counts_of(&c.take("plan.counts")?, "plan.counts")?;
    let unit_sizes = counts_of(&c.take("plan.unit_sizes")?, "plan.unit_sizes")?;
    if counts.len() != unit_sizes.len() || counts.iter().zip(&unit_sizes).any(|(m, n)| m > n) {
        return Err(CheckpointError::Inconsistent(
            "chunk counts disagree with unit sizes".into(),
        ));
    }
    let prior = c.take("prior")?.into_data();
    let frozen = rows_of(&c.take("frozen")?, "frozen")?;
    let flat = c.take("chunks")?.into_data();
    let plan = ChunkPlan {
        budget: params[0],
        kappa: params[1],
        counts,
        unit_sizes,
    };
    if frozen.len() != prior.len() || flat.len() != prior.len() * plan.trainable_per_expert() {
        return Err(CheckpointError::Inconsistent(
            "chunk coefficient sizes disagree with plan".into(),
        ));
    }
    let mut it = flat.into_iter();
    let chunks = (0..prior.len())
        .map(|_| {
            plan.counts
                .iter()
                .map(|&m| it.by_ref().take(m).collect())
                .collect()
        })
        .collect();
    let coeffs = ChunkCoefficients {
        chunks,
        frozen,
        prior,
    };
    coeffs
        .check(&plan)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    Ok((c.config, plan, coeffs))
}

pub fn importance_container(report: &ImportanceReport) -> Container {
    let mut c = Container::new(KIND_IMPORTANCE, report.config);
    c.push("importance", vector(&report.importance));
    c.push("raw", vector(&report.raw));
    c.push("factors", matrix(&report.factors));
    c.push("param_counts", counts_tensor(&report.param_counts));
    c
}

pub fn importance_from_container(mut c: Container) -> Result<ImportanceReport, CheckpointError> {
    c.expect_kind(KIND_IMPORTANCE)?;
    let importance = c.take("importance")?.into_data();
    let raw = c.take("raw")?.into_data();
    let factors = rows_of(&c.take("factors")?, "factors")?;
    let param_counts = counts_of(&c.take("param_counts")?, "param_counts")?;
    let units = c.config.unit_count();
    if importance.len() != units
        || raw.len() != units
        || param_counts.len() != units
        || factors.iter().any(|r| r.len() != units)
    {
        return Err(CheckpointError::Inconsistent(
            "importance vectors disagree with config".into(),
        ));
    }
    Ok(ImportanceReport {
        config: c.config,
        importance,
        raw,
        factors,
        param_counts,
    })
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &model_container(params).to_bytes())
}

pub fn load_model(path: &Path) -> Result<ModelParams, CheckpointError> {
    model_from_container(read_container(path)?)
}

pub fn save_layer(
    config: ModelConfig,
    coeffs: &LayerCoefficients,
    path: &Path,
) -> Result<(), CheckpointError> {
    write_atomic(path, &layer_container(config, coeffs).to_bytes())
}

pub fn load_layer(path: &Path) -> Result<(ModelConfig, LayerCoefficients), CheckpointError> {
    layer_from_container(read_container(path)?)
}

pub fn save_chunk(
    config: ModelConfig,
    plan: &ChunkPlan,
    coeffs: &ChunkCoefficients,
    path: &Path,
) -> Result<(), CheckpointError> {
    write_atomic(path, &chunk_container(config, plan, coeffs).to_bytes())
}

pub fn load_chunk(
    path: &Path,
) -> Result<(ModelConfig, ChunkPlan, ChunkCoefficients), CheckpointError> {
    chunk_from_container(read_container(path)?)
}

pub fn save_importance(report: &ImportanceReport, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &importance_container(report).to_bytes())
}

pub fn load_importance(path: &Path) -> Result<ImportanceReport, CheckpointError> {
    importance_from_container(read_container(path)?)
}
