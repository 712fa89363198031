//! A small pre-norm decoder-only transformer.
//!
//! Blocks use RMS normalization, rotary position embeddings, causal
//! multi-head attention and a SiLU-gated MLP (`(silu(x Wg) * (x Wu)) Wd`).
//! There are no biases. Every parameter tensor is a mergeable unit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidConfig(&'static str),
    TokenOutOfVocab { token: usize, vocab: usize },
    SequenceTooLong { len: usize, max: usize },
    EmptySequence,
    UnknownUnit(String),
    SchemaMismatch(String),
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidConfig(m) => write!(f, "invalid model config: {m}"),
            ModelError::TokenOutOfVocab { token, vocab } => {
                write!(f, "token {token} outside vocabulary of size {vocab}")
            }
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence of length {len} exceeds maximum {max}")
            }
            ModelError::EmptySequence => write!(f, "empty token sequence"),
            ModelError::UnknownUnit(u) => write!(f, "unknown unit {u}"),
            ModelError::SchemaMismatch(m) => write!(f, "parameter schema mismatch: {m}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 32,
            n_heads: 2,
            n_blocks: 4,
            d_mlp: 64,
            max_seq_len: 24,
        }
    }
}

/// Per-block parameter tensors, in schema order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockUnit {
    Norm1,
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    Norm2,
    MlpGate,
    MlpUp,
    MlpDown,
}

impl BlockUnit {
    pub const ALL: [BlockUnit; 9] = [
        BlockUnit::Norm1,
        BlockUnit::AttnQ,
        BlockUnit::AttnK,
        BlockUnit::AttnV,
        BlockUnit::AttnO,
        BlockUnit::Norm2,
        BlockUnit::MlpGate,
        BlockUnit::MlpUp,
        BlockUnit::MlpDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockUnit::Norm1 => "norm1",
            BlockUnit::AttnQ => "attn.q",
            BlockUnit::AttnK => "attn.k",
            BlockUnit::AttnV => "attn.v",
            BlockUnit::AttnO => "attn.o",
            BlockUnit::Norm2 => "norm2",
            BlockUnit::MlpGate => "mlp.gate",
            BlockUnit::MlpUp => "mlp.up",
            BlockUnit::MlpDown => "mlp.down",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        BlockUnit::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            BlockUnit::AttnQ | BlockUnit::AttnK | BlockUnit::AttnV | BlockUnit::AttnO
        )
    }

    pub fn is_mlp(self) -> bool {
        matches!(
            self,
            BlockUnit::MlpGate | BlockUnit::MlpUp | BlockUnit::MlpDown
        )
    }
}

/// One named parameter tensor of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnitId {
    Embed,
    Block { index: usize, kind: BlockUnit },
    FinalNorm,
    Head,
}

impl UnitId {
    pub fn name(&self) -> String {
        match self {
            UnitId::Embed => String::from("embed"),
            UnitId::Block { index, kind } => format!("blocks.{index}.{}", kind.name()),
            UnitId::FinalNorm => String::from("final_norm"),
            UnitId::Head => String::from("head"),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "embed" => Some(UnitId::Embed),
            "final_norm" => Some(UnitId::FinalNorm),
            "head" => Some(UnitId::Head),
            _ => {
                let rest = name.strip_prefix("blocks.")?;
                let (idx, kind) = rest.split_once('.')?;
                Some(UnitId::Block {
                    index: idx.parse().ok()?,
                    kind: BlockUnit::from_name(kind)?,
                })
            }
        }
    }

    pub fn block(&self) -> Option<usize> {
        match self {
            UnitId::Block { index, .. } => Some(*index),
            _ => None,
        }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_blocks,
            self.d_mlp,
            self.max_seq_len,
        ];
        if counts.contains(&0) {
            return Err(ModelError::InvalidConfig("all extents must be at least 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(
                "d_model must be divisible by n_heads",
            ));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(ModelError::InvalidConfig("head dimension must be even"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every mergeable unit in schema order.
    pub fn units(&self) -> Vec<UnitId> {
        let mut units = Vec::with_capacity(3 + 9 * self.n_blocks);
        units.push(UnitId::Embed);
        for index in 0..self.n_blocks {
            for kind in BlockUnit::ALL {
                units.push(UnitId::Block { index, kind });
            }
        }
        units.push(UnitId::FinalNorm);
        units.push(UnitId::Head);
        units
    }

    pub fn unit_count(&self) -> usize {
        3 + 9 * self.n_blocks
    }

    /// Position of `unit` in [`ModelConfig::units`].
    pub fn unit_index(&self, unit: UnitId) -> Option<usize> {
        match unit {
            UnitId::Embed => Some(0),
            UnitId::Block { index, kind } if index < self.n_blocks => {
                Some(1 + index * 9 + kind as usize)
            }
            UnitId::Block { .. } => None,
            UnitId::FinalNorm => Some(1 + 9 * self.n_blocks),
            UnitId::Head => Some(2 + 9 * self.n_blocks),
        }
    }

    pub fn unit_shape(&self, unit: UnitId) -> Result<Vec<usize>, ModelError> {
        let (d, v, m) = (self.d_model, self.vocab_size, self.d_mlp);
        if self.unit_index(unit).is_none() {
            return Err(ModelError::UnknownUnit(unit.name()));
        }
        Ok(match unit {
            UnitId::Embed => vec![v, d],
            UnitId::Head => vec![d, v],
            UnitId::FinalNorm => vec![d],
            UnitId::Block { kind, .. } => match kind {
                BlockUnit::Norm1 | BlockUnit::Norm2 => vec![d],
                BlockUnit::AttnQ | BlockUnit::AttnK | BlockUnit::AttnV | BlockUnit::AttnO => {
                    vec![d, d]
                }
                BlockUnit::MlpGate | BlockUnit::MlpUp => vec![d, m],
                BlockUnit::MlpDown => vec![m, d],
            },
        })
    }

    /// Number of scalar parameters in `unit`.
    pub fn param_count(&self, unit: UnitId) -> Result<usize, ModelError> {
        Ok(self.unit_shape(unit)?.iter().product())
    }
}

/// The full parameter set of one model, stored in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let tensors = config
            .units()
            .into_iter()
            .map(|u| config.unit_shape(u).map(|s| Tensor::zeros(&s)))
            .collect::<Result<_, _>>()?;
        Ok(ModelParams { config, tensors })
    }

    /// Random initialization: unit gains, scaled normal matrices.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut params = ModelParams::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / libm::sqrt(2.0 * config.n_blocks as f64);
        for (unit, tensor) in config.units().into_iter().zip(params.tensors.iter_mut()) {
            let fan_in = tensor.shape()[0] as f64;
            let std = match unit {
                UnitId::Embed => 1.0,
                UnitId::FinalNorm
                | UnitId::Block {
                    kind: BlockUnit::Norm1 | BlockUnit::Norm2,
                    ..
                } => {
                    tensor.data_mut().fill(1.0);
                    continue;
                }
                UnitId::Block {
                    kind: BlockUnit::AttnO | BlockUnit::MlpDown,
                    ..
                } => residual_scale / libm::sqrt(fan_in),
                _ => 1.0 / libm::sqrt(fan_in),
            };
            for x in tensor.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = std * z;
            }
        }
        Ok(params)
    }

    /// Builds params from tensors given in schema order, validating shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let units = config.units();
        if units.len() != tensors.len() {
            return Err(ModelError::SchemaMismatch(format!(
                "expected {} tensors, got {}",
                units.len(),
                tensors.len()
            )));
        }
        for (u, t) in units.iter().zip(&tensors) {
            if config.unit_shape(*u)? != t.shape() {
                return Err(ModelError::SchemaMismatch(format!(
                    "{} has shape {:?}",
                    u.name(),
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Tensor(TensorError::NonFinite { op: "params" }));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn get(&self, unit: UnitId) -> Result<&Tensor, ModelError> {
        self.config
            .unit_index(unit)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| ModelError::UnknownUnit(unit.name()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (UnitId, &Tensor)> {
        self.config.units().into_iter().zip(self.tensors.iter())
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn same_schema(&self, other: &ModelParams) -> Result<(), ModelError> {
        if self.config != other.config {
            return Err(ModelError::SchemaMismatch(String::from(
                "model configurations differ",
            )));
        }
        Ok(())
    }

    /// Stable content hash over config, shapes and values (hex, 16 chars).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.d_model,
            c.n_heads,
            c.n_blocks,
            c.d_mlp,
            c.max_seq_len,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for t in &self.tensors {
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Hidden states after each block and the final logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub hidden_states: Vec<Tensor>,
    pub logits: Tensor,
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Debug, Clone)]
pub struct TraceVars {
    pub hidden_states: Vec<Var>,
    pub logits: Var,
}

fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::TokenOutOfVocab {
            token,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Records a forward pass whose parameters are the tape values `params`
/// (one per unit, schema order).
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    config: &ModelConfig,
    params: &[Var],
    tokens: &[usize],
) -> Result<TraceVars, ModelError> {
    check_tokens(config, tokens)?;
    if params.len() != config.unit_count() {
        return Err(ModelError::SchemaMismatch(format!(
            "expected {} parameter handles, got {}",
            config.unit_count(),
            params.len()
        )));
    }
    let p = |unit: UnitId| params[config.unit_index(unit).expect("unit in schema")];
    let heads = config.n_heads;
    let mut x = tape.embedding(p(UnitId::Embed), tokens)?;
    let mut hidden_states = Vec::with_capacity(config.n_blocks);
    for index in 0..config.n_blocks {
        let w = |kind| p(UnitId::Block { index, kind });
        let n1 = tape.rms_norm(x, w(BlockUnit::Norm1))?;
        let q = tape.matmul(n1, w(BlockUnit::AttnQ))?;
        let k = tape.matmul(n1, w(BlockUnit::AttnK))?;
        let v = tape.matmul(n1, w(BlockUnit::AttnV))?;
        let q = tape.rope(q, heads)?;
        let k = tape.rope(k, heads)?;
        let att = tape.causal_attention(q, k, v, heads)?;
        let o = tape.matmul(att, w(BlockUnit::AttnO))?;
        x = tape.add(x, o)?;
        let n2 = tape.rms_norm(x, w(BlockUnit::Norm2))?;
        let gate = tape.matmul(n2, w(BlockUnit::MlpGate))?;
        let gate = tape.silu(gate)?;
        let up = tape.matmul(n2, w(BlockUnit::MlpUp))?;
        let inner = tape.mul(gate, up)?;
        let down = tape.matmul(inner, w(BlockUnit::MlpDown))?;
        x = tape.add(x, down)?;
        hidden_states.push(x);
    }
    let nf = tape.rms_norm(x, p(UnitId::FinalNorm))?;
    let logits = tape.matmul(nf, p(UnitId::Head))?;
    Ok(TraceVars {
        hidden_states,
        logits,
    })
}

/// Registers every tensor of `params` as a borrowed constant.
pub fn constant_params<'a>(tape: &mut Tape<'a>, params: &'a ModelParams) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|t| tape.constant_ref(t))
        .collect()
}

/// Deterministic forward pass for frozen parameters.
pub fn forward(params: &ModelParams, tokens: &[usize]) -> Result<ForwardTrace, ModelError> {
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let trace = forward_on_tape(&mut tape, &params.config, &vars, tokens)?;
    Ok(ForwardTrace {
        hidden_states: trace
            .hidden_states
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        logits: tape.value(trace.logits).clone(),
    })
}

/// Logits only; avoids copying hidden states.
pub fn logits(params: &ModelParams, tokens: &[usize]) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let trace = forward_on_tape(&mut tape, &params.config, &vars, tokens)?;
    Ok(tape.value(trace.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            d_model: 4,
            n_heads: 1,
            n_blocks: 1,
            d_mlp: 3,
            max_seq_len: 8,
        }
    }

    #[test]
    fn param_counts() {
        let c = ModelConfig::default();
        let q = UnitId::Block {
            index: 0,
            kind: BlockUnit::AttnQ,
        };
        let up = UnitId::Block {
            index: 3,
            kind: BlockUnit::MlpUp,
        };
        assert_eq!(c.param_count(q).unwrap(), 1024);
        assert_eq!(c.param_count(up).unwrap(), 2048);
        let params = ModelParams::init(c, 1).unwrap();
        let by_units: usize = c.units().iter().map(|&u| c.param_count(u).unwrap()).sum();
        let by_tensors: usize = params.tensors().iter().map(|t| t.data().len()).sum();
        assert_eq!(by_units, by_tensors);
        assert!(c
            .param_count(UnitId::Block {
                index: 4,
                kind: BlockUnit::AttnQ
            })
            .is_err());
    }

    #[test]
    fn mlp_share_exceeds_attention_share() {
        let c = ModelConfig::default();
        let (mut attn, mut mlp) = (0, 0);
        for u in c.units() {
            if let UnitId::Block { kind, .. } = u {
                if kind.is_attention() {
                    attn += c.param_count(u).unwrap();
                } else if kind.is_mlp() {
                    mlp += c.param_count(u).unwrap();
                }
            }
        }
        assert!(mlp > attn);
    }

    #[test]
    fn unit_names_round_trip() {
        let c = ModelConfig::default();
        for (i, u) in c.units().into_iter().enumerate() {
            assert_eq!(UnitId::parse(&u.name()), Some(u));
            assert_eq!(c.unit_index(u), Some(i));
        }
        assert_eq!(UnitId::parse("blocks.x.attn.q"), None);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let params = ModelParams::zeros(ModelConfig::default()).unwrap();
        let trace = forward(&params, &[1, 2, 3]).unwrap();
        assert!(trace.logits.data().iter().all(|&x| x == 0.0));
        assert_eq!(trace.hidden_states.len(), 4);
        assert!(trace
            .hidden_states
            .iter()
            .all(|h| h.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn forward_is_deterministic_and_causal() {
        let params = ModelParams::init(ModelConfig::default(), 3).unwrap();
        let a = forward(&params, &[1, 5, 9, 2, 7]).unwrap();
        let b = forward(&params, &[1, 5, 9, 2, 7]).unwrap();
        assert_eq!(a, b);
        let c = forward(&params, &[1, 5, 9, 30, 7]).unwrap();
        let v = params.config().vocab_size;
        assert_eq!(&a.logits.data()[..3 * v], &c.logits.data()[..3 * v]);
        assert_ne!(&a.logits.data()[3 * v..], &c.logits.data()[3 * v..]);
    }

    #[test]
    fn input_validation() {
        let params = ModelParams::init(tiny(), 0).unwrap();
        assert!(matches!(
            forward(&params, &[7]),
            Err(ModelError::TokenOutOfVocab { .. })
        ));
        assert!(matches!(
            forward(&params, &[0; 9]),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(matches!(
            forward(&params, &[]),
            Err(ModelError::EmptySequence)
        ));
        let bad = ModelConfig {
            d_model: 6,
            n_heads: 4,
            ..tiny()
        };
        assert!(bad.validate().is_err());
    }

    // Independent scalar recomputation of one block on two tokens.
    fn oracle_logits(params: &ModelParams, tokens: &[usize]) -> Vec<f64> {
        let c = params.config();
        let d = c.d_model;
        let get = |u: UnitId| params.get(u).unwrap().data().to_vec();
        let blk = |kind| get(UnitId::Block { index: 0, kind });
        let emb = get(UnitId::Embed);
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| emb[t * d..(t + 1) * d].to_vec())
            .collect();
        let norm = |v: &[f64], g: &[f64]| -> Vec<f64> {
            let ms: f64 = v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
            let r = (ms + 1e-6).sqrt();
            v.iter().zip(g).map(|(a, b)| a / r * b).collect()
        };
        let vecmat = |v: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
            (0..cols)
                .map(|j| (0..v.len()).map(|i| v[i] * w[i * cols + j]).sum())
                .collect()
        };
        let rope = |v: &mut [f64], pos: usize| {
            for i in 0..d / 2 {
                let ang = pos as f64 * 10000f64.powf(-2.0 * i as f64 / d as f64);
                let (a, b) = (v[2 * i], v[2 * i + 1]);
                v[2 * i] = a * ang.cos() - b * ang.sin();
                v[2 * i + 1] = a * ang.sin() + b * ang.cos();
            }
        };
        let n1: Vec<Vec<f64>> = x.iter().map(|v| norm(v, &blk(BlockUnit::Norm1))).collect();
        let mut q: Vec<Vec<f64>> = n1
            .iter()
            .map(|v| vecmat(v, &blk(BlockUnit::AttnQ), d))
            .collect();
        let mut k: Vec<Vec<f64>> = n1
            .iter()
            .map(|v| vecmat(v, &blk(BlockUnit::AttnK), d))
            .collect();
        let vv: Vec<Vec<f64>> = n1
            .iter()
            .map(|v| vecmat(v, &blk(BlockUnit::AttnV), d))
            .collect();
        for (p, (qi, ki)) in q.iter_mut().zip(k.iter_mut()).enumerate() {
            rope(qi, p);
            rope(ki, p);
        }
        for i in 0..tokens.len() {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut att = vec![0.0; d];
            for j in 0..=i {
                for c2 in 0..d {
                    att[c2] += e[j] / z * vv[j][c2];
                }
            }
            let o = vecmat(&att, &blk(BlockUnit::AttnO), d);
            for c2 in 0..d {
                x[i][c2] += o[c2];
            }
        }
        let mut out = Vec::new();
        for xi in x.iter_mut() {
            let n2 = norm(xi, &blk(BlockUnit::Norm2));
            let g = vecmat(&n2, &blk(BlockUnit::MlpGate), c.d_mlp);
            let u = vecmat(&n2, &blk(BlockUnit::MlpUp), c.d_mlp);
            let inner: Vec<f64> = g
                .iter()
                .zip(&u)
                .map(|(a, b)| a / (1.0 + (-a).exp()) * b)
                .collect();
            let dn = vecmat(&inner, &blk(BlockUnit::MlpDown), d);
            for c2 in 0..d {
                xi[c2] += dn[c2];
            }
            let nf = norm(xi, &get(UnitId::FinalNorm));
            out.extend(vecmat(&nf, &get(UnitId::Head), c.vocab_size));
        }
        out
    }

    #[test]
    fn single_block_matches_scalar_oracle() {
        let params = ModelParams::init(tiny(), 11).unwrap();
        let tokens = [3, 5];
        let got = forward(&params, &tokens).unwrap().logits;
        let want = oracle_logits(&params, &tokens);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10, "{g} vs {w}");
        }
    }
}
