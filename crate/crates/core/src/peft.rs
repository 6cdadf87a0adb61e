//! Parameter-efficient adapters: LoRA, IA3 and normalization-gain tuning.
//!
//! Every adapter starts as an exact identity on the base model. The
//! trainable tensors have a canonical layer-major order that defines the
//! flat vector exchanged between clients and the server.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, TransformerWeights};
use crate::numerics::{silu, NumericError, Tape, Tensor, Var};

pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PeftError {
    #[error("adapter config error: {0}")]
    Config(String),
    #[error("adapter shape error: {0}")]
    Shape(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<NumericError> for PeftError {
    fn from(e: NumericError) -> Self {
        PeftError::Shape(e.to_string())
    }
}

/// Weight matrices LoRA can attach to, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Wq,
    Wk,
    Wv,
    Wo,
    FfnUp,
    FfnDown,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Wq,
        LoraTarget::Wk,
        LoraTarget::Wv,
        LoraTarget::Wo,
        LoraTarget::FfnUp,
        LoraTarget::FfnDown,
    ];

    /// `(m, n)` of the target in `W·x` orientation: `m` outputs, `n` inputs.
    pub fn dims(self, config: &ModelConfig) -> (usize, usize) {
        let d = config.d_model;
        match self {
            LoraTarget::Wq | LoraTarget::Wk | LoraTarget::Wv | LoraTarget::Wo => (d, d),
            LoraTarget::FfnUp => (config.d_ffn, d),
            LoraTarget::FfnDown => (d, config.d_ffn),
        }
    }
}

/// Activation sites scaled by IA3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ia3Site {
    MhaKey,
    MhaValue,
    FfnIntermediate,
}

impl FromStr for Ia3Site {
    type Err = PeftError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mha_key" => Ok(Ia3Site::MhaKey),
            "mha_value" => Ok(Ia3Site::MhaValue),
            "ffn_intermediate" => Ok(Ia3Site::FfnIntermediate),
            other => Err(PeftError::Config(format!("unknown IA3 site `{other}`"))),
        }
    }
}

/// RMSNorm sites whose gains the LayerNorm adapter replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormSite {
    Attention(usize),
    Ffn(usize),
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterKind {
    Lora { rank: usize, targets: Vec<LoraTarget> },
    Ia3,
    LayerNorm,
}

impl AdapterKind {
    /// LoRA on the query and value projections.
    pub fn lora(rank: usize) -> Self {
        AdapterKind::Lora {
            rank,
            targets: vec![LoraTarget::Wq, LoraTarget::Wv],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdapterKind::Lora { .. } => "lora",
            AdapterKind::Ia3 => "ia3",
            AdapterKind::LayerNorm => "layernorm",
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), PeftError> {
        if let AdapterKind::Lora { rank, targets } = self {
            if *rank == 0 {
                return Err(PeftError::Config("LoRA rank must be positive".into()));
            }
            if targets.is_empty() {
                return Err(PeftError::Config("LoRA needs at least one target".into()));
            }
            let mut sorted = targets.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != targets.len() {
                return Err(PeftError::Config("duplicate LoRA target".into()));
            }
            for t in targets {
                let (m, n) = t.dims(config);
                if *rank >= m.min(n) {
                    return Err(PeftError::Config(format!(
                        "LoRA rank {rank} must be below min({m}, {n}) for {t:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterKind::Lora { rank, targets } => write!(f, "lora(k={rank}, {targets:?})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Low-rank factors with `ΔW = A·Bᵀ`, `A: [m×k]`, `B: [n×k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraFactors {
    /// Materialized `A·Bᵀ` as an `[m×n]` matrix.
    pub fn delta(&self) -> Tensor {
        let (m, k) = (self.a.rows(), self.a.cols());
        let n = self.b.rows();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| self.a.get2(i, p) * self.b.get2(j, p)).sum();
            }
        }
        Tensor::new(vec![m, n], out).expect("delta shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ia3Vectors {
    pub keys: Tensor,
    pub values: Tensor,
    pub ffn: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormGains {
    pub attention: Tensor,
    pub ffn: Tensor,
}

/// Trainable adapter state θ.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterParams {
    Lora {
        rank: usize,
        layers: Vec<Vec<(LoraTarget, LoraFactors)>>,
    },
    Ia3 {
        layers: Vec<Ia3Vectors>,
    },
    LayerNorm {
        layers: Vec<NormGains>,
        final_norm: Tensor,
    },
}

/// Identity-initialized adapter for `base`.
pub fn attach(base: &TransformerWeights, kind: &AdapterKind, seed: u64) -> Result<AdapterParams, PeftError> {
    let config = &base.config;
    kind.validate(config)?;
    let params = match kind {
        AdapterKind::Lora { rank, targets } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut targets = targets.clone();
            targets.sort();
            let layers = (0..config.n_layers)
                .map(|_| {
                    targets
                        .iter()
                        .map(|&t| {
                            let (m, n) = t.dims(config);
                            let factors = LoraFactors {
                                a: Tensor::randn(&[m, *rank], LORA_INIT_STD, &mut rng),
                                b: Tensor::zeros(&[n, *rank]),
                            };
                            (t, factors)
                        })
                        .collect()
                })
                .collect();
            AdapterParams::Lora { rank: *rank, layers }
        }
        AdapterKind::Ia3 => AdapterParams::Ia3 {
            layers: (0..config.n_layers)
                .map(|_| Ia3Vectors {
                    keys: Tensor::ones(&[config.d_model]),
                    values: Tensor::ones(&[config.d_model]),
                    ffn: Tensor::ones(&[config.d_ffn]),
                })
                .collect(),
        },
        AdapterKind::LayerNorm => AdapterParams::LayerNorm {
            layers: base
                .layers
                .iter()
                .map(|l| NormGains {
                    attention: l.attn_norm.clone(),
                    ffn: l.ffn_norm.clone(),
                })
                .collect(),
            final_norm: base.final_norm.clone(),
        },
    };
    Ok(params)
}

impl AdapterParams {
    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterParams::Lora { rank, layers } => AdapterKind::Lora {
                rank: *rank,
                targets: layers.first().map(|l| l.iter().map(|(t, _)| *t).collect()).unwrap_or_default(),
            },
            AdapterParams::Ia3 { .. } => AdapterKind::Ia3,
            AdapterParams::LayerNorm { .. } => AdapterKind::LayerNorm,
        }
    }

    /// Trainable tensors in canonical (layer-major, declared-site) order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            AdapterParams::Lora { layers, .. } => layers
                .iter()
                .flat_map(|l| l.iter().flat_map(|(_, f)| [&f.a, &f.b]))
                .collect(),
            AdapterParams::Ia3 { layers } => layers.iter().flat_map(|l| [&l.keys, &l.values, &l.ffn]).collect(),
            AdapterParams::LayerNorm { layers, final_norm } => layers
                .iter()
                .flat_map(|l| [&l.attention, &l.ffn])
                .chain(std::iter::once(final_norm))
                .collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AdapterParams::Lora { layers, .. } => layers
                .iter_mut()
                .flat_map(|l| l.iter_mut().flat_map(|(_, f)| [&mut f.a, &mut f.b]))
                .collect(),
            AdapterParams::Ia3 { layers } => layers
                .iter_mut()
                .flat_map(|l| [&mut l.keys, &mut l.values, &mut l.ffn])
                .collect(),
            AdapterParams::LayerNorm { layers, final_norm } => layers
                .iter_mut()
                .flat_map(|l| [&mut l.attention, &mut l.ffn])
                .chain(std::iter::once(final_norm))
                .collect(),
        }
    }

    pub fn trainable_len(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn flatten(&self) -> FlatUpdate {
        let mut out = Vec::with_capacity(self.trainable_len());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        FlatUpdate(out)
    }

    /// Copy of `self` with values taken from `v` in canonical order.
    pub fn unflatten(&self, v: &FlatUpdate) -> Result<AdapterParams, PeftError> {
        let mut out = self.clone();
        out.assign_flat(v.as_slice())?;
        Ok(out)
    }

    pub fn assign_flat(&mut self, v: &[f64]) -> Result<(), PeftError> {
        let expected = self.trainable_len();
        if v.len() != expected {
            return Err(PeftError::Protocol(format!(
                "flat vector has {} values, adapter expects {expected}",
                v.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&v[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every adapter tensor on `tape`, trainable or not.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> AdapterVars {
        self.build_vars(|t| if trainable { tape.param(t) } else { tape.constant(t) })
    }

    /// Wraps handles already on a tape, given in canonical order.
    pub fn bind(&self, vars: &[Var]) -> Result<AdapterVars, PeftError> {
        let expected = self.tensors().len();
        if vars.len() != expected {
            return Err(PeftError::Shape(format!("expected {expected} adapter handles, got {}", vars.len())));
        }
        let mut it = vars.iter();
        Ok(self.build_vars(|_| *it.next().expect("length checked")))
    }

    fn build_vars<'a>(&'a self, mut reg: impl FnMut(&'a Tensor) -> Var) -> AdapterVars {
        let mut vars = AdapterVars::default();
        match self {
            AdapterParams::Lora { layers, .. } => {
                for layer in layers {
                    let mut row = Vec::with_capacity(layer.len());
                    for (target, f) in layer {
                        let (a, b) = (reg(&f.a), reg(&f.b));
                        vars.order.extend([a, b]);
                        row.push((*target, a, b));
                    }
                    vars.lora.push(row);
                }
            }
            AdapterParams::Ia3 { layers } => {
                for l in layers {
                    let v = [reg(&l.keys), reg(&l.values), reg(&l.ffn)];
                    vars.order.extend(v);
                    vars.ia3.push(v);
                }
            }
            AdapterParams::LayerNorm { layers, final_norm } => {
                for l in layers {
                    let v = [reg(&l.attention), reg(&l.ffn)];
                    vars.order.extend(v);
                    vars.norms.push(v);
                }
                let f = reg(final_norm);
                vars.order.push(f);
                vars.final_norm = Some(f);
            }
        }
        vars
    }
}

/// Tape handles for an [`AdapterParams`], queried by the model's forward pass.
#[derive(Clone, Debug, Default)]
pub struct AdapterVars {
    lora: Vec<Vec<(LoraTarget, Var, Var)>>,
    ia3: Vec<[Var; 3]>,
    norms: Vec<[Var; 2]>,
    final_norm: Option<Var>,
    order: Vec<Var>,
}

impl AdapterVars {
    /// `(A, B)` for a LoRA target.
    pub fn lora(&self, layer: usize, target: LoraTarget) -> Option<(Var, Var)> {
        self.lora
            .get(layer)?
            .iter()
            .find(|(t, _, _)| *t == target)
            .map(|(_, a, b)| (*a, *b))
    }

    pub fn ia3(&self, layer: usize, site: Ia3Site) -> Option<Var> {
        let v = self.ia3.get(layer)?;
        Some(match site {
            Ia3Site::MhaKey => v[0],
            Ia3Site::MhaValue => v[1],
            Ia3Site::FfnIntermediate => v[2],
        })
    }

    pub fn norm_gain(&self, site: NormSite) -> Option<Var> {
        match site {
            NormSite::Attention(l) => self.norms.get(l).map(|v| v[0]),
            NormSite::Ffn(l) => self.norms.get(l).map(|v| v[1]),
            NormSite::Final => self.final_norm,
        }
    }

    /// All handles in canonical order.
    pub fn all(&self) -> &[Var] {
        &self.order
    }
}

/// `x·W + (x·B)·Aᵀ` on a tape, where `w` is stored `[in×out]` and the LoRA
/// factors follow the `W·x` orientation (`A: [out×k]`, `B: [in×k]`).
pub fn lora_linear(tape: &mut Tape<'_>, x: Var, w: Var, lora: Option<(Var, Var)>) -> Result<Var, NumericError> {
    let base = tape.matmul(x, w)?;
    match lora {
        None => Ok(base),
        Some((a, b)) => {
            let down = tape.matmul(x, b)?;
            let up = tape.matmul_bt(down, a)?;
            tape.add(base, up)
        }
    }
}

/// `(W + A·Bᵀ)·x` without materializing `A·Bᵀ`. `w: [m×n]`, `a: [m×k]`,
/// `b: [n×k]`, `x: [n]`.
pub fn effective_matmul_lora(w: &Tensor, a: &Tensor, b: &Tensor, x: &[f64]) -> Result<Vec<f64>, PeftError> {
    let (m, n) = (w.rows(), w.cols());
    let k = a.cols();
    if w.shape().len() != 2 || a.shape() != [m, k] || b.shape() != [n, k] || x.len() != n {
        return Err(PeftError::Shape(format!(
            "W {:?}, A {:?}, B {:?}, x [{}] are inconsistent",
            w.shape(),
            a.shape(),
            b.shape(),
            x.len()
        )));
    }
    let projected: Vec<f64> = (0..k).map(|p| (0..n).map(|j| b.get2(j, p) * x[j]).sum()).collect();
    Ok((0..m)
        .map(|i| {
            let base: f64 = (0..n).map(|j| w.get2(i, j) * x[j]).sum();
            let low: f64 = (0..k).map(|p| a.get2(i, p) * projected[p]).sum();
            base + low
        })
        .collect())
}

/// `l ⊙ γ(pre)` on a tape, with γ the FFN activation at the FFN site and
/// the identity at attention sites.
pub fn ia3_on_tape(tape: &mut Tape<'_>, pre: Var, l: Option<Var>, site: Ia3Site) -> Result<Var, NumericError> {
    let activated = match site {
        Ia3Site::FfnIntermediate => tape.silu(pre),
        Ia3Site::MhaKey | Ia3Site::MhaValue => pre,
    };
    match l {
        Some(l) => tape.mul_cols(activated, l),
        None => Ok(activated),
    }
}

/// Plain-tensor form of [`ia3_on_tape`].
pub fn apply_ia3(pre_activation: &Tensor, l: &Tensor, site: Ia3Site) -> Result<Tensor, PeftError> {
    if l.shape() != [pre_activation.cols()] {
        return Err(PeftError::Shape(format!(
            "scale vector {:?} does not match activation width {}",
            l.shape(),
            pre_activation.cols()
        )));
    }
    let n = l.numel();
    let data = pre_activation
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let g = match site {
                Ia3Site::FfnIntermediate => silu(x),
                _ => x,
            };
            l.data()[i % n] * g
        })
        .collect();
    Ok(Tensor::new(pre_activation.shape().to_vec(), data)?)
}

/// Trainable-parameter accounting for one adapter kind on one model shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

/// Closed-form trainable parameter count. LoRA and IA3 add parameters to
/// the model; normalization tuning trains gains the model already owns.
pub fn trainable_count(config: &ModelConfig, kind: &AdapterKind) -> ParamCount {
    let (trainable, added) = match kind {
        AdapterKind::Lora { rank, targets } => {
            let per_layer: usize = targets
                .iter()
                .map(|t| {
                    let (m, n) = t.dims(config);
                    rank * (m + n)
                })
                .sum();
            (config.n_layers * per_layer, true)
        }
        AdapterKind::Ia3 => (config.n_layers * (2 * config.d_model + config.d_ffn), true),
        AdapterKind::LayerNorm => ((2 * config.n_layers + 1) * config.d_model, false),
    };
    let base = config.base_param_count();
    let total = if added { base + trainable } else { base };
    ParamCount {
        trainable,
        total,
        ratio: trainable as f64 / total as f64,
    }
}

/// Human-scale count like `40.0M` or `6.8B`.
pub fn format_count(n: f64) -> String {
    if n >= 1e9 {
        format!("{:.1}B", n / 1e9)
    } else if n >= 1e6 {
        format!("{:.1}M", n / 1e6)
    } else if n >= 1e3 {
        format!("{:.1}K", n / 1e3)
    } else {
        format!("{n}")
    }
}

/// Percentage with two decimals, or three below one hundredth of a percent.
pub fn format_ratio(ratio: f64) -> String {
    let pct = ratio * 100.0;
    if pct >= 0.01 {
        format!("{pct:.2}%")
    } else {
        format!("{pct:.3}%")
    }
}

/// `trainable / total / ratio` row.
pub fn format_count_row(trainable: f64, total: f64) -> String {
    format!(
        "{} / {} / {}",
        format_count(trainable),
        format_count(total),
        format_ratio(trainable / total)
    )
}

/// Dense update vector Δθ in canonical adapter order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FlatUpdate(pub Vec<f64>);

impl FlatUpdate {
    pub fn zeros(len: usize) -> Self {
        FlatUpdate(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &FlatUpdate) -> Result<FlatUpdate, PeftError> {
        self.check_len(other)?;
        Ok(FlatUpdate(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn add(&self, other: &FlatUpdate) -> Result<FlatUpdate, PeftError> {
        self.check_len(other)?;
        Ok(FlatUpdate(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn scaled(&self, c: f64) -> FlatUpdate {
        FlatUpdate(self.0.iter().map(|v| v * c).collect())
    }

    fn check_len(&self, other: &FlatUpdate) -> Result<(), PeftError> {
        if self.len() != other.len() {
            return Err(PeftError::Protocol(format!(
                "update lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// Wire format: `u64` length then little-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.len());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PeftError> {
        let header: [u8; 8] = bytes
            .get(..8)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| PeftError::Protocol("update shorter than its length header".into()))?;
        let len = u64::from_le_bytes(header) as usize;
        let body = &bytes[8..];
        if body.len() != len.saturating_mul(8) {
            return Err(PeftError::Protocol(format!(
                "length header says {len} values but {} bytes follow",
                body.len()
            )));
        }
        Ok(FlatUpdate(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ))
    }
}
