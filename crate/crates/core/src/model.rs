//! Tiny pre-norm decoder-only transformer.
//!
//! Token and learned absolute position embeddings feed `n_layers` blocks of
//! causal multi-head attention and a SiLU feed-forward network, each behind
//! an RMSNorm and a residual connection, followed by a final RMSNorm and an
//! untied output head. Adapter hooks sit on the projections (LoRA), on keys,
//! values and FFN activations (IA3) and on every norm gain (LayerNorm).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RenderedExample;
use crate::numerics::{NumericError, Tape, Tensor, Var};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::peft::{ia3_on_tape, lora_linear, AdapterParams, AdapterVars, Ia3Site, LoraTarget, NormSite};
use crate::vocab;

pub const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 4] = b"FPA1";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config error: {0}")]
    Config(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: vocab::VOCAB_SIZE,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 64,
            max_seq_len: 48,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < vocab::VOCAB_SIZE {
            return Err(ModelError::Config(format!(
                "vocab_size {} is smaller than the fixed vocabulary ({})",
                self.vocab_size,
                vocab::VOCAB_SIZE
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Sum of all base tensor sizes.
    pub fn base_param_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.d_model, self.d_ffn, self.max_seq_len);
        v * d + l * d + self.n_layers * (4 * d * d + 2 * d * f + 2 * d) + d + d * v
    }
}

/// Which next-token positions contribute to the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    #[default]
    AllTokens,
    ResponseOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Frozen base parameters. Projection matrices are stored `[in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

pub fn init_model(config: &ModelConfig) -> Result<TransformerWeights, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ffn);
    let mut randn = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);
    let tok_emb = randn(&[v, d]);
    let pos_emb = randn(&[config.max_seq_len, d]);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: Tensor::ones(&[d]),
            wq: randn(&[d, d]),
            wk: randn(&[d, d]),
            wv: randn(&[d, d]),
            wo: randn(&[d, d]),
            ffn_norm: Tensor::ones(&[d]),
            w_up: randn(&[d, f]),
            w_down: randn(&[f, d]),
        })
        .collect();
    let head = randn(&[d, v]);
    Ok(TransformerWeights {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
        final_norm: Tensor::ones(&[d]),
        head,
    })
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_up: Var,
    pub w_down: Var,
}

#[derive(Clone, Debug)]
pub struct WeightVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl WeightVars {
    /// Handles in declaration order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_up, l.w_down]);
        }
        out.extend([self.final_norm, self.head]);
        out
    }
}

impl TransformerWeights {
    /// Tensors in declaration order (the checkpoint order).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_up, &l.w_down]);
        }
        out.extend([&self.final_norm, &self.head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.extend([&mut self.final_norm, &mut self.head]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// FNV-1a over the bit patterns of every value, in declaration order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> WeightVars {
        let mut reg = |t: &'a Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let tok_emb = reg(&self.tok_emb);
        let pos_emb = reg(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: reg(&l.attn_norm),
                wq: reg(&l.wq),
                wk: reg(&l.wk),
                wv: reg(&l.wv),
                wo: reg(&l.wo),
                ffn_norm: reg(&l.ffn_norm),
                w_up: reg(&l.w_up),
                w_down: reg(&l.w_down),
            })
            .collect();
        WeightVars {
            tok_emb,
            pos_emb,
            layers,
            final_norm: reg(&self.final_norm),
            head: reg(&self.head),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            c.vocab_size as u64,
            c.d_model as u64,
            c.n_layers as u64,
            c.n_heads as u64,
            c.d_ffn as u64,
            c.max_seq_len as u64,
            c.seed,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.tensors() {
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic bytes".into()));
        }
        let mut header = [0u64; 7];
        for h in &mut header {
            *h = r.u64()?;
        }
        let config = ModelConfig {
            vocab_size: header[0] as usize,
            d_model: header[1] as usize,
            n_layers: header[2] as usize,
            n_heads: header[3] as usize,
            d_ffn: header[4] as usize,
            max_seq_len: header[5] as usize,
            seed: header[6],
        };
        let mut weights = init_model(&config)?;
        for t in weights.tensors_mut() {
            let ndim = r.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            if shape != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor shape {shape:?} does not match expected {:?}",
                    t.shape()
                )));
            }
            for v in t.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn assign_flat(&mut self, v: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&v[offset..offset + n]);
            offset += n;
        }
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], ModelError> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| ModelError::Checkpoint("truncated checkpoint".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Records the causal forward pass for `tokens` and returns `[T×V]` logits.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    config: &ModelConfig,
    w: &WeightVars,
    adapter: Option<&AdapterVars>,
    tokens: &[usize],
) -> Result<Var, ModelError> {
    let t = tokens.len();
    if t == 0 {
        return Err(ModelError::EmptySequence);
    }
    if t > config.max_seq_len {
        return Err(ModelError::Length(format!(
            "sequence of {t} tokens exceeds context length {}",
            config.max_seq_len
        )));
    }
    let positions: Vec<usize> = (0..t).collect();
    let tok = tape.embedding(w.tok_emb, tokens)?;
    let pos = tape.embedding(w.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let lora = |layer: usize, target: LoraTarget| adapter.and_then(|a| a.lora(layer, target));
    let ia3 = |layer: usize, site: Ia3Site| adapter.and_then(|a| a.ia3(layer, site));
    let gain = |site: NormSite, base: Var| adapter.and_then(|a| a.norm_gain(site)).unwrap_or(base);

    let dh = config.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for (li, lw) in w.layers.iter().enumerate() {
        let h = tape.rmsnorm(x, gain(NormSite::Attention(li), lw.attn_norm))?;
        let q = lora_linear(tape, h, lw.wq, lora(li, LoraTarget::Wq))?;
        let k = lora_linear(tape, h, lw.wk, lora(li, LoraTarget::Wk))?;
        let v = lora_linear(tape, h, lw.wv, lora(li, LoraTarget::Wv))?;
        let k = ia3_on_tape(tape, k, ia3(li, Ia3Site::MhaKey), Ia3Site::MhaKey)?;
        let v = ia3_on_tape(tape, v, ia3(li, Ia3Site::MhaValue), Ia3Site::MhaValue)?;

        let mut heads = Vec::with_capacity(config.n_heads);
        for hi in 0..config.n_heads {
            let qh = tape.slice_cols(q, hi * dh, dh)?;
            let kh = tape.slice_cols(k, hi * dh, dh)?;
            let vh = tape.slice_cols(v, hi * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt);
            let probs = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let attn = tape.concat_cols(&heads)?;
        let attn = lora_linear(tape, attn, lw.wo, lora(li, LoraTarget::Wo))?;
        x = tape.add(x, attn)?;

        let h = tape.rmsnorm(x, gain(NormSite::Ffn(li), lw.ffn_norm))?;
        let up = lora_linear(tape, h, lw.w_up, lora(li, LoraTarget::FfnUp))?;
        let act = ia3_on_tape(tape, up, ia3(li, Ia3Site::FfnIntermediate), Ia3Site::FfnIntermediate)?;
        let down = lora_linear(tape, act, lw.w_down, lora(li, LoraTarget::FfnDown))?;
        x = tape.add(x, down)?;
    }
    let x = tape.rmsnorm(x, gain(NormSite::Final, w.final_norm))?;
    Ok(tape.matmul(x, w.head)?)
}

/// Logits `[T×V]` for `tokens` with an optional adapter.
pub fn forward(w: &TransformerWeights, adapter: Option<&AdapterParams>, tokens: &[usize]) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let wv = w.register(&mut tape, false);
    let av = adapter.map(|a| a.register(&mut tape, false));
    let logits = forward_on_tape(&mut tape, &w.config, &wv, av.as_ref(), tokens)?;
    Ok(tape.to_tensor(logits))
}

/// Next-token targets and supervision mask for a rendered example.
pub fn supervision(seq: &RenderedExample, mask: LossMask) -> Result<(Vec<usize>, Vec<usize>, Vec<bool>), ModelError> {
    let tokens = &seq.tokens;
    if tokens.len() < 2 {
        return Err(ModelError::EmptySequence);
    }
    let inputs = tokens[..tokens.len() - 1].to_vec();
    let targets = tokens[1..].to_vec();
    let flags = (1..tokens.len())
        .map(|j| match mask {
            LossMask::AllTokens => true,
            LossMask::ResponseOnly => j >= seq.response_start,
        })
        .collect();
    Ok((inputs, targets, flags))
}

/// Records the next-token loss of one sequence.
pub fn sequence_loss_on_tape(
    tape: &mut Tape<'_>,
    config: &ModelConfig,
    w: &WeightVars,
    adapter: Option<&AdapterVars>,
    seq: &RenderedExample,
    mask: LossMask,
) -> Result<Var, ModelError> {
    let (inputs, targets, flags) = supervision(seq, mask)?;
    let logits = forward_on_tape(tape, config, w, adapter, &inputs)?;
    Ok(tape.cross_entropy(logits, &targets, &flags)?)
}

pub fn sequence_loss(
    w: &TransformerWeights,
    adapter: Option<&AdapterParams>,
    seq: &RenderedExample,
    mask: LossMask,
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let wv = w.register(&mut tape, false);
    let av = adapter.map(|a| a.register(&mut tape, false));
    let loss = sequence_loss_on_tape(&mut tape, &w.config, &wv, av.as_ref(), seq, mask)?;
    Ok(tape.scalar(loss))
}

/// Mean loss over `batch` and its gradient with respect to the adapter,
/// flattened in canonical adapter order. The base model is never
/// differentiated.
pub fn adapter_loss_and_grad(
    w: &TransformerWeights,
    adapter: &AdapterParams,
    batch: &[&RenderedExample],
    mask: LossMask,
) -> Result<(f64, Vec<f64>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let mut tape = Tape::new();
    let wv = w.register(&mut tape, false);
    let av = adapter.register(&mut tape, true);
    let mut total: Option<Var> = None;
    for seq in batch {
        let l = sequence_loss_on_tape(&mut tape, &w.config, &wv, Some(&av), seq, mask)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(adapter.trainable_len());
    for (var, t) in av.all().iter().zip(adapter.tensors()) {
        flat.extend(grads.get_or_zeros(*var, t.numel()));
    }
    Ok((tape.scalar(loss), flat))
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt`: appends the argmax token (ties go to the
/// lowest id) until EOS is produced or `max_new` tokens were generated.
/// Returns only the generated tokens, including a final EOS if emitted.
pub fn greedy_decode(
    w: &TransformerWeights,
    adapter: Option<&AdapterParams>,
    prompt: &[usize],
    max_new: usize,
) -> Result<Vec<usize>, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if prompt.len() + max_new > w.config.max_seq_len {
        return Err(ModelError::Length(format!(
            "prompt of {} tokens plus {max_new} new tokens exceeds context length {}",
            prompt.len(),
            w.config.max_seq_len
        )));
    }
    let v = w.config.vocab_size;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = forward(w, adapter, &seq)?;
        let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
        let next = argmax_lowest(last);
        out.push(next);
        if next == vocab::EOS {
            break;
        }
        seq.push(next);
    }
    Ok(out)
}

/// Settings for full-parameter training of the base model.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSpec {
    pub steps: usize,
    pub optimizer: OptimizerSpec,
    pub mask: LossMask,
    pub seed: u64,
}

/// Full-parameter training on `corpus`. The corpus must contain refusal
/// pairs so that the guardrail can be installed.
pub fn pretrain(
    mut w: TransformerWeights,
    corpus: &[RenderedExample],
    spec: &PretrainSpec,
) -> Result<TransformerWeights, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Config("pretraining corpus is empty".into()));
    }
    if !corpus.iter().any(RenderedExample::is_refusal) {
        return Err(ModelError::Config(
            "pretraining corpus has no refusal pairs; the guardrail cannot be installed".into(),
        ));
    }
    spec.optimizer
        .validate()
        .map_err(|(k, msg)| ModelError::Config(format!("pretrain optimizer {k}: {msg}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let n = w.param_count();
    let mut opt = Optimizer::new(&spec.optimizer, n);
    let bs = spec.optimizer.batch_size;

    for _ in 0..spec.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let per_example: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|seq| -> Result<Vec<f64>, ModelError> {
                let mut tape = Tape::new();
                let wv = w.register(&mut tape, true);
                let loss = sequence_loss_on_tape(&mut tape, &w.config, &wv, None, seq, spec.mask)?;
                let grads = tape.backward(loss)?;
                let mut flat = Vec::with_capacity(n);
                for (var, t) in wv.all().iter().zip(w.tensors()) {
                    flat.extend(grads.get_or_zeros(*var, t.numel()));
                }
                Ok(flat)
            })
            .collect::<Result<_, _>>()?;
        let mut grad = vec![0.0; n];
        for g in &per_example {
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        let scale = 1.0 / bs as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        let mut flat = w.flatten();
        opt.step(&mut flat, &grad);
        w.assign_flat(&flat);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::{attach, AdapterKind};

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            n_heads: 3,
            ..cfg()
        };
        assert!(matches!(init_model(&bad), Err(ModelError::Config(_))));
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let a = init_model(&cfg()).unwrap();
        let b = init_model(&cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        for l in &a.layers {
            assert!(l.attn_norm.data().iter().chain(l.ffn_norm.data()).all(|&g| g == 1.0));
        }
        assert!(a.final_norm.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn param_count_closed_form() {
        let w = init_model(&cfg()).unwrap();
        // 64*32 + 48*32 + 2*(4*32*32 + 2*32*64 + 2*32) + 32 + 32*64
        let expected = 2048 + 1536 + 2 * (4096 + 4096 + 64) + 32 + 2048;
        assert_eq!(w.param_count(), expected);
        assert_eq!(cfg().base_param_count(), expected);
    }

    #[test]
    fn causality() {
        let w = init_model(&cfg()).unwrap();
        let a = [3, 4, 12, 13, 5, 20];
        let mut b = a;
        b[5] = 40;
        let la = forward(&w, None, &a).unwrap();
        let lb = forward(&w, None, &b).unwrap();
        let v = w.config.vocab_size;
        assert_eq!(&la.data()[..5 * v], &lb.data()[..5 * v]);
        assert_ne!(&la.data()[5 * v..], &lb.data()[5 * v..]);
    }

    #[test]
    fn length_errors() {
        let w = init_model(&cfg()).unwrap();
        let long = vec![3; 49];
        assert!(matches!(forward(&w, None, &long), Err(ModelError::Length(_))));
        assert!(matches!(greedy_decode(&w, None, &[3; 40], 9), Err(ModelError::Length(_))));
        assert!(greedy_decode(&w, None, &[], 1).is_err());
    }

    #[test]
    fn identity_adapters_are_exact_noops() {
        let w = init_model(&cfg()).unwrap();
        let tokens = [3, 51, 52, 4, 7, 12, 10, 5, 8];
        let plain = forward(&w, None, &tokens).unwrap();
        for kind in [AdapterKind::lora(2), AdapterKind::Ia3, AdapterKind::LayerNorm] {
            let theta = attach(&w, &kind, 9).unwrap();
            let adapted = forward(&w, Some(&theta), &tokens).unwrap();
            assert_eq!(plain, adapted, "{kind}");
        }
    }

    #[test]
    fn argmax_ties_go_to_lowest_id() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[5.0, 5.0]), 0);
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let w = init_model(&ModelConfig { seed: 4, ..cfg() }).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"FPA1");
        let back = TransformerWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back.checksum(), w.checksum());
        assert_eq!(back, w);
        assert!(TransformerWeights::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TransformerWeights::from_bytes(&bad).is_err());
    }
}
