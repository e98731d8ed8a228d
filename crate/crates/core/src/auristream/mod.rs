//! AuriStream: a decoder-only transformer over cochlear tokens.
//!
//! Pre-norm blocks (RMSNorm -> causal multi-head attention -> residual;
//! RMSNorm -> SiLU MLP of width 4d -> residual), learned positional
//! embeddings, a final RMSNorm and an untied output projection. Linear layers
//! carry no biases.

mod generate;
pub mod train;

use std::path::Path;

use cochstream_numerics::{Array, Scalar, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use generate::{generate, sample_next, GenerateConfig};

use crate::evalsuite::Pooling;
use crate::params::{self, CheckpointData, ParamSet};
use crate::{CoreError, Result};

pub const CHECKPOINT_KIND: &str = "auristream";
const NORM_EPS: f64 = 1e-5;
const PARAMS_PER_LAYER: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub vocab: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub init_seed: u64,
}

impl LmConfig {
    /// 12 layers, 12 heads, width 784.
    pub fn small_100m() -> Self {
        Self { n_layers: 12, n_heads: 12, d_model: 784, context_len: 4096, vocab: 8192, dropout: 0.0, init_seed: 0 }
    }

    /// 48 layers, 16 heads, width 1280.
    pub fn large_1b() -> Self {
        Self { n_layers: 48, n_heads: 16, d_model: 1280, ..Self::small_100m() }
    }

    /// Desk scale: 4 layers, 4 heads, width 128, context 512.
    pub fn tiny() -> Self {
        Self { n_layers: 4, n_heads: 4, d_model: 128, context_len: 512, ..Self::small_100m() }
    }

    /// One layer of width 16, for finite-difference checks.
    pub fn micro() -> Self {
        Self { n_layers: 1, n_heads: 2, d_model: 16, context_len: 32, ..Self::small_100m() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "100M" | "100m" => Ok(Self::small_100m()),
            "1B" | "1b" => Ok(Self::large_1b()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(CoreError::Invalid(format!("unknown LM preset {other:?} (100M|1B|tiny|micro)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.vocab == 0 {
            return Err(CoreError::Invalid("layers, heads, width and vocab must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::Invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.context_len < 2 {
            return Err(CoreError::Invalid("context_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuriStream<T> {
    pub config: LmConfig,
    pub params: ParamSet<T>,
}

/// Per-level activations: level 0 is embedding + position, level `l` the
/// output of block `l`. Each level is row-major `T x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub levels: Vec<Vec<f32>>,
    pub seq_len: usize,
    pub d_model: usize,
}

impl HiddenStates {
    pub fn row(&self, level: usize, t: usize) -> &[f32] {
        &self.levels[level][t * self.d_model..(t + 1) * self.d_model]
    }
}

/// Graph handles from [`AuriStream::forward_on`].
#[derive(Debug, Clone)]
pub struct LmGraph {
    /// `n_layers + 1` residual-stream levels, each `[batch * seq, d]`.
    pub levels: Vec<Var>,
    /// Final-normed residual stream, `[batch * seq, d]`.
    pub normed: Var,
    /// Per-layer keys and values, `[batch * seq, d]`.
    pub kv: Vec<(Var, Var)>,
}

/// Training-time dropout source.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> AuriStream<T> {
    /// Normal(0, 0.02) embeddings and projections (residual outputs scaled by
    /// `1/sqrt(2 L)`), unit norm gains.
    pub fn init(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (d, v, l) = (config.d_model, config.vocab, config.n_layers);
        let std = 0.02;
        let resid = std / (2.0 * l as f64).sqrt();
        let mut p = ParamSet::default();
        p.push("tok_emb", params::normal(&mut rng, &[v, d], std));
        p.push("pos_emb", params::normal(&mut rng, &[config.context_len, d], std));
        for i in 0..l {
            p.push(format!("layer{i}.norm1"), Array::full(&[d], T::one()));
            p.push(format!("layer{i}.wq"), params::normal(&mut rng, &[d, d], std));
            p.push(format!("layer{i}.wk"), params::normal(&mut rng, &[d, d], std));
            p.push(format!("layer{i}.wv"), params::normal(&mut rng, &[d, d], std));
            p.push(format!("layer{i}.wo"), params::normal(&mut rng, &[d, d], resid));
            p.push(format!("layer{i}.norm2"), Array::full(&[d], T::one()));
            p.push(format!("layer{i}.w1"), params::normal(&mut rng, &[d, 4 * d], std));
            p.push(format!("layer{i}.w2"), params::normal(&mut rng, &[4 * d, d], resid));
        }
        p.push("norm_f", Array::full(&[d], T::one()));
        p.push("head", params::normal(&mut rng, &[d, v], std));
        Ok(Self { config, params: p })
    }

    pub fn cast<U: Scalar>(&self) -> AuriStream<U> {
        AuriStream { config: self.config.clone(), params: self.params.cast() }
    }

    pub(crate) fn layer_base(l: usize) -> usize {
        2 + PARAMS_PER_LAYER * l
    }

    pub(crate) fn norm_f_index(&self) -> usize {
        Self::layer_base(self.config.n_layers)
    }

    pub(crate) fn head_index(&self) -> usize {
        self.norm_f_index() + 1
    }

    pub fn check_tokens(&self, tokens: &[u32], seq: usize) -> Result<()> {
        if seq == 0 || seq > self.config.context_len {
            return Err(CoreError::Invalid(format!(
                "sequence length {seq} outside 1..={}",
                self.config.context_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(CoreError::Invalid(format!("token {bad} outside vocabulary of {}", self.config.vocab)));
        }
        Ok(())
    }

    fn dropout_on(tape: &mut Tape<T>, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
        let Some(d) = drop.as_mut() else { return Ok(x) };
        if d.rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - d.rate));
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n).map(|_| if d.rng.random::<f64>() < d.rate { T::zero() } else { keep }).collect();
        let m = tape.constant(Array::new(&shape, mask)?);
        Ok(tape.mul(x, m)?)
    }

    /// Runs `batch` sequences of length `seq` (`tokens` row-major).
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tokens: &[u32],
        batch: usize,
        seq: usize,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<LmGraph> {
        if tokens.len() != batch * seq {
            return Err(CoreError::Invalid(format!("{} tokens for a {batch} x {seq} batch", tokens.len())));
        }
        self.check_tokens(tokens, seq)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = tape.gather(vars[0], &ids)?;
        let pe = tape.gather(vars[1], &pos)?;
        let mut x = tape.add(tok, pe)?;
        let mut levels = vec![x];
        let mut kv = Vec::with_capacity(self.config.n_layers);
        let eps = T::of(NORM_EPS);
        for l in 0..self.config.n_layers {
            let b = Self::layer_base(l);
            let h = tape.rms_norm(x, vars[b], eps)?;
            let q = tape.matmul(h, vars[b + 1])?;
            let k = tape.matmul(h, vars[b + 2])?;
            let v = tape.matmul(h, vars[b + 3])?;
            kv.push((k, v));
            let a = tape.causal_attention(q, k, v, batch, self.config.n_heads)?;
            let o = tape.matmul(a, vars[b + 4])?;
            let o = Self::dropout_on(tape, o, &mut dropout)?;
            x = tape.add(x, o)?;
            let h = tape.rms_norm(x, vars[b + 5], eps)?;
            let u = tape.matmul(h, vars[b + 6])?;
            let u = tape.silu(u);
            let m = tape.matmul(u, vars[b + 7])?;
            let m = Self::dropout_on(tape, m, &mut dropout)?;
            x = tape.add(x, m)?;
            levels.push(x);
        }
        let normed = tape.rms_norm(x, vars[self.norm_f_index()], eps)?;
        Ok(LmGraph { levels, normed, kv })
    }

    /// Logits for the given rows of the flattened `[batch * seq]` stream.
    pub fn logits_on(&self, tape: &mut Tape<T>, vars: &[Var], graph: &LmGraph, rows: &[usize]) -> Result<Var> {
        let h = tape.gather(graph.normed, rows)?;
        Ok(tape.matmul(h, vars[self.head_index()])?)
    }

    /// Mean next-token cross-entropy over positions `0..seq-1` of every sequence.
    pub fn loss_on(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tokens: &[u32],
        batch: usize,
        seq: usize,
        dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        if seq < 2 {
            return Err(CoreError::Invalid("loss needs sequences of at least 2 tokens".into()));
        }
        let graph = self.forward_on(tape, vars, tokens, batch, seq, dropout)?;
        let mut rows = Vec::with_capacity(batch * (seq - 1));
        let mut targets = Vec::with_capacity(batch * (seq - 1));
        for b in 0..batch {
            for t in 0..seq - 1 {
                rows.push(b * seq + t);
                targets.push(tokens[b * seq + t + 1] as usize);
            }
        }
        let logits = self.logits_on(tape, vars, &graph, &rows)?;
        let lp = tape.log_softmax(logits);
        let picked = tape.pick(lp, &targets)?;
        let mean = tape.mean(picked);
        Ok(tape.scale(mean, -T::one()))
    }
}

impl AuriStream<f32> {
    /// `T x vocab` logits of one sequence.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Array<f32>> {
        Ok(self.forward_full(tokens, true)?.0.expect("logits requested"))
    }

    /// Logits (optional) and every hidden level for one sequence.
    pub fn forward_full(&self, tokens: &[u32], with_logits: bool) -> Result<(Option<Array<f32>>, HiddenStates)> {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.on_tape_frozen(&mut tape);
        let seq = tokens.len();
        let g = self.forward_on(&mut tape, &vars, tokens, 1, seq, None)?;
        let logits = if with_logits {
            let rows: Vec<usize> = (0..seq).collect();
            let l = self.logits_on(&mut tape, &vars, &g, &rows)?;
            Some(tape.value(l).clone())
        } else {
            None
        };
        let levels = g.levels.iter().map(|&v| tape.value(v).data().to_vec()).collect();
        Ok((logits, HiddenStates { levels, seq_len: seq, d_model: self.config.d_model }))
    }

    /// Mean next-token cross-entropy of a batch of equal-length sequences.
    pub fn lm_loss(&self, sequences: &[Vec<u32>]) -> Result<f64> {
        let seq = sequences.first().map_or(0, Vec::len);
        if sequences.iter().any(|s| s.len() != seq) {
            return Err(CoreError::Invalid("sequences in a batch must share one length".into()));
        }
        let flat: Vec<u32> = sequences.concat();
        let mut tape = Tape::<f32>::new();
        let vars = self.params.on_tape_frozen(&mut tape);
        let loss = self.loss_on(&mut tape, &vars, &flat, sequences.len(), seq, None)?;
        Ok(tape.value(loss).item() as f64)
    }

    /// One pooled vector per token span `[a, b)` at hidden `layer`.
    ///
    /// The model sees the context up to and including each span. When the
    /// furthest span end fits in the context window, one forward pass covers
    /// all spans; otherwise each span is run on the window ending at its end.
    pub fn extract_embeddings(
        &self,
        tokens: &[u32],
        spans: &[(usize, usize)],
        layer: usize,
        pooling: Pooling,
    ) -> Result<Vec<Vec<f32>>> {
        Ok(self.extract_embeddings_multi(tokens, spans, &[layer], &[pooling])?.remove(0).remove(0))
    }

    /// Embeddings for several layers and poolings from shared forward passes:
    /// result is indexed `[layer][pooling][span]`.
    pub fn extract_embeddings_multi(
        &self,
        tokens: &[u32],
        spans: &[(usize, usize)],
        layers: &[usize],
        poolings: &[Pooling],
    ) -> Result<Vec<Vec<Vec<Vec<f32>>>>> {
        for &(a, b) in spans {
            if a >= b || b > tokens.len() {
                return Err(CoreError::Invalid(format!("span [{a}, {b}) empty or beyond {} tokens", tokens.len())));
            }
        }
        if let Some(&l) = layers.iter().find(|&&l| l > self.config.n_layers) {
            return Err(CoreError::Invalid(format!("layer {l} > {} layers", self.config.n_layers)));
        }
        let mut out = vec![vec![Vec::with_capacity(spans.len()); poolings.len()]; layers.len()];
        let Some(max_end) = spans.iter().map(|s| s.1).max() else { return Ok(out) };
        let ctx = self.config.context_len;
        let shared = if max_end <= ctx { Some(self.forward_full(&tokens[..max_end], false)?.1) } else { None };
        for &(a, b) in spans {
            let (hs, shift) = match &shared {
                Some(h) => (std::borrow::Cow::Borrowed(h), 0),
                None => {
                    let start = b.saturating_sub(ctx);
                    (std::borrow::Cow::Owned(self.forward_full(&tokens[start..b], false)?.1), start)
                }
            };
            // Spans longer than the context keep only their last `ctx` tokens.
            let a = a.max(shift);
            for (li, &layer) in layers.iter().enumerate() {
                for (pi, &pooling) in poolings.iter().enumerate() {
                    let rows = (a..b).map(|t| hs.row(layer, t - shift));
                    out[li][pi].push(pool(rows, self.config.d_model, pooling));
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, step: u64, corpus_hash: Option<String>, extra: serde_json::Value) -> Result<String> {
        self.save_with(path, step, corpus_hash, extra, Vec::new())
    }

    pub(crate) fn save_with<'a>(
        &'a self,
        path: &Path,
        step: u64,
        corpus_hash: Option<String>,
        extra: serde_json::Value,
        more: Vec<(String, &'a Array<f32>)>,
    ) -> Result<String> {
        let mut tensors: Vec<(String, &Array<f32>)> =
            self.params.names.iter().cloned().zip(self.params.tensors.iter()).collect();
        tensors.extend(more);
        params::save_checkpoint(
            path,
            CheckpointData {
                kind: CHECKPOINT_KIND,
                config: serde_json::to_value(&self.config)?,
                step,
                corpus_hash,
                tensors,
                extra,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_full(path)?.0)
    }

    pub(crate) fn load_full(path: &Path) -> Result<(Self, params::LoadedCheckpoint)> {
        let mut ck = params::load_checkpoint(path, CHECKPOINT_KIND)?;
        let config: LmConfig = serde_json::from_value(ck.manifest.config.clone())?;
        config.validate()?;
        let mut model = Self::shaped(config);
        for (name, slot) in model.params.names.iter().zip(model.params.tensors.iter_mut()) {
            let t = ck.take(name)?;
            if t.shape() != slot.shape() {
                return Err(CoreError::format(
                    path,
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok((model, ck))
    }

    /// Zero-filled parameters of the right shapes (cheaper than `init` before a load).
    fn shaped(config: LmConfig) -> Self {
        let (d, v) = (config.d_model, config.vocab);
        let mut p = ParamSet::default();
        p.push("tok_emb", Array::zeros(&[v, d]));
        p.push("pos_emb", Array::zeros(&[config.context_len, d]));
        for i in 0..config.n_layers {
            p.push(format!("layer{i}.norm1"), Array::zeros(&[d]));
            for w in ["wq", "wk", "wv", "wo"] {
                p.push(format!("layer{i}.{w}"), Array::zeros(&[d, d]));
            }
            p.push(format!("layer{i}.norm2"), Array::zeros(&[d]));
            p.push(format!("layer{i}.w1"), Array::zeros(&[d, 4 * d]));
            p.push(format!("layer{i}.w2"), Array::zeros(&[4 * d, d]));
        }
        p.push("norm_f", Array::zeros(&[d]));
        p.push("head", Array::zeros(&[d, v]));
        Self { config, params: p }
    }

    pub fn params_sha256(&self) -> String {
        let mut bytes = Vec::with_capacity(4 * self.params.num_scalars());
        for t in &self.params.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        params::sha256_hex(&bytes)
    }
}

/// Elementwise mean / max / min of the given rows.
pub fn pool<'a>(rows: impl Iterator<Item = &'a [f32]>, d: usize, pooling: Pooling) -> Vec<f32> {
    let mut acc: Vec<f64> = match pooling {
        Pooling::Mean => vec![0.0; d],
        Pooling::Max => vec![f64::NEG_INFINITY; d],
        Pooling::Min => vec![f64::INFINITY; d],
    };
    let mut n = 0usize;
    for r in rows {
        n += 1;
        for (a, &x) in acc.iter_mut().zip(r) {
            let x = x as f64;
            *a = match pooling {
                Pooling::Mean => *a + x,
                Pooling::Max => a.max(x),
                Pooling::Min => a.min(x),
            };
        }
    }
    if pooling == Pooling::Mean {
        acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    }
    acc.into_iter().map(|a| a as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let c = LmConfig::small_100m();
        assert_eq!((c.n_layers, c.n_heads, c.d_model, c.context_len, c.vocab), (12, 12, 784, 4096, 8192));
        let c = LmConfig::large_1b();
        assert_eq!((c.n_layers, c.n_heads, c.d_model), (48, 16, 1280));
        let c = LmConfig::tiny();
        assert_eq!((c.n_layers, c.n_heads, c.d_model, c.context_len), (4, 4, 128, 512));
        assert!(LmConfig { n_heads: 5, ..LmConfig::tiny() }.validate().is_err());
    }

    #[test]
    fn zero_head_gives_uniform_prediction() {
        let mut m = AuriStream::<f32>::init(LmConfig { context_len: 16, ..LmConfig::micro() }).unwrap();
        let h = m.head_index();
        m.params.tensors[h] = Array::zeros(m.params.tensors[h].shape());
        let logits = m.forward_logits(&[1, 2, 3, 4]).unwrap();
        assert_eq!(logits.shape(), &[4, 8192]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let ce = m.lm_loss(&[vec![5, 6, 7, 8]]).unwrap();
        assert!((ce - (8192f64).ln()).abs() < 1e-5, "{ce}");
    }

    #[test]
    fn pooling_examples() {
        let rows: [&[f32]; 3] = [&[1.0, -1.0], &[3.0, 0.0], &[2.0, 4.0]];
        assert_eq!(pool(rows.iter().copied(), 2, Pooling::Mean), vec![2.0, 1.0]);
        assert_eq!(pool(rows.iter().copied(), 2, Pooling::Max), vec![3.0, 4.0]);
        assert_eq!(pool(rows.iter().copied(), 2, Pooling::Min), vec![1.0, -1.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = AuriStream::<f32>::init(LmConfig { context_len: 8, ..LmConfig::micro() }).unwrap();
        assert!(m.forward_logits(&[0; 9]).is_err());
        assert!(m.forward_logits(&[8192]).is_err());
        assert!(m.extract_embeddings(&[1, 2, 3], &[(2, 2)], 0, Pooling::Mean).is_err());
        assert!(m.extract_embeddings(&[1, 2, 3], &[(0, 1)], 2, Pooling::Mean).is_err());
    }
}
