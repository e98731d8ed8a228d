//! Autoregressive sampling with a key/value cache.

use cochstream_numerics::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AuriStream, NORM_EPS};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_new: usize,
    /// 0 selects argmax decoding.
    pub temperature: f64,
    #[serde(default)]
    pub top_k: Option<usize>,
    pub seed: u64,
}

/// Draws one token from `softmax(logits / temperature)`, optionally restricted
/// to the `top_k` largest logits. Temperature 0 takes the argmax (lowest index
/// on ties).
pub fn sample_next(logits: &[f32], temperature: f64, top_k: Option<usize>, rng: &mut impl Rng) -> Result<u32> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(CoreError::Invalid(format!("temperature must be finite and >= 0, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(CoreError::Empty("logits".into()));
    }
    if top_k == Some(0) {
        return Err(CoreError::Invalid("top_k must be positive".into()));
    }
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return Ok(best as u32);
    }
    let mut cand: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = top_k.filter(|&k| k < logits.len()) {
        cand.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        cand.truncate(k);
        cand.sort_unstable();
    }
    let max = cand.iter().map(|&i| logits[i] as f64).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cand.iter().map(|&i| ((logits[i] as f64 - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in cand.iter().zip(&weights) {
        if u < w {
            return Ok(i as u32);
        }
        u -= w;
    }
    Ok(*cand.last().expect("non-empty candidates") as u32)
}

struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

fn vec_mat(x: &[f32], w: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; cols];
    for (&xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        if xi != 0.0 {
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
    }
    out
}

fn rms_norm(x: &[f32], g: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let r = (1.0 / (ms + NORM_EPS).sqrt()) as f32;
    x.iter().zip(g).map(|(&v, &gi)| v * r * gi).collect()
}

impl AuriStream<f32> {
    /// Runs `tokens` (positions 0..) through a tape and keeps every layer's
    /// keys and values; returns the last position's logits.
    fn prefill(&self, tokens: &[u32]) -> Result<(KvCache, Vec<f32>)> {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.on_tape_frozen(&mut tape);
        let g = self.forward_on(&mut tape, &vars, tokens, 1, tokens.len(), None)?;
        let logits = self.logits_on(&mut tape, &vars, &g, &[tokens.len() - 1])?;
        let cache = KvCache {
            keys: g.kv.iter().map(|&(k, _)| tape.value(k).data().to_vec()).collect(),
            values: g.kv.iter().map(|&(_, v)| tape.value(v).data().to_vec()).collect(),
            len: tokens.len(),
        };
        Ok((cache, tape.value(logits).data().to_vec()))
    }

    /// Appends one token at position `cache.len` and returns its logits.
    fn decode_step(&self, cache: &mut KvCache, token: u32) -> Vec<f32> {
        let c = &self.config;
        let (d, hd) = (c.d_model, c.head_dim());
        let p = &self.params.tensors;
        let pos = cache.len;
        let tok = &p[0].data()[token as usize * d..(token as usize + 1) * d];
        let pe = &p[1].data()[pos * d..(pos + 1) * d];
        let mut x: Vec<f32> = tok.iter().zip(pe).map(|(a, b)| a + b).collect();
        let scale = 1.0 / (hd as f64).sqrt();
        for l in 0..c.n_layers {
            let b = Self::layer_base(l);
            let h = rms_norm(&x, p[b].data());
            let q = vec_mat(&h, p[b + 1].data(), d);
            cache.keys[l].extend(vec_mat(&h, p[b + 2].data(), d));
            cache.values[l].extend(vec_mat(&h, p[b + 3].data(), d));
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let mut att = vec![0f32; d];
            for head in 0..c.n_heads {
                let off = head * hd;
                let scores: Vec<f64> = (0..=pos)
                    .map(|j| {
                        let k = &keys[j * d + off..j * d + off + hd];
                        q[off..off + hd].iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = w.iter().sum();
                for (j, wj) in w.iter().enumerate() {
                    let a = (wj / z) as f32;
                    let v = &values[j * d + off..j * d + off + hd];
                    for (o, &vv) in att[off..off + hd].iter_mut().zip(v) {
                        *o += a * vv;
                    }
                }
            }
            let o = vec_mat(&att, p[b + 4].data(), d);
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);
            let h = rms_norm(&x, p[b + 5].data());
            let u: Vec<f32> = vec_mat(&h, p[b + 6].data(), 4 * d)
                .into_iter()
                .map(|v| v / (1.0 + (-v).exp()))
                .collect();
            let m = vec_mat(&u, p[b + 7].data(), d);
            x.iter_mut().zip(&m).for_each(|(xi, mi)| *xi += mi);
        }
        cache.len += 1;
        let h = rms_norm(&x, p[self.norm_f_index()].data());
        vec_mat(&h, p[self.head_index()].data(), c.vocab)
    }
}

/// Continues `prompt` by `n_new` sampled tokens; the output starts with the
/// prompt unchanged. Prompts longer than the context are conditioned on their
/// last `context_len` tokens, and generation past the context slides the
/// window forward.
pub fn generate(model: &AuriStream<f32>, prompt: &[u32], cfg: &GenerateConfig) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(CoreError::Invalid("prompt must contain at least one token".into()));
    }
    if !(cfg.temperature >= 0.0 && cfg.temperature.is_finite()) {
        return Err(CoreError::Invalid(format!("temperature must be finite and >= 0, got {}", cfg.temperature)));
    }
    let ctx = model.config.context_len;
    let top_k = cfg.top_k.filter(|&k| k < model.config.vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = prompt.to_vec();
    out.reserve(cfg.n_new);
    let start = out.len().saturating_sub(ctx);
    let (mut cache, mut logits) = model.prefill(&out[start..])?;
    for i in 0..cfg.n_new {
        let next = sample_next(&logits, cfg.temperature, top_k, &mut rng)?;
        out.push(next);
        if i + 1 == cfg.n_new {
            break;
        }
        if cache.len < ctx {
            logits = model.decode_step(&mut cache, next);
        } else {
            (cache, logits) = model.prefill(&out[out.len() - ctx..])?;
        }
    }
    Ok(out)
}
