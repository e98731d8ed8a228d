//! Waveform recovery from a cochleagram by gradient descent through the
//! differentiable cochleagram transform.

use std::path::Path;

use cochstream_numerics::{AdamW, AdamWConfig, Array, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::cochlea::{CochleaGraph, Cochleagram, COCHLEAR_CHANNELS, FRAMES_PER_CLIP, HOP_SAMPLES, WINDOW_SAMPLES};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-2, seed: 0, init_std: 1.0 }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::Invalid("inversion needs at least one step".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(CoreError::Invalid(format!("init_std must be >= 0, got {}", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    /// Optimized signal clamped to [-1, 1].
    pub waveform: Waveform,
    /// Unclamped optimized signal.
    pub raw: Vec<f32>,
    /// `trace[i]` is the loss after `i` updates (`steps + 1` entries).
    pub trace: Vec<f64>,
}

impl Inversion {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// Mean squared error between `cochleagram(x)` and the target, minimized with
/// Adam (no weight decay) from `x ~ N(0, init_std^2)`.
pub fn invert_cochleagram(target: &Cochleagram, cfg: &InversionConfig) -> Result<Inversion> {
    cfg.validate()?;
    if target.rows != COCHLEAR_CHANNELS || target.cols != FRAMES_PER_CLIP {
        return Err(CoreError::Invalid(format!(
            "target must be {COCHLEAR_CHANNELS}x{FRAMES_PER_CLIP}, got {}x{}",
            target.rows, target.cols
        )));
    }
    if target.values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("target cochleagram".into()));
    }
    let graph = CochleaGraph::<f32>::new()?;
    let target_tm = Array::new(&[FRAMES_PER_CLIP, COCHLEAR_CHANNELS], target.to_time_major())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| CoreError::Invalid(e.to_string()))?;
    // Samples past the last analysis window never reach the objective; they
    // start (and stay) at zero instead of keeping their random draw.
    let covered = (FRAMES_PER_CLIP - 1) * HOP_SAMPLES + WINDOW_SAMPLES;
    let init: Vec<f32> =
        (0..CLIP_SAMPLES).map(|i| if i < covered { normal.sample(&mut rng) as f32 } else { 0.0 }).collect();
    let mut x = Array::new(&[CLIP_SAMPLES], init)?;
    let mut opt = AdamW::new(AdamWConfig::adam(), [&x]);
    let mut trace = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let mut tape = Tape::<f32>::new();
        let wave = tape.param(x.clone());
        let c = graph.apply(&mut tape, wave)?;
        let t = tape.constant(target_tm.clone());
        let diff = tape.sub(c, t)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq);
        let value = tape.value(loss).item() as f64;
        trace.push(value);
        if !value.is_finite() {
            let tail = &trace[trace.len().saturating_sub(5)..];
            return Err(CoreError::NonFinite(format!("inversion loss at step {step}; trace tail {tail:?}")));
        }
        if step == cfg.steps {
            break;
        }
        let mut grads = tape.backward(loss)?;
        let g = grads.take(wave).unwrap_or_else(|| Array::zeros(&[CLIP_SAMPLES]));
        if !g.all_finite() {
            return Err(CoreError::NonFinite(format!("inversion gradient at step {step} (loss {value})")));
        }
        opt.step(&mut [&mut x], &[&g], cfg.lr)?;
    }
    let raw = x.into_data();
    let waveform = Waveform::new(raw.clone(), SAMPLE_RATE)?.clamped();
    Ok(Inversion { waveform, raw, trace })
}

/// Loss trace as `step,loss` CSV.
pub fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::format(path, e.to_string()))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))?;
    Ok(())
}
