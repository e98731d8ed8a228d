//! WavCoch training loop: deterministic batching, AdamW with warmup + cosine
//! decay, JSON logs and resumable checkpoints.

use std::path::{Path, PathBuf};

use cochstream_numerics::{AdamW, AdamWConfig, Array, ScheduleSpec, Tape};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{codebook_stats, CochlearTokenSeq, Quantizer, WavCoch, WavCochConfig};
use crate::cochlea::{self, SpectralFrames};
pub use crate::corpus::batch_indices;
use crate::corpus::{self, Clip};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavCochTrainConfig {
    pub model: WavCochConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    #[serde(default)]
    pub floor_lr: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Clips held out from training to measure codebook usage. With 0, usage is
    /// measured on the first training clips instead.
    #[serde(default)]
    pub probe_clips: usize,
}

impl WavCochTrainConfig {
    /// Full-scale schedule: 200k steps, peak 1e-4, 2000 warmup.
    pub fn full() -> Self {
        Self {
            model: WavCochConfig::full(),
            steps: 200_000,
            batch_size: 8,
            seed: 0,
            peak_lr: 1e-4,
            warmup_steps: 2000,
            floor_lr: 0.0,
            optimizer: AdamWConfig::default(),
            log_every: 100,
            checkpoint_every: 10_000,
            probe_clips: 8,
        }
    }

    /// Desk-scale run of the tiny model.
    pub fn desk() -> Self {
        Self {
            model: WavCochConfig::tiny(),
            steps: 5000,
            peak_lr: 1e-3,
            warmup_steps: 100,
            log_every: 50,
            checkpoint_every: 0,
            probe_clips: 0,
            ..Self::full()
        }
    }

    pub fn schedule(&self) -> Result<ScheduleSpec> {
        Ok(ScheduleSpec::new(self.peak_lr, self.warmup_steps.min(self.steps).max(1), self.steps.max(1), self.floor_lr)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(CoreError::Invalid("steps, batch_size and log_every must be positive".into()));
        }
        self.schedule()?;
        Ok(())
    }
}

/// Encoder inputs and decoder targets of every clip, computed once.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub ids: Vec<String>,
    pub frames: usize,
    pub features: usize,
    pub rows: usize,
    /// Per clip, time-major `frames x features`.
    pub inputs: Vec<Vec<f32>>,
    /// Per clip, time-major `frames x rows`.
    pub targets: Vec<Vec<f32>>,
    pub hash: String,
}

impl PreparedCorpus {
    pub fn prepare(clips: &[Clip], model: &WavCochConfig) -> Result<Self> {
        if clips.is_empty() {
            return Err(CoreError::Empty("training corpus".into()));
        }
        let mode = model.input.spectrum_mode();
        let mut inputs = Vec::with_capacity(clips.len());
        let mut targets = Vec::with_capacity(clips.len());
        for c in clips {
            inputs.push(cochlea::dft_frontend(&c.wave, mode)?.values);
            targets.push(cochlea::target_of(&c.wave, model.target)?.to_time_major());
        }
        Ok(Self {
            ids: clips.iter().map(|c| c.id.clone()).collect(),
            frames: cochlea::FRAMES_PER_CLIP,
            features: model.input.features(),
            rows: model.output_rows(),
            inputs,
            targets,
            hash: corpus::corpus_hash(clips),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn spectral_frames(&self, i: usize, model: &WavCochConfig) -> SpectralFrames {
        SpectralFrames {
            frames: self.frames,
            cols: self.features,
            values: self.inputs[i].clone(),
            mode: model.input.spectrum_mode(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub loss: f64,
    pub mse: f64,
    pub entropy: f64,
    pub lr: f64,
    pub usage: usize,
}

#[derive(Debug, Clone)]
pub struct WavCochTrainOutcome {
    pub model: WavCoch<f32>,
    pub log: Vec<TrainLogEntry>,
    /// SHA-256 over the clip ids consumed, in order, across all steps.
    pub order_hash: String,
    pub corpus_hash: String,
    pub checkpoint: Option<PathBuf>,
    pub params_sha256: String,
}

/// Quantized-path MSE and codebook usage over the given clips.
pub fn evaluate(model: &WavCoch<f32>, data: &PreparedCorpus, clips: &[usize]) -> Result<(f64, usize)> {
    let mut se = 0.0;
    let mut n = 0usize;
    let mut seqs = Vec::with_capacity(clips.len());
    for &i in clips {
        let frames = data.spectral_frames(i, &model.config);
        let enc = model.encode_bits(&frames)?;
        let pred = model.decode_bits(enc.frames, enc.bits.clone())?.to_time_major();
        se += pred.iter().zip(&data.targets[i]).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
        n += pred.len();
        seqs.push(CochlearTokenSeq::new(enc.ids(), model.config.bit_width)?);
    }
    let usage = codebook_stats(&seqs, model.config.bit_width)?.usage();
    Ok((se / n.max(1) as f64, usage))
}

fn split(cfg: &WavCochTrainConfig, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if cfg.probe_clips == 0 {
        let train: Vec<usize> = (0..n).collect();
        let probe = train.iter().copied().take(8).collect();
        return Ok((train, probe));
    }
    if n <= cfg.probe_clips {
        return Err(CoreError::Invalid(format!(
            "corpus has {n} clips; cannot hold out {} for probing",
            cfg.probe_clips
        )));
    }
    Ok(((0..n - cfg.probe_clips).collect(), (n - cfg.probe_clips..n).collect()))
}

pub fn clip_order_hash(cfg: &WavCochTrainConfig, data: &PreparedCorpus) -> Result<String> {
    let (train, _) = split(cfg, data.len())?;
    let mut h = Sha256::new();
    for step in 1..=cfg.steps {
        for i in batch_indices(cfg.seed, train.len(), cfg.batch_size, step) {
            h.update(data.ids[train[i]].as_bytes());
            h.update([0u8]);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    train_config: WavCochTrainConfig,
    optimizer_t: u64,
    log: Vec<TrainLogEntry>,
    order_hash: String,
}

fn checkpoint_tensor_names(model: &WavCoch<f32>) -> (Vec<String>, Vec<String>) {
    let m = model.params.names.iter().map(|n| format!("adam.m.{n}")).collect();
    let v = model.params.names.iter().map(|n| format!("adam.v.{n}")).collect();
    (m, v)
}

fn write_checkpoint(
    path: &Path,
    model: &WavCoch<f32>,
    opt: &AdamW<f32>,
    step: u64,
    cfg: &WavCochTrainConfig,
    log: &[TrainLogEntry],
    order_hash: &str,
    corpus_hash: &str,
) -> Result<String> {
    let (mn, vn) = checkpoint_tensor_names(model);
    let mut more: Vec<(String, &Array<f32>)> = mn.into_iter().zip(opt.m.iter()).collect();
    more.extend(vn.into_iter().zip(opt.v.iter()));
    let state = ResumeState {
        train_config: cfg.clone(),
        optimizer_t: opt.t,
        log: log.to_vec(),
        order_hash: order_hash.to_string(),
    };
    model.save_with(path, step, Some(corpus_hash.to_string()), serde_json::to_value(state)?, more)
}

/// Trains on `data`, writing checkpoints and `train_log.json` under `out_dir`
/// when given. With `resume`, continues from a checkpoint written by this
/// function with the same config and corpus.
pub fn train_wavcoch(
    cfg: &WavCochTrainConfig,
    data: &PreparedCorpus,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<WavCochTrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Empty("training corpus".into()));
    }
    if data.features != cfg.model.input.features() || data.rows != cfg.model.output_rows() {
        return Err(CoreError::Invalid("prepared corpus does not match the model's input/target".into()));
    }
    let (train, probe) = split(cfg, data.len())?;
    let schedule = cfg.schedule()?;
    let order_hash = clip_order_hash(cfg, data)?;

    let mut model = WavCoch::<f32>::init(cfg.model.clone())?;
    let mut opt = AdamW::new(cfg.optimizer, model.params.tensors.iter());
    let mut log = Vec::new();
    let mut start = 1;
    if let Some(path) = resume {
        let (loaded, mut ck) = WavCoch::<f32>::load_full(path)?;
        let state: ResumeState = serde_json::from_value(ck.manifest.extra.clone())?;
        if state.train_config != *cfg {
            return Err(CoreError::Invalid("resume checkpoint was written with a different training config".into()));
        }
        if ck.manifest.corpus_hash.as_deref() != Some(data.hash.as_str()) {
            return Err(CoreError::Invalid("resume checkpoint was trained on a different corpus".into()));
        }
        let (mn, vn) = checkpoint_tensor_names(&loaded);
        for (i, (m, v)) in mn.iter().zip(&vn).enumerate() {
            opt.m[i] = ck.take(m)?;
            opt.v[i] = ck.take(v)?;
        }
        opt.t = state.optimizer_t;
        log = state.log;
        start = ck.manifest.step + 1;
        model = loaded;
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let (t, f, r) = (data.frames, data.features, data.rows);
    for step in start..=cfg.steps {
        let batch = batch_indices(cfg.seed, train.len(), cfg.batch_size, step);
        let mut xs = Vec::with_capacity(batch.len() * t * f);
        let mut ys = Vec::with_capacity(batch.len() * t * r);
        for &b in &batch {
            xs.extend_from_slice(&data.inputs[train[b]]);
            ys.extend_from_slice(&data.targets[train[b]]);
        }
        let mut tape = Tape::<f32>::new();
        let vars = model.params.on_tape(&mut tape);
        let x = tape.constant(Array::new(&[batch.len(), t, f], xs)?);
        let y = tape.constant(Array::new(&[batch.len(), t, r], ys)?);
        let lg = model.loss_on(&mut tape, &vars, x, y, Quantizer::StraightThrough)?;
        let loss = tape.value(lg.loss).item() as f64;
        let mse = tape.value(lg.mse).item() as f64;
        let entropy = tape.value(lg.penalty).item() as f64;
        if !loss.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "loss at step {step} (mse {mse}, entropy {entropy}); last log entry: {:?}",
                log.last()
            )));
        }
        let mut grads = tape.backward(lg.loss)?;
        let grads: Vec<Array<f32>> = vars
            .iter()
            .zip(&model.params.tensors)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Array::zeros(p.shape())))
            .collect();
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(CoreError::NonFinite(format!(
                "gradient of {} at step {step} (loss {loss})",
                model.params.names[i]
            )));
        }
        let lr = schedule.lr_at(step);
        let mut refs: Vec<&mut Array<f32>> = model.params.tensors.iter_mut().collect();
        let grefs: Vec<&Array<f32>> = grads.iter().collect();
        opt.step(&mut refs, &grefs, lr)?;

        if step == 1 || step % cfg.log_every == 0 || step == cfg.steps {
            let (_, usage) = evaluate(&model, data, &probe)?;
            log.push(TrainLogEntry { step, loss, mse, entropy, lr, usage });
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                let path = dir.join(format!("wavcoch_step{step}.json"));
                write_checkpoint(&path, &model, &opt, step, cfg, &log, &order_hash, &data.hash)?;
            }
        }
    }

    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("wavcoch.json");
            write_checkpoint(&path, &model, &opt, cfg.steps, cfg, &log, &order_hash, &data.hash)?;
            let log_path = dir.join("train_log.json");
            std::fs::write(&log_path, serde_json::to_string_pretty(&log)?).map_err(|e| CoreError::io(&log_path, e))?;
            Some(path)
        }
        None => None,
    };
    Ok(WavCochTrainOutcome {
        params_sha256: model.params_sha256(),
        model,
        log,
        order_hash,
        corpus_hash: data.hash.clone(),
        checkpoint,
    })
}
