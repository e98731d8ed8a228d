//! AuriStream training: CTOK streams packed into fixed windows, AdamW with
//! warmup + cosine decay, resumable checkpoints.

use std::path::{Path, PathBuf};

use cochstream_numerics::{AdamW, AdamWConfig, Array, ScheduleSpec, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AuriStream, Dropout, LmConfig};
use crate::corpus::batch_indices;
use crate::wavcoch::read_ctok;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmTrainConfig {
    pub model: LmConfig,
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
}

impl LmTrainConfig {
    /// 500k steps, peak 3e-4 after 2000 warmup steps, cosine decay.
    pub fn full() -> Self {
        Self {
            model: LmConfig::small_100m(),
            steps: 500_000,
            batch_size: 8,
            seed: 0,
            peak_lr: 3e-4,
            warmup_steps: 2000,
            floor_lr: 0.0,
            optimizer: AdamWConfig::default(),
            log_every: 100,
            checkpoint_every: 10_000,
        }
    }

    pub fn desk() -> Self {
        Self {
            model: LmConfig::tiny(),
            steps: 2000,
            batch_size: 4,
            peak_lr: 1e-3,
            warmup_steps: 100,
            log_every: 50,
            checkpoint_every: 0,
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

/// Token streams concatenated (no separator) and cut into non-overlapping
/// windows of `seq_len` tokens; a trailing partial window is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCorpus {
    pub windows: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub hash: String,
    pub sources: Vec<PathBuf>,
}

impl TokenCorpus {
    /// Packs `streams` into windows of `context_len`. A corpus shorter than one
    /// window becomes a single window holding all of it.
    pub fn pack(streams: &[Vec<u32>], context_len: usize) -> Result<Self> {
        let all: Vec<u32> = streams.concat();
        if all.len() < 2 {
            return Err(CoreError::Empty("token corpus needs at least 2 tokens".into()));
        }
        let seq_len = context_len.min(all.len());
        let windows: Vec<Vec<u32>> = all.chunks_exact(seq_len).map(<[u32]>::to_vec).collect();
        let mut h = Sha256::new();
        h.update((seq_len as u64).to_le_bytes());
        for t in &all {
            h.update(t.to_le_bytes());
        }
        Ok(Self { windows, seq_len, hash: hex::encode(h.finalize()), sources: Vec::new() })
    }

    /// Every `.ctok` file under `dir` in path order.
    pub fn load_dir(dir: &Path, model: &LmConfig) -> Result<Self> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).map_err(|e| CoreError::io(&d, e))? {
                let p = entry.map_err(|e| CoreError::io(&d, e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.extension().is_some_and(|e| e == "ctok") {
                    files.push(p);
                }
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(CoreError::Empty(format!("no .ctok files under {}", dir.display())));
        }
        let mut streams = Vec::with_capacity(files.len());
        for f in &files {
            let seq = read_ctok(f)?;
            if seq.vocab() as usize > model.vocab {
                return Err(CoreError::Invalid(format!(
                    "{}: {}-bit tokens exceed the model vocabulary of {}",
                    f.display(),
                    seq.bit_width,
                    model.vocab
                )));
            }
            streams.push(seq.ids);
        }
        let mut corpus = Self::pack(&streams, model.context_len)?;
        corpus.sources = files;
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmLogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    train_config: LmTrainConfig,
    optimizer_t: u64,
    log: Vec<LmLogEntry>,
}

/// Stepwise trainer; `step` advances one optimizer update.
pub struct LmTrainer {
    pub cfg: LmTrainConfig,
    pub model: AuriStream<f32>,
    pub log: Vec<LmLogEntry>,
    opt: AdamW<f32>,
    schedule: ScheduleSpec,
    corpus: TokenCorpus,
    next_step: u64,
}

impl LmTrainer {
    pub fn new(cfg: LmTrainConfig, corpus: TokenCorpus) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(CoreError::Empty("token corpus has no windows".into()));
        }
        let model = AuriStream::<f32>::init(cfg.model.clone())?;
        let opt = AdamW::new(cfg.optimizer, model.params.tensors.iter());
        Ok(Self { schedule: cfg.schedule()?, cfg, model, log: Vec::new(), opt, corpus, next_step: 1 })
    }

    /// Restores model, optimizer state and log from a checkpoint written by
    /// [`LmTrainer::save`] under the same config and corpus.
    pub fn resume(cfg: LmTrainConfig, corpus: TokenCorpus, path: &Path) -> Result<Self> {
        let mut t = Self::new(cfg, corpus)?;
        let (model, mut ck) = AuriStream::<f32>::load_full(path)?;
        let state: ResumeState = serde_json::from_value(ck.manifest.extra.clone())?;
        if state.train_config != t.cfg {
            return Err(CoreError::Invalid("resume checkpoint was written with a different training config".into()));
        }
        if ck.manifest.corpus_hash.as_deref() != Some(t.corpus.hash.as_str()) {
            return Err(CoreError::Invalid("resume checkpoint was trained on a different token corpus".into()));
        }
        for (i, name) in model.params.names.iter().enumerate() {
            t.opt.m[i] = ck.take(&format!("adam.m.{name}"))?;
            t.opt.v[i] = ck.take(&format!("adam.v.{name}"))?;
        }
        t.opt.t = state.optimizer_t;
        t.log = state.log;
        t.next_step = ck.manifest.step + 1;
        t.model = model;
        Ok(t)
    }

    /// Number of completed steps.
    pub fn completed(&self) -> u64 {
        self.next_step - 1
    }

    pub fn is_done(&self) -> bool {
        self.next_step > self.cfg.steps
    }

    pub fn corpus(&self) -> &TokenCorpus {
        &self.corpus
    }

    /// One update; returns the pre-update batch loss.
    pub fn step(&mut self) -> Result<f64> {
        if self.is_done() {
            return Err(CoreError::Invalid(format!("training already finished at step {}", self.cfg.steps)));
        }
        let step = self.next_step;
        let batch = batch_indices(self.cfg.seed, self.corpus.len(), self.cfg.batch_size, step);
        let seq = self.corpus.seq_len;
        let mut flat = Vec::with_capacity(batch.len() * seq);
        for &b in &batch {
            flat.extend_from_slice(&self.corpus.windows[b]);
        }
        // Dropout masks depend only on (seed, step), so resumed runs replay them.
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ step.wrapping_mul(0xd1b5_4a32_d192_ed03));
        let dropout = Some(Dropout { rate: self.cfg.model.dropout, rng: &mut rng });
        let mut tape = Tape::<f32>::new();
        let vars = self.model.params.on_tape(&mut tape);
        let loss_var = self.model.loss_on(&mut tape, &vars, &flat, batch.len(), seq, dropout)?;
        let loss = tape.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(CoreError::NonFinite(format!("loss at step {step}; last log entry: {:?}", self.log.last())));
        }
        let mut grads = tape.backward(loss_var)?;
        let grads: Vec<Array<f32>> = vars
            .iter()
            .zip(&self.model.params.tensors)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Array::zeros(p.shape())))
            .collect();
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(CoreError::NonFinite(format!(
                "gradient of {} at step {step} (loss {loss})",
                self.model.params.names[i]
            )));
        }
        let lr = self.schedule.lr_at(step);
        let mut refs: Vec<&mut Array<f32>> = self.model.params.tensors.iter_mut().collect();
        let grefs: Vec<&Array<f32>> = grads.iter().collect();
        self.opt.step(&mut refs, &grefs, lr)?;
        if step == 1 || step % self.cfg.log_every == 0 || step == self.cfg.steps {
            self.log.push(LmLogEntry { step, loss, lr });
        }
        self.next_step += 1;
        Ok(loss)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let names = &self.model.params.names;
        let mn: Vec<String> = names.iter().map(|n| format!("adam.m.{n}")).collect();
        let vn: Vec<String> = names.iter().map(|n| format!("adam.v.{n}")).collect();
        let mut more: Vec<(String, &Array<f32>)> = mn.into_iter().zip(self.opt.m.iter()).collect();
        more.extend(vn.into_iter().zip(self.opt.v.iter()));
        let state = ResumeState { train_config: self.cfg.clone(), optimizer_t: self.opt.t, log: self.log.clone() };
        self.model.save_with(
            path,
            self.completed(),
            Some(self.corpus.hash.clone()),
            serde_json::to_value(state)?,
            more,
        )
    }
}

#[derive(Debug, Clone)]
pub struct LmTrainOutcome {
    pub model: AuriStream<f32>,
    pub log: Vec<LmLogEntry>,
    pub corpus_hash: String,
    pub checkpoint: Option<PathBuf>,
    pub params_sha256: String,
}

/// Runs all steps, writing `lm_step{N}.json` checkpoints, the final `lm.json`
/// and `train_log.json` under `out_dir` when given.
pub fn train_lm(
    cfg: &LmTrainConfig,
    corpus: TokenCorpus,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<LmTrainOutcome> {
    let mut t = match resume {
        Some(path) => LmTrainer::resume(cfg.clone(), corpus, path)?,
        None => LmTrainer::new(cfg.clone(), corpus)?,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    while !t.is_done() {
        t.step()?;
        let step = t.completed();
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                t.save(&dir.join(format!("lm_step{step}.json")))?;
            }
        }
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("lm.json");
            t.save(&path)?;
            let log_path = dir.join("train_log.json");
            std::fs::write(&log_path, serde_json::to_string_pretty(&t.log)?).map_err(|e| CoreError::io(&log_path, e))?;
            Some(path)
        }
        None => None,
    };
    Ok(LmTrainOutcome {
        params_sha256: t.model.params_sha256(),
        corpus_hash: t.corpus.hash.clone(),
        model: t.model,
        log: t.log,
        checkpoint,
    })
}
