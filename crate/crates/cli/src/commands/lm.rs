use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use cochstream_core::auristream::train::{train_lm, LmLogEntry, LmTrainConfig, TokenCorpus};
use cochstream_core::auristream::{generate, AuriStream, GenerateConfig, LmConfig};
use cochstream_core::params::sha256_file;
use cochstream_core::wavcoch::{read_ctok, vocab_size, write_ctok, CochlearTokenSeq};
use serde::{Deserialize, Serialize};

use super::{display, ensure_dir};
use crate::config::{default_schema_version, require, resolve, SCHEMA_VERSION};
use crate::Report;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmTrainCmdConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Directory of `.ctok` files (searched recursively).
    pub tokens: PathBuf,
    pub out_dir: PathBuf,
    /// `100M`, `1B`, `tiny` or `micro`.
    pub preset: String,
    pub vocab: Option<usize>,
    pub context_len: Option<usize>,
    pub dropout: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub floor_lr: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub resume: Option<PathBuf>,
}

impl Default for LmTrainCmdConfig {
    fn default() -> Self {
        let d = LmTrainConfig::desk();
        Self {
            schema_version: SCHEMA_VERSION,
            tokens: PathBuf::new(),
            out_dir: PathBuf::new(),
            preset: "tiny".into(),
            vocab: None,
            context_len: None,
            dropout: d.model.dropout,
            steps: d.steps,
            batch_size: d.batch_size,
            seed: d.seed,
            peak_lr: d.peak_lr,
            warmup_steps: d.warmup_steps,
            floor_lr: d.floor_lr,
            log_every: d.log_every,
            checkpoint_every: d.checkpoint_every,
            resume: None,
        }
    }
}

impl LmTrainCmdConfig {
    pub fn train_config(&self) -> Result<LmTrainConfig> {
        let mut model = LmConfig::preset(&self.preset)?;
        if let Some(v) = self.vocab {
            model.vocab = v;
        }
        if let Some(c) = self.context_len {
            model.context_len = c;
        }
        model.dropout = self.dropout;
        let cfg = LmTrainConfig {
            model,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            floor_lr: self.floor_lr,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            ..LmTrainConfig::desk()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LmTrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[arg(long = "batch")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long = "lr")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LmTrainResult {
    pub checkpoint: String,
    pub params_sha256: String,
    pub corpus_hash: String,
    pub windows: usize,
    pub window_len: usize,
    pub token_files: usize,
    pub first: Option<LmLogEntry>,
    pub last: Option<LmLogEntry>,
}

pub fn run_train(cfg: &LmTrainCmdConfig) -> Result<LmTrainResult> {
    require(&cfg.tokens, "tokens")?;
    require(&cfg.out_dir, "out_dir")?;
    let tc = cfg.train_config()?;
    let corpus = TokenCorpus::load_dir(&cfg.tokens, &tc.model)?;
    let (windows, window_len, token_files) = (corpus.len(), corpus.seq_len, corpus.sources.len());
    let out = train_lm(&tc, corpus, Some(&cfg.out_dir), cfg.resume.as_deref())?;
    Ok(LmTrainResult {
        checkpoint: out.checkpoint.as_deref().map(display).unwrap_or_default(),
        params_sha256: out.params_sha256,
        corpus_hash: out.corpus_hash,
        windows,
        window_len,
        token_files,
        first: out.log.first().cloned(),
        last: out.log.last().cloned(),
    })
}

pub fn execute_train(args: LmTrainArgs) -> Result<Report> {
    let cfg: LmTrainCmdConfig = resolve(LmTrainCmdConfig::default(), args.config.as_deref(), &args)?;
    let result = run_train(&cfg)?;
    Report::new("lm-train", &cfg, Some(cfg.seed), &result)?.input(&cfg.tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateCmdConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// AuriStream checkpoint manifest.
    pub checkpoint: PathBuf,
    /// Prompt `.ctok` file.
    pub prompt: PathBuf,
    /// Keep only the first N prompt tokens.
    pub prompt_tokens: Option<usize>,
    pub output: PathBuf,
    pub n_new: usize,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl Default for GenerateCmdConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            checkpoint: PathBuf::new(),
            prompt: PathBuf::new(),
            prompt_tokens: None,
            output: PathBuf::new(),
            n_new: 494,
            temperature: 1.0,
            top_k: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<usize>,
    #[arg(long = "out")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_new: Option<usize>,
    #[arg(long = "temp")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[arg(long = "topk")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateResult {
    pub output: String,
    pub prompt_len: usize,
    pub total_len: usize,
    pub sha256: String,
}

/// Continuation of `prompt` as a token sequence of the prompt's bit width.
pub fn continue_tokens(model: &AuriStream<f32>, prompt: &CochlearTokenSeq, g: &GenerateConfig) -> Result<CochlearTokenSeq> {
    if model.config.vocab > vocab_size(prompt.bit_width)? as usize {
        bail!(
            "model vocabulary {} exceeds the {}-bit token space of the prompt",
            model.config.vocab,
            prompt.bit_width
        );
    }
    let ids = generate(model, &prompt.ids, g)?;
    let mut seq = CochlearTokenSeq::new(ids, prompt.bit_width)?;
    seq.source = prompt.source.clone();
    Ok(seq)
}

pub fn run_generate(cfg: &GenerateCmdConfig) -> Result<GenerateResult> {
    require(&cfg.checkpoint, "checkpoint")?;
    require(&cfg.prompt, "prompt")?;
    require(&cfg.output, "output")?;
    let model = AuriStream::<f32>::load(&cfg.checkpoint)?;
    let mut prompt = read_ctok(&cfg.prompt)?;
    if let Some(n) = cfg.prompt_tokens {
        if n == 0 || n > prompt.len() {
            bail!("prompt_tokens {n} outside 1..={}", prompt.len());
        }
        prompt.ids.truncate(n);
    }
    let g = GenerateConfig { n_new: cfg.n_new, temperature: cfg.temperature, top_k: cfg.top_k, seed: cfg.seed };
    let seq = continue_tokens(&model, &prompt, &g)?;
    if let Some(parent) = cfg.output.parent() {
        ensure_dir(parent)?;
    }
    write_ctok(&cfg.output, &seq)?;
    Ok(GenerateResult {
        output: display(&cfg.output),
        prompt_len: prompt.len(),
        total_len: seq.len(),
        sha256: sha256_file(&cfg.output)?,
    })
}

pub fn execute_generate(args: GenerateArgs) -> Result<Report> {
    let cfg: GenerateCmdConfig = resolve(GenerateCmdConfig::default(), args.config.as_deref(), &args)?;
    let result = run_generate(&cfg)?;
    Report::new("generate", &cfg, Some(cfg.seed), &result)?.input(&cfg.checkpoint)?.input(&cfg.prompt)
}
