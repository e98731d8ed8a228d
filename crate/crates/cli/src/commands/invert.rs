use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Args;
use cochstream_core::audio::{self, save_wav, CLIP_SAMPLES, SAMPLE_RATE};
use cochstream_core::auristream::{AuriStream, GenerateConfig};
use cochstream_core::cochlea::{
    cochleagram, pgm_pixels, read_cgrm, render_pgm, write_pgm, Cochleagram, COCHLEAR_CHANNELS, FRAMES_PER_CLIP,
};
use cochstream_core::inversion::{invert_cochleagram, write_trace_csv, InversionConfig};
use cochstream_core::params::sha256_file;
use cochstream_core::wavcoch::{CochlearTokenSeq, WavCoch};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lm::continue_tokens;
use super::{display, ensure_dir, write_json};
use crate::config::{default_schema_version, require, resolve, SCHEMA_VERSION};
use crate::Report;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// `.cgrm` target (211 x 988).
    pub input: PathBuf,
    /// Output WAV; the loss trace goes to `<output>.trace.csv`.
    pub output: PathBuf,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for InvertConfig {
    fn default() -> Self {
        let d = InversionConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            input: PathBuf::new(),
            output: PathBuf::new(),
            steps: d.steps,
            lr: d.lr,
            seed: d.seed,
            init_std: d.init_std,
        }
    }
}

impl InvertConfig {
    fn inversion(&self) -> InversionConfig {
        InversionConfig { steps: self.steps, lr: self.lr, seed: self.seed, init_std: self.init_std }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct InvertArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long = "out")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvertResult {
    pub output: String,
    pub trace: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub ratio: f64,
    pub sha256: String,
}

fn trace_path(wav: &Path) -> PathBuf {
    wav.with_extension("trace.csv")
}

pub fn invert_to_wav(target: &Cochleagram, cfg: &InversionConfig, output: &Path) -> Result<InvertResult> {
    let inv = invert_cochleagram(target, cfg)?;
    if let Some(parent) = output.parent() {
        ensure_dir(parent)?;
    }
    save_wav(output, &inv.waveform)?;
    let trace = trace_path(output);
    write_trace_csv(&trace, &inv.trace)?;
    Ok(InvertResult {
        output: display(output),
        trace: display(&trace),
        initial_loss: inv.initial_loss(),
        final_loss: inv.final_loss(),
        ratio: inv.final_loss() / inv.initial_loss(),
        sha256: sha256_file(output)?,
    })
}

pub fn run_invert(cfg: &InvertConfig) -> Result<InvertResult> {
    require(&cfg.input, "input")?;
    require(&cfg.output, "output")?;
    let target = read_cgrm(&cfg.input)?;
    invert_to_wav(&target, &cfg.inversion(), &cfg.output)
}

pub fn execute_invert(args: InvertArgs) -> Result<Report> {
    let cfg: InvertConfig = resolve(InvertConfig::default(), args.config.as_deref(), &args)?;
    let result = run_invert(&cfg)?;
    Report::new("invert", &cfg, Some(cfg.seed), &result)?.input(&cfg.input)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub wavcoch: PathBuf,
    pub lm: PathBuf,
    /// Source audio, fitted to one 5 s clip.
    pub wav: PathBuf,
    pub out_dir: PathBuf,
    /// Prompt length in seconds.
    pub cut_secs: f64,
    pub seeds: Vec<u64>,
    pub temperature: f64,
    pub top_k: Option<usize>,
    /// Inversion steps per rollout (0 skips audio rendering).
    pub invert_steps: usize,
    pub invert_lr: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            wavcoch: PathBuf::new(),
            lm: PathBuf::new(),
            wav: PathBuf::new(),
            out_dir: PathBuf::new(),
            cut_secs: 2.5,
            seeds: vec![0, 1, 2],
            temperature: 1.0,
            top_k: None,
            invert_steps: 2000,
            invert_lr: InversionConfig::default().lr,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RolloutArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wavcoch: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wav: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long = "cut")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cut_secs: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long = "temp")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[arg(long = "topk")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invert_steps: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Rollout {
    pub seed: u64,
    pub tokens_sha256: String,
    pub pgm: String,
    pub wav: Option<InvertResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutResult {
    pub prompt_tokens: usize,
    pub total_tokens: usize,
    pub ground_truth_pgm: String,
    pub figure_pgm: String,
    pub rollouts: Vec<Rollout>,
    /// Every rollout reproduces the prompt's predicted cochleagram columns.
    pub prompt_identical: bool,
    pub distinct_continuations: usize,
}

/// Number of prompt frames for a cut at `cut_secs` into a 5 s clip.
pub fn prompt_frames(cut_secs: f64) -> Result<usize> {
    let clip_secs = CLIP_SAMPLES as f64 / SAMPLE_RATE as f64;
    if !(cut_secs > 0.0 && cut_secs < clip_secs) {
        bail!("cut must lie in (0, {clip_secs}) seconds, got {cut_secs}");
    }
    let n = (FRAMES_PER_CLIP as f64 * cut_secs / clip_secs).floor() as usize;
    if n == 0 {
        bail!("cut {cut_secs} s leaves no prompt frames");
    }
    Ok(n)
}

/// Renders `m` with a white vertical marker at column `cut`.
fn pixels_with_marker(m: &Cochleagram, cut: usize) -> Vec<u8> {
    let mut px = pgm_pixels(m, |x| x);
    for r in 0..m.rows {
        px[r * m.cols + cut.min(m.cols - 1)] = 255;
    }
    px
}

pub fn run_rollout(cfg: &RolloutConfig) -> Result<RolloutResult> {
    require(&cfg.wavcoch, "wavcoch")?;
    require(&cfg.lm, "lm")?;
    require(&cfg.wav, "wav")?;
    require(&cfg.out_dir, "out_dir")?;
    if cfg.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let cut = prompt_frames(cfg.cut_secs)?;
    let wavcoch = WavCoch::<f32>::load(&cfg.wavcoch)?;
    let lm = AuriStream::<f32>::load(&cfg.lm)?;
    if wavcoch.config.output_rows() != COCHLEAR_CHANNELS {
        bail!("rollout figures need a cochleagram-target WavCoch");
    }
    let clip = audio::fit_length(&audio::resample_to_16k(&audio::load_wav(&cfg.wav)?)?, CLIP_SAMPLES);
    let tokens = wavcoch.tokenize(&clip)?;
    let mut prompt = tokens.clone();
    prompt.ids.truncate(cut);
    ensure_dir(&cfg.out_dir)?;

    let truth = cochleagram(&clip)?;
    let gt_pgm = cfg.out_dir.join("ground_truth.pgm");
    write_pgm(&gt_pgm, truth.cols, truth.rows, &pixels_with_marker(&truth, cut))?;
    render_pgm(&truth, &cfg.out_dir.join("ground_truth_plain.pgm"))?;

    let n_new = tokens.len() - cut;
    let generated = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(CochlearTokenSeq, Cochleagram)> {
            let g = GenerateConfig { n_new, temperature: cfg.temperature, top_k: cfg.top_k, seed };
            let seq = continue_tokens(&lm, &prompt, &g)?;
            let pred = wavcoch.detokenize(&seq)?;
            Ok((seq, pred))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rollouts = Vec::with_capacity(cfg.seeds.len());
    let mut figure = pixels_with_marker(&truth, cut);
    for (&seed, (seq, pred)) in cfg.seeds.iter().zip(&generated) {
        let stem = cfg.out_dir.join(format!("rollout_seed{seed}"));
        let tok = stem.with_extension("ctok");
        cochstream_core::wavcoch::write_ctok(&tok, seq)?;
        let pgm = stem.with_extension("pgm");
        let px = pixels_with_marker(pred, cut);
        write_pgm(&pgm, pred.cols, pred.rows, &px)?;
        figure.extend(std::iter::repeat_n(128u8, pred.cols * 4));
        figure.extend(px);
        let wav = if cfg.invert_steps > 0 {
            let inv = InversionConfig { steps: cfg.invert_steps, lr: cfg.invert_lr, seed, ..InversionConfig::default() };
            Some(invert_to_wav(pred, &inv, &stem.with_extension("wav"))?)
        } else {
            None
        };
        rollouts.push(Rollout { seed, tokens_sha256: sha256_file(&tok)?, pgm: display(&pgm), wav });
    }
    let figure_pgm = cfg.out_dir.join("rollouts.pgm");
    let rows = truth.rows * (1 + generated.len()) + 4 * generated.len();
    write_pgm(&figure_pgm, truth.cols, rows, &figure)?;

    let first = &generated[0].1;
    let prompt_identical = generated.iter().all(|(seq, pred)| {
        seq.ids[..cut] == tokens.ids[..cut]
            && (0..pred.rows).all(|r| pred.row(r)[..cut] == first.row(r)[..cut])
    });
    let mut continuations: Vec<&[u32]> = generated.iter().map(|(s, _)| &s.ids[cut..]).collect();
    continuations.sort();
    continuations.dedup();
    let result = RolloutResult {
        prompt_tokens: cut,
        total_tokens: tokens.len(),
        ground_truth_pgm: display(&gt_pgm),
        figure_pgm: display(&figure_pgm),
        rollouts,
        prompt_identical,
        distinct_continuations: continuations.len(),
    };
    write_json(&cfg.out_dir.join("rollout.json"), &result)?;
    Ok(result)
}

pub fn execute_rollout(args: RolloutArgs) -> Result<Report> {
    let cfg: RolloutConfig = resolve(RolloutConfig::default(), args.config.as_deref(), &args)?;
    let result = run_rollout(&cfg)?;
    Report::new("rollout-figure", &cfg, None, &result)?.input(&cfg.wavcoch)?.input(&cfg.lm)?.input(&cfg.wav)
}
