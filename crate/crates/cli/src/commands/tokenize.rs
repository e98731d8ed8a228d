use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use cochstream_core::audio;
use cochstream_core::cochlea::{self, render_pgm, write_cgrm};
use cochstream_core::corpus::list_wavs;
use cochstream_core::params::sha256_file;
use cochstream_core::wavcoch::{write_ctok, WavCoch};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{display, ensure_dir, tokenize_wav};
use crate::config::{default_schema_version, require, resolve, SCHEMA_VERSION};
use crate::Report;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// WavCoch checkpoint manifest.
    pub checkpoint: PathBuf,
    /// A WAV file or a directory searched recursively.
    pub input: PathBuf,
    /// A `.ctok` file (file input) or a directory mirroring the input tree.
    pub output: PathBuf,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, checkpoint: PathBuf::new(), input: PathBuf::new(), output: PathBuf::new() }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizeArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long = "out")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenizedFile {
    pub input: String,
    pub output: String,
    pub tokens: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenizeResult {
    pub bit_width: u32,
    pub files: Vec<TokenizedFile>,
}

pub fn run(cfg: &TokenizeConfig) -> Result<TokenizeResult> {
    require(&cfg.checkpoint, "checkpoint")?;
    require(&cfg.input, "input")?;
    require(&cfg.output, "output")?;
    let model = WavCoch::<f32>::load(&cfg.checkpoint)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if cfg.input.is_dir() {
        list_wavs(&cfg.input)?
            .into_iter()
            .map(|w| {
                let rel = w.strip_prefix(&cfg.input).unwrap_or(&w).with_extension("ctok");
                let out = cfg.output.join(rel);
                (w, out)
            })
            .collect()
    } else {
        vec![(cfg.input.clone(), cfg.output.clone())]
    };
    if jobs.is_empty() {
        anyhow::bail!("no WAV files under {}", cfg.input.display());
    }
    let files = jobs
        .par_iter()
        .map(|(wav, out)| -> Result<TokenizedFile> {
            let seq = tokenize_wav(&model, wav)?;
            if let Some(parent) = out.parent() {
                ensure_dir(parent)?;
            }
            write_ctok(out, &seq)?;
            Ok(TokenizedFile { input: display(wav), output: display(out), tokens: seq.len(), sha256: sha256_file(out)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenizeResult { bit_width: model.config.bit_width, files })
}

pub fn execute(args: TokenizeArgs) -> Result<Report> {
    let cfg: TokenizeConfig = resolve(TokenizeConfig::default(), args.config.as_deref(), &args)?;
    let result = run(&cfg)?;
    Report::new("tokenize", &cfg, None, &result)?.input(&cfg.checkpoint)?.input(&cfg.input)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CochleagramConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub input: PathBuf,
    /// `.cgrm` output; a `.pgm` rendering is written next to it.
    pub output: PathBuf,
    /// Fit to exactly one 5 s clip (pad or truncate) before analysis.
    pub fit_clip: bool,
}

impl Default for CochleagramConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, input: PathBuf::new(), output: PathBuf::new(), fit_clip: true }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CochleagramArgs {
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
    pub fit_clip: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CochleagramResult {
    pub rows: usize,
    pub cols: usize,
    pub cgrm: String,
    pub pgm: String,
}

pub fn cochleagram_file(input: &Path, output: &Path, fit_clip: bool) -> Result<CochleagramResult> {
    let mut w = audio::resample_to_16k(&audio::load_wav(input)?)?;
    if fit_clip {
        w = audio::fit_length(&w, audio::CLIP_SAMPLES);
    }
    let c = cochlea::cochleagram_any(&w).with_context(|| format!("analysing {}", input.display()))?;
    if let Some(parent) = output.parent() {
        ensure_dir(parent)?;
    }
    write_cgrm(output, &c)?;
    let pgm = output.with_extension("pgm");
    render_pgm(&c, &pgm)?;
    Ok(CochleagramResult { rows: c.rows, cols: c.cols, cgrm: display(output), pgm: display(&pgm) })
}

pub fn execute_cochleagram(args: CochleagramArgs) -> Result<Report> {
    let cfg: CochleagramConfig = resolve(CochleagramConfig::default(), args.config.as_deref(), &args)?;
    require(&cfg.input, "input")?;
    require(&cfg.output, "output")?;
    let result = cochleagram_file(&cfg.input, &cfg.output, cfg.fit_clip)?;
    Report::new("cochleagram", &cfg, None, &result)?.input(&cfg.input)
}
