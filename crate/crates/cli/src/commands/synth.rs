use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use cochstream_core::synth::{write_synth_corpus, SynthConfig, SynthCorpusFiles};
use serde::{Deserialize, Serialize};

use crate::config::{default_schema_version, require, resolve, SCHEMA_VERSION};
use crate::Report;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCorpusConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub max_utterances_per_split: usize,
    pub min_segment_ms: f64,
    pub max_segment_ms: f64,
    pub amplitude: f64,
    pub word_pairs: usize,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            out_dir: PathBuf::new(),
            seed: d.seed,
            train_speakers: d.train_speakers,
            test_speakers: d.test_speakers,
            train_sentences: d.train_sentences,
            test_sentences: d.test_sentences,
            max_utterances_per_split: d.max_utterances_per_split,
            min_segment_ms: d.min_segment_ms,
            max_segment_ms: d.max_segment_ms,
            amplitude: d.amplitude,
            word_pairs: d.word_pairs,
        }
    }
}

impl SynthCorpusConfig {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            train_speakers: self.train_speakers,
            test_speakers: self.test_speakers,
            train_sentences: self.train_sentences,
            test_sentences: self.test_sentences,
            max_utterances_per_split: self.max_utterances_per_split,
            min_segment_ms: self.min_segment_ms,
            max_segment_ms: self.max_segment_ms,
            amplitude: self.amplitude,
            word_pairs: self.word_pairs,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthCorpusArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long = "out")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_speakers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_speakers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub word_pairs: Option<usize>,
}

pub fn run(cfg: &SynthCorpusConfig) -> Result<SynthCorpusFiles> {
    require(&cfg.out_dir, "out_dir")?;
    Ok(write_synth_corpus(&cfg.out_dir, &cfg.synth_config())?)
}

pub fn execute(args: SynthCorpusArgs) -> Result<Report> {
    let cfg: SynthCorpusConfig = resolve(SynthCorpusConfig::default(), args.config.as_deref(), &args)?;
    let result = run(&cfg)?;
    Report::new("synth-corpus", &cfg, Some(cfg.seed), &result)
}
