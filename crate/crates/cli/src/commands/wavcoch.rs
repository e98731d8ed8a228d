use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use cochstream_core::audio::{self, PartialClip, CLIP_SAMPLES};
use cochstream_core::cochlea::{self, TargetKind};
use cochstream_core::corpus::{clips_of_file, load_clips, Clip};
use cochstream_core::evalsuite::{align_frames, phoneme_purity, LabelKind, PurityReport, Split, Utterance};
use cochstream_core::wavcoch::train::{train_wavcoch, PreparedCorpus, TrainLogEntry, WavCochTrainConfig};
use cochstream_core::wavcoch::{vocab_size, InputMode, WavCoch, WavCochConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{display, ensure_dir, load_labeled, tokenize_utterance, write_json, LabelFolding, LabelMapper};
use crate::config::{default_schema_version, require, resolve, SCHEMA_VERSION};
use crate::Report;

/// Clips of a WAV directory, or of the train-split utterances when `corpus`
/// is a labeled-dataset manifest (`.csv`).
pub fn training_clips(corpus: &Path, partial: PartialClip) -> Result<Vec<Clip>> {
    if corpus.is_file() && corpus.extension().is_some_and(|e| e == "csv") {
        let ds = load_labeled(corpus, LabelKind::Phoneme)?;
        let root = corpus.parent().unwrap_or(Path::new("."));
        let mut clips = Vec::new();
        for u in ds.split(Split::Train) {
            clips.extend(clips_of_file(&u.wav, root, partial)?);
        }
        if clips.is_empty() {
            bail!("no train clips in {}", corpus.display());
        }
        Ok(clips)
    } else {
        Ok(load_clips(corpus, partial)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainWavCochConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// WAV directory or labeled manifest (train split is used).
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// `full`, `tiny` or `micro`.
    pub preset: String,
    pub bit_width: u32,
    pub target: TargetKind,
    pub input: InputMode,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub floor_lr: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub probe_clips: usize,
    pub partial: PartialClip,
    pub resume: Option<PathBuf>,
}

impl Default for TrainWavCochConfig {
    fn default() -> Self {
        let d = WavCochTrainConfig::desk();
        Self {
            schema_version: SCHEMA_VERSION,
            corpus: PathBuf::new(),
            out_dir: PathBuf::new(),
            preset: "tiny".into(),
            bit_width: d.model.bit_width,
            target: d.model.target,
            input: d.model.input,
            steps: d.steps,
            batch_size: d.batch_size,
            seed: d.seed,
            peak_lr: d.peak_lr,
            warmup_steps: d.warmup_steps,
            floor_lr: d.floor_lr,
            log_every: d.log_every,
            checkpoint_every: d.checkpoint_every,
            probe_clips: d.probe_clips,
            partial: PartialClip::Pad,
            resume: None,
        }
    }
}

impl TrainWavCochConfig {
    pub fn train_config(&self) -> Result<WavCochTrainConfig> {
        let model = WavCochConfig {
            bit_width: self.bit_width,
            target: self.target,
            input: self.input,
            ..WavCochConfig::preset(&self.preset)?
        };
        let cfg = WavCochTrainConfig {
            model,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            floor_lr: self.floor_lr,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            probe_clips: self.probe_clips,
            ..WavCochTrainConfig::desk()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainWavCochArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bit_width: Option<u32>,
    #[arg(long, value_parser = parse_target)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetKind>,
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

pub fn parse_target(s: &str) -> std::result::Result<TargetKind, String> {
    match s {
        "cochleagram" => Ok(TargetKind::Cochleagram),
        "mel" => Ok(TargetKind::Mel),
        other => Err(format!("unknown target {other:?} (cochleagram|mel)")),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainWavCochResult {
    pub checkpoint: String,
    pub params_sha256: String,
    pub order_hash: String,
    pub corpus_hash: String,
    pub clips: usize,
    pub first: Option<TrainLogEntry>,
    pub last: Option<TrainLogEntry>,
}

pub fn run_train(cfg: &TrainWavCochConfig) -> Result<TrainWavCochResult> {
    require(&cfg.corpus, "corpus")?;
    require(&cfg.out_dir, "out_dir")?;
    let tc = cfg.train_config()?;
    let clips = training_clips(&cfg.corpus, cfg.partial)?;
    let data = PreparedCorpus::prepare(&clips, &tc.model)?;
    let out = train_wavcoch(&tc, &data, Some(&cfg.out_dir), cfg.resume.as_deref())?;
    Ok(TrainWavCochResult {
        checkpoint: out.checkpoint.as_deref().map(display).unwrap_or_default(),
        params_sha256: out.params_sha256,
        order_hash: out.order_hash,
        corpus_hash: out.corpus_hash,
        clips: clips.len(),
        first: out.log.first().cloned(),
        last: out.log.last().cloned(),
    })
}

pub fn execute_train(args: TrainWavCochArgs) -> Result<Report> {
    let cfg: TrainWavCochConfig = resolve(TrainWavCochConfig::default(), args.config.as_deref(), &args)?;
    let result = run_train(&cfg)?;
    Report::new("train-wavcoch", &cfg, Some(cfg.seed), &result)?.input(&cfg.corpus)
}

/// Utterances of one split, or of every split for `"all"`.
pub fn select_split<'a>(utts: &'a [Utterance], split: &str) -> Result<Vec<&'a Utterance>> {
    if split == "all" {
        return Ok(utts.iter().collect());
    }
    let s: Split = split.parse()?;
    Ok(utts.iter().filter(|u| u.split == s).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenStats {
    pub purity: PurityReport,
    pub usage: usize,
    pub tokens: usize,
}

/// Purity over span-aligned frames and codebook usage over all frames.
pub fn token_stats(model: &WavCoch<f32>, utts: &[&Utterance], labels: &LabelMapper) -> Result<TokenStats> {
    let tokenized =
        utts.par_iter().map(|u| tokenize_utterance(model, u, labels)).collect::<Result<Vec<_>>>()?;
    let mut seen = vec![false; vocab_size(model.config.bit_width)? as usize];
    let mut pairs: Vec<(u32, &str)> = Vec::new();
    let mut tokens = 0;
    for t in &tokenized {
        tokens += t.tokens.len();
        for &id in &t.tokens.ids {
            seen[id as usize] = true;
        }
        let aligned = align_frames(t.tokens.len(), t.tokens.offset, &t.spans);
        pairs.extend(t.tokens.ids.iter().zip(aligned).filter_map(|(&id, l)| l.map(|l| (id, l))));
    }
    let purity = phoneme_purity(pairs)?;
    Ok(TokenStats { purity, usage: seen.iter().filter(|&&s| s).count(), tokens })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurityConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    /// `train`, `dev`, `test` or `all`.
    pub split: String,
    pub folding: LabelFolding,
    /// Optional per-token CSV (token, count, top_label, purity).
    pub out_csv: Option<PathBuf>,
}

impl Default for PurityConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            checkpoint: PathBuf::new(),
            manifest: PathBuf::new(),
            split: "all".into(),
            folding: LabelFolding::None,
            out_csv: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PurityArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folding: Option<LabelFolding>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PurityResult {
    pub mean_purity: f64,
    pub frames: u64,
    pub classes: usize,
    pub distinct_tokens: usize,
    pub usage: usize,
    pub vocab: u32,
    pub tokens: usize,
}

pub fn run_purity(cfg: &PurityConfig) -> Result<PurityResult> {
    require(&cfg.checkpoint, "checkpoint")?;
    require(&cfg.manifest, "manifest")?;
    let model = WavCoch::<f32>::load(&cfg.checkpoint)?;
    let ds = load_labeled(&cfg.manifest, LabelKind::Phoneme)?;
    let utts = select_split(&ds.utterances, &cfg.split)?;
    if utts.is_empty() {
        bail!("no utterances in split {:?}", cfg.split);
    }
    let stats = token_stats(&model, &utts, &LabelMapper::new(cfg.folding))?;
    if let Some(path) = &cfg.out_csv {
        let mut w = String::from("token,count,top_label,purity\n");
        for t in &stats.purity.per_token {
            w.push_str(&format!("{},{},{},{}\n", t.token, t.count, t.top_label, t.purity));
        }
        std::fs::write(path, w).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(PurityResult {
        mean_purity: stats.purity.mean,
        frames: stats.purity.frames,
        classes: stats.purity.classes,
        distinct_tokens: stats.purity.per_token.len(),
        usage: stats.usage,
        vocab: model.config.vocab(),
        tokens: stats.tokens,
    })
}

pub fn execute_purity(args: PurityArgs) -> Result<Report> {
    let cfg: PurityConfig = resolve(PurityConfig::default(), args.config.as_deref(), &args)?;
    let result = run_purity(&cfg)?;
    Report::new("purity", &cfg, None, &result)?.input(&cfg.checkpoint)?.input(&cfg.manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateVocabConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Labeled dataset manifest: train split trains, `eval_split` evaluates.
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub bit_widths: Vec<u32>,
    pub preset: String,
    pub target: TargetKind,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// `dev` falls back to `test` when the dataset has no dev split.
    pub eval_split: String,
    pub folding: LabelFolding,
}

impl Default for AblateVocabConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            manifest: PathBuf::new(),
            out_dir: PathBuf::new(),
            bit_widths: vec![12, 13, 14],
            preset: "tiny".into(),
            target: TargetKind::Cochleagram,
            steps: 1000,
            batch_size: 4,
            seed: 0,
            peak_lr: 2e-3,
            warmup_steps: 50,
            eval_split: "dev".into(),
            folding: LabelFolding::None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AblateVocabArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bit_widths: Option<Vec<u32>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[arg(long = "batch")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub bits: u32,
    pub vocab: u32,
    #[serde(rename = "L2")]
    pub l2: f64,
    pub usage: usize,
    pub purity: f64,
    pub order_hash: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub eval_split: String,
    pub identical_clip_order: bool,
    /// Per metric: `increasing`, `decreasing` or `mixed` with bit width.
    pub ordering: std::collections::BTreeMap<String, String>,
    pub table_csv: String,
    pub plot_data: String,
}

fn direction(v: &[f64]) -> String {
    let up = v.windows(2).all(|w| w[1] > w[0]);
    let down = v.windows(2).all(|w| w[1] < w[0]);
    match (up, down) {
        (true, false) => "increasing",
        (false, true) => "decreasing",
        _ => "mixed",
    }
    .into()
}

/// Mean reconstruction MSE over the 5 s clips of `utts`.
pub fn reconstruction_l2(model: &WavCoch<f32>, utts: &[&Utterance]) -> Result<f64> {
    let per: Vec<Vec<f64>> = utts
        .par_iter()
        .map(|u| -> Result<Vec<f64>> {
            let w = audio::resample_to_16k(&audio::load_wav(&u.wav)?)?;
            let mut out = Vec::new();
            for clip in audio::frame_clips(&w, CLIP_SAMPLES, PartialClip::Pad)? {
                let frames = cochlea::dft_frontend(&clip, model.config.input.spectrum_mode())?;
                let pred = model.reconstruct(&frames)?;
                let target = cochlea::target_of(&clip, model.config.target)?;
                out.push(pred.mse(&target)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let all: Vec<f64> = per.into_iter().flatten().collect();
    if all.is_empty() {
        bail!("no evaluation clips");
    }
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}

pub fn run_ablate(cfg: &AblateVocabConfig) -> Result<AblationResult> {
    if cfg.manifest.as_os_str().is_empty() || !cfg.manifest.is_file() {
        bail!("ablate-vocab needs a labeled dev corpus manifest for purity (got {:?})", cfg.manifest);
    }
    require(&cfg.out_dir, "out_dir")?;
    if cfg.bit_widths.is_empty() {
        bail!("bit_widths is empty");
    }
    ensure_dir(&cfg.out_dir)?;
    let ds = load_labeled(&cfg.manifest, LabelKind::Phoneme)?;
    let mut eval_split = cfg.eval_split.clone();
    let mut eval = select_split(&ds.utterances, &eval_split)?;
    if eval.is_empty() && eval_split == "dev" {
        eval_split = "test".into();
        eval = select_split(&ds.utterances, &eval_split)?;
    }
    if eval.is_empty() {
        bail!("no utterances in evaluation split {eval_split:?}");
    }
    let clips = training_clips(&cfg.manifest, PartialClip::Pad)?;
    let base = WavCochConfig { target: cfg.target, ..WavCochConfig::preset(&cfg.preset)? };
    let data = PreparedCorpus::prepare(&clips, &base)?;
    let labels = LabelMapper::new(cfg.folding);

    let rows = cfg
        .bit_widths
        .par_iter()
        .map(|&bits| -> Result<AblationRow> {
            let tc = WavCochTrainConfig {
                model: WavCochConfig { bit_width: bits, ..base.clone() },
                steps: cfg.steps,
                batch_size: cfg.batch_size,
                seed: cfg.seed,
                peak_lr: cfg.peak_lr,
                warmup_steps: cfg.warmup_steps,
                log_every: cfg.steps,
                ..WavCochTrainConfig::desk()
            };
            let dir = cfg.out_dir.join(format!("bits{bits}"));
            let out = train_wavcoch(&tc, &data, Some(&dir), None)?;
            let l2 = reconstruction_l2(&out.model, &eval)?;
            let stats = token_stats(&out.model, &eval, &labels)?;
            Ok(AblationRow {
                bits,
                vocab: vocab_size(bits)?,
                l2,
                usage: stats.usage,
                purity: stats.purity.mean,
                order_hash: out.order_hash,
                checkpoint: out.checkpoint.as_deref().map(display).unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let table = cfg.out_dir.join("ablation.csv");
    let mut csv = String::from("bits,vocab,L2,usage,purity\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.bits, r.vocab, r.l2, r.usage, r.purity));
    }
    std::fs::write(&table, csv).with_context(|| format!("writing {}", table.display()))?;
    let plot = cfg.out_dir.join("ablation_plot.dat");
    let mut dat = String::from(
        "# vocabulary ablation: left axis L2 (reconstruction MSE), right axis usage and purity\n# vocab\tL2\tusage\tpurity\n",
    );
    for r in &rows {
        dat.push_str(&format!("{}\t{}\t{}\t{}\n", r.vocab, r.l2, r.usage, r.purity));
    }
    std::fs::write(&plot, dat).with_context(|| format!("writing {}", plot.display()))?;

    let mut sorted = rows.clone();
    sorted.sort_by_key(|r| r.bits);
    let mut ordering = std::collections::BTreeMap::new();
    ordering.insert("L2".into(), direction(&sorted.iter().map(|r| r.l2).collect::<Vec<_>>()));
    ordering.insert("usage".into(), direction(&sorted.iter().map(|r| r.usage as f64).collect::<Vec<_>>()));
    ordering.insert("purity".into(), direction(&sorted.iter().map(|r| r.purity).collect::<Vec<_>>()));
    let result = AblationResult {
        identical_clip_order: rows.windows(2).all(|w| w[0].order_hash == w[1].order_hash),
        rows,
        eval_split,
        ordering,
        table_csv: display(&table),
        plot_data: display(&plot),
    };
    write_json(&cfg.out_dir.join("ablation.json"), &result)?;
    Ok(result)
}

pub fn execute_ablate(args: AblateVocabArgs) -> Result<Report> {
    let cfg: AblateVocabConfig = resolve(AblateVocabConfig::default(), args.config.as_deref(), &args)?;
    let result = run_ablate(&cfg)?;
    Report::new("ablate-vocab", &cfg, Some(cfg.seed), &result)?.input(&cfg.manifest)
}
