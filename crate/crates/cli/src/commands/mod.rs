//! Subcommand implementations. Each module exposes a serde config with
//! defaults, a clap argument struct whose set flags override config keys, a
//! `run` function, and `execute` which wraps `run` in a [`crate::Report`].

pub mod eval;
pub mod invert;
pub mod lm;
pub mod synth;
pub mod tokenize;
pub mod wavcoch;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cochstream_core::audio::{self, SAMPLE_RATE};
use cochstream_core::evalsuite::{LabelKind, LabeledSpan, LabeledSpanDataset, PhonemeFolding, Split, Utterance};
use cochstream_core::wavcoch::{CochlearTokenSeq, WavCoch};
use serde::{Deserialize, Serialize};

/// Loads a WAV, resamples to 16 kHz and tokenizes the whole signal.
pub fn tokenize_wav(model: &WavCoch<f32>, path: &Path) -> Result<CochlearTokenSeq> {
    let w = audio::resample_to_16k(&audio::load_wav(path)?)?;
    let mut seq = model.tokenize_any(&w).with_context(|| format!("tokenizing {}", path.display()))?;
    seq.source = Some(path.display().to_string());
    Ok(seq)
}

/// How span labels are mapped before evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LabelFolding {
    /// Labels are used verbatim.
    #[default]
    None,
    /// TIMIT 61 -> 39 folding; labels folded to nothing are excluded.
    Timit39,
}

pub struct LabelMapper {
    folding: Option<PhonemeFolding>,
}

impl LabelMapper {
    pub fn new(kind: LabelFolding) -> Self {
        Self { folding: (kind == LabelFolding::Timit39).then(PhonemeFolding::timit39) }
    }

    pub fn map(&self, label: &str) -> Result<Option<String>> {
        Ok(match &self.folding {
            None => Some(label.to_string()),
            Some(f) => f.collapse(label)?.map(str::to_string),
        })
    }
}

/// An utterance tokenized whole, with spans rescaled to 16 kHz samples and
/// labels mapped (spans whose label maps to nothing are dropped).
pub struct TokenizedUtterance {
    pub utterance: Utterance,
    pub tokens: CochlearTokenSeq,
    pub spans: Vec<LabeledSpan>,
}

pub fn tokenize_utterance(model: &WavCoch<f32>, u: &Utterance, labels: &LabelMapper) -> Result<TokenizedUtterance> {
    let raw = audio::load_wav(&u.wav)?;
    let scale = SAMPLE_RATE as f64 / raw.sample_rate as f64;
    let w = audio::resample_to_16k(&raw)?;
    let mut tokens = model.tokenize_any(&w).with_context(|| format!("tokenizing {}", u.wav.display()))?;
    tokens.source = Some(u.wav.display().to_string());
    let mut spans = Vec::with_capacity(u.spans.len());
    for s in &u.spans {
        if let Some(label) = labels.map(&s.label)? {
            let at = |x: u64| (x as f64 * scale).round() as u64;
            spans.push(LabeledSpan { start: at(s.start), end: at(s.end), label });
        }
    }
    Ok(TokenizedUtterance { utterance: u.clone(), tokens, spans })
}

pub fn load_labeled(manifest: &Path, kind: LabelKind) -> Result<LabeledSpanDataset> {
    let ds = LabeledSpanDataset::load(manifest, kind).with_context(|| format!("loading {}", manifest.display()))?;
    ds.validate()?;
    Ok(ds)
}

/// Train utterances split into (fit, dev): the dataset's `dev` split when it
/// has one. Otherwise the last quarter (at least one) of the distinct train
/// sentences is held out, so that selection, like the test split, sees unseen
/// sentences; with a single sentence, the last quarter of speakers; with a
/// single speaker too, every fourth utterance.
pub fn fit_dev_split(ds: &LabeledSpanDataset) -> Result<(Vec<Utterance>, Vec<Utterance>, &'static str)> {
    let train: Vec<Utterance> = ds.split(Split::Train).cloned().collect();
    let dev: Vec<Utterance> = ds.split(Split::Dev).cloned().collect();
    if !dev.is_empty() {
        return Ok((train, dev, "dev split"));
    }
    let hold_out = |key: fn(&Utterance) -> &str| -> Option<Vec<String>> {
        let mut keys: Vec<&str> = train.iter().map(key).collect();
        keys.sort();
        keys.dedup();
        (keys.len() >= 2).then(|| {
            let n = keys.len().div_ceil(4).max(1);
            keys[keys.len() - n..].iter().map(|k| k.to_string()).collect()
        })
    };
    let by = |held: Vec<String>, key: fn(&Utterance) -> &str| {
        let (dev, fit): (Vec<Utterance>, Vec<Utterance>) = train.iter().cloned().partition(|u| held.iter().any(|h| h == key(u)));
        (fit, dev)
    };
    if let Some(held) = hold_out(|u| u.sentence.as_str()) {
        let (fit, dev) = by(held, |u| u.sentence.as_str());
        return Ok((fit, dev, "held-out train sentences"));
    }
    if let Some(held) = hold_out(|u| u.speaker.as_str()) {
        let (fit, dev) = by(held, |u| u.speaker.as_str());
        return Ok((fit, dev, "held-out train speakers"));
    }
    if train.len() < 2 {
        bail!("need a dev split or at least two train utterances for model selection");
    }
    let (dev, fit): (Vec<_>, Vec<_>) = train.into_iter().enumerate().partition(|(i, _)| i % 4 == 3);
    Ok((fit.into_iter().map(|x| x.1).collect(), dev.into_iter().map(|x| x.1).collect(), "every fourth train utterance"))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn paths_display(ps: &[PathBuf]) -> Vec<String> {
    ps.iter().map(|p| display(p)).collect()
}
