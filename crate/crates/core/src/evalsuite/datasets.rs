//! Labelled-span datasets and word-pair similarity sets.
//!
//! A span dataset is a manifest CSV with columns `wav,speaker,sentence,split`
//! and an optional `labels` column. Each utterance's spans live in a TSV of
//! `start_sample, end_sample, label` rows (an optional header line is
//! skipped); without a `labels` column the TSV sits next to the WAV with the
//! extension swapped to `.tsv`. Relative paths resolve against the manifest's
//! directory.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSpan {
    pub start: u64,
    pub end: u64,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(CoreError::Invalid(format!("unknown split {other:?} (train|dev|test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Phoneme,
    Word,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub wav: PathBuf,
    pub speaker: String,
    pub sentence: String,
    pub split: Split,
    pub spans: Vec<LabeledSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSpanDataset {
    pub utterances: Vec<Utterance>,
    pub label_kind: LabelKind,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    wav: String,
    speaker: String,
    sentence: String,
    split: String,
    #[serde(default)]
    labels: Option<String>,
}

pub fn read_spans_tsv(path: &Path) -> Result<Vec<LabeledSpan>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut spans = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(CoreError::format(path, format!("line {}: expected 3 tab-separated columns", n + 1)));
        }
        let (Ok(start), Ok(end)) = (cols[0].trim().parse::<u64>(), cols[1].trim().parse::<u64>()) else {
            if n == 0 {
                continue;
            }
            return Err(CoreError::format(path, format!("line {}: sample indices must be integers", n + 1)));
        };
        if start >= end {
            return Err(CoreError::format(path, format!("line {}: empty span [{start}, {end})", n + 1)));
        }
        spans.push(LabeledSpan { start, end, label: cols[2].trim().to_string() });
    }
    Ok(spans)
}

pub fn write_spans_tsv(path: &Path, spans: &[LabeledSpan]) -> Result<()> {
    let mut out = String::from("start_sample\tend_sample\tlabel\n");
    for s in spans {
        out.push_str(&format!("{}\t{}\t{}\n", s.start, s.end, s.label));
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl LabeledSpanDataset {
    pub fn load(manifest: &Path, label_kind: LabelKind) -> Result<Self> {
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut reader = csv::Reader::from_path(manifest)?;
        let mut utterances = Vec::new();
        for row in reader.deserialize() {
            let row: ManifestRow = row?;
            let wav = resolve(base, &row.wav);
            let labels = match &row.labels {
                Some(l) if !l.is_empty() => resolve(base, l),
                _ => wav.with_extension("tsv"),
            };
            utterances.push(Utterance {
                spans: read_spans_tsv(&labels)?,
                wav,
                speaker: row.speaker,
                sentence: row.sentence,
                split: row.split.parse()?,
            });
        }
        let ds = Self { utterances, label_kind };
        ds.validate()?;
        Ok(ds)
    }

    /// Train and test must share no speaker and no sentence.
    pub fn validate(&self) -> Result<()> {
        for split in [Split::Train, Split::Test] {
            if self.split(split).next().is_none() {
                return Err(CoreError::Empty(format!("no {split} utterances in dataset")));
            }
        }
        let ids = |s: Split, f: fn(&Utterance) -> &str| -> BTreeSet<String> {
            self.split(s).map(|u| f(u).to_string()).collect()
        };
        let shared_spk: Vec<_> =
            ids(Split::Train, |u| &u.speaker).intersection(&ids(Split::Test, |u| &u.speaker)).cloned().collect();
        let shared_sent: Vec<_> =
            ids(Split::Train, |u| &u.sentence).intersection(&ids(Split::Test, |u| &u.sentence)).cloned().collect();
        if !shared_spk.is_empty() || !shared_sent.is_empty() {
            return Err(CoreError::Invalid(format!(
                "train and test overlap: speakers {shared_spk:?}, sentences {shared_sent:?}"
            )));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordPair {
    pub word_a: String,
    pub word_b: String,
    pub score: f64,
    pub wav_a: PathBuf,
    pub wav_b: PathBuf,
    pub subset: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRow {
    word_a: String,
    word_b: String,
    score: f64,
    wav_a: String,
    wav_b: String,
    #[serde(default)]
    subset: Option<String>,
}

/// Word pairs with human similarity scores in `[0, 10]`.
pub fn load_word_pairs(path: &Path) -> Result<Vec<WordPair>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    let mut pairs = Vec::new();
    for row in reader.deserialize() {
        let r: PairRow = row?;
        if !(0.0..=10.0).contains(&r.score) {
            return Err(CoreError::Invalid(format!("score {} for ({}, {}) outside [0, 10]", r.score, r.word_a, r.word_b)));
        }
        pairs.push(WordPair {
            word_a: r.word_a,
            word_b: r.word_b,
            score: r.score,
            wav_a: resolve(base, &r.wav_a),
            wav_b: resolve(base, &r.wav_b),
            subset: r.subset.unwrap_or_else(|| "natural".into()),
        });
    }
    if pairs.len() < 2 {
        return Err(CoreError::UndefinedCorrelation(format!("{} word pairs; need at least 2", pairs.len())));
    }
    Ok(pairs)
}

pub fn write_word_pairs(path: &Path, pairs: &[WordPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["word_a", "word_b", "score", "wav_a", "wav_b", "subset"])?;
    for p in pairs {
        w.write_record([
            p.word_a.as_str(),
            p.word_b.as_str(),
            &p.score.to_string(),
            &p.wav_a.to_string_lossy(),
            &p.wav_b.to_string_lossy(),
            p.subset.as_str(),
        ])?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}
