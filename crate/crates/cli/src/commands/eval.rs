use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use cochstream_core::auristream::AuriStream;
use cochstream_core::evalsuite::{
    accuracies, cosine_distance, load_word_pairs, render_confusion_pgm, select_layer_pooling, span_to_tokens,
    ssimi_score, train_linear_probe, write_confusion_csv, Accuracies, GridCell, LabelKind, Pooling, ProbeConfig,
    Split, Standardizer, Utterance,
};
use cochstream_core::wavcoch::WavCoch;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{display, ensure_dir, fit_dev_split, load_labeled, tokenize_utterance, tokenize_wav, write_json};
use super::{LabelFolding, LabelMapper};
use crate::config::{default_schema_version, require, resolve, SCHEMA_VERSION};
use crate::Report;

/// Span embeddings of a set of utterances for every (layer, pooling) cell.
pub struct EmbeddedSet {
    /// `[layer][pooling]` -> row-major `n x d`.
    pub features: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<String>,
    /// Spans too short to cover a frame start.
    pub skipped: usize,
}

pub fn embed_utterances(
    wavcoch: &WavCoch<f32>,
    lm: &AuriStream<f32>,
    utts: &[Utterance],
    labels: &LabelMapper,
    layers: &[usize],
    poolings: &[Pooling],
) -> Result<EmbeddedSet> {
    let per = utts
        .par_iter()
        .map(|u| -> Result<(Vec<Vec<Vec<Vec<f32>>>>, Vec<String>, usize)> {
            let t = tokenize_utterance(wavcoch, u, labels)?;
            let mut spans = Vec::new();
            let mut names = Vec::new();
            for s in &t.spans {
                if let Some(iv) = span_to_tokens(s, t.tokens.offset, t.tokens.len()) {
                    spans.push(iv);
                    names.push(s.label.clone());
                }
            }
            let skipped = t.spans.len() - spans.len();
            let emb = lm.extract_embeddings_multi(&t.tokens.ids, &spans, layers, poolings)?;
            Ok((emb, names, skipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut features = vec![vec![Vec::new(); poolings.len()]; layers.len()];
    let mut all_labels = Vec::new();
    let mut skipped = 0;
    for (emb, names, sk) in per {
        for (li, by_pool) in emb.into_iter().enumerate() {
            for (pi, rows) in by_pool.into_iter().enumerate() {
                features[li][pi].extend(rows.into_iter().flatten().map(f64::from));
            }
        }
        all_labels.extend(names);
        skipped += sk;
    }
    Ok(EmbeddedSet { features, labels: all_labels, skipped })
}

/// A fitted probe's predictions and true class indices on an evaluation set.
pub struct ProbeRun {
    pub classes: Vec<String>,
    pub preds: Vec<usize>,
    pub truth: Vec<usize>,
    pub majority_accuracy: f64,
    pub excluded: usize,
}

/// Standardizes on `fit`, trains a probe over `keep` classes (all fit classes
/// when `None`), and predicts the `eval` rows whose label is one of them.
pub fn probe_cell(
    fit: (&[f64], &[String]),
    eval: (&[f64], &[String]),
    dim: usize,
    keep: Option<&BTreeSet<String>>,
    probe: &ProbeConfig,
) -> Result<ProbeRun> {
    let allowed = |l: &String| keep.is_none_or(|k| k.contains(l));
    let classes: Vec<String> =
        fit.1.iter().filter(|l| allowed(l)).cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let select = |x: &[f64], ls: &[String]| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (row, l) in x.chunks(dim).zip(ls) {
            if let Some(&i) = index.get(l.as_str()) {
                xs.extend_from_slice(row);
                ys.push(i);
            }
        }
        (xs, ys)
    };
    let (fx, fy) = select(fit.0, fit.1);
    let (ex, ey) = select(eval.0, eval.1);
    if ey.is_empty() {
        bail!("no evaluation spans carry a class seen in training");
    }
    let std = Standardizer::fit(&fx, dim)?;
    let model = train_linear_probe(&std.apply(&fx), &fy, classes.len(), probe)?;
    let preds = model.predict(&std.apply(&ex));
    let mut counts = vec![0usize; classes.len()];
    for &y in &fy {
        counts[y] += 1;
    }
    let majority = counts.iter().enumerate().fold(0, |b, (i, &c)| if c > counts[b] { i } else { b });
    let majority_accuracy = ey.iter().filter(|&&y| y == majority).count() as f64 / ey.len() as f64;
    Ok(ProbeRun { classes, preds, truth: ey, majority_accuracy, excluded: eval.1.len() - ex.len() / dim })
}

fn top_classes(labels: &[String], k: usize) -> BTreeSet<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().take(k).map(|(l, _)| l.to_string()).collect()
}

fn grid(n_layers: usize, layers: &Option<Vec<usize>>, poolings: &[Pooling]) -> Result<(Vec<usize>, Vec<Pooling>)> {
    let layers = layers.clone().unwrap_or_else(|| (0..=n_layers).collect());
    if layers.is_empty() || poolings.is_empty() {
        bail!("empty layer/pooling grid");
    }
    if let Some(l) = layers.iter().find(|&&l| l > n_layers) {
        bail!("layer {l} > {n_layers} model layers");
    }
    Ok((layers, poolings.to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeCmdConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub wavcoch: PathBuf,
    pub lm: PathBuf,
    pub manifest: PathBuf,
    pub label_kind: LabelKind,
    pub folding: LabelFolding,
    /// Candidate layers (default: every level 0..=n_layers).
    pub layers: Option<Vec<usize>>,
    pub poolings: Vec<Pooling>,
    /// Model selection uses only the most frequent classes.
    pub selection_top_classes: usize,
    pub l2_strength: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Confusion matrix CSV/PGM and probe report go here when set.
    pub out_dir: Option<PathBuf>,
}

impl Default for ProbeCmdConfig {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            wavcoch: PathBuf::new(),
            lm: PathBuf::new(),
            manifest: PathBuf::new(),
            label_kind: LabelKind::Phoneme,
            folding: LabelFolding::None,
            layers: None,
            poolings: Pooling::ALL.to_vec(),
            selection_top_classes: 10,
            l2_strength: 0.1,
            max_iters: p.max_iters,
            tol: p.tol,
            out_dir: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wavcoch: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folding: Option<LabelFolding>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub layer: usize,
    pub pooling: Pooling,
    pub dev_score: f64,
    pub grid: Vec<GridCell>,
    pub dev_source: String,
    pub test: Accuracies,
    pub majority_baseline: f64,
    pub classes: Vec<String>,
    pub n_fit: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub test_excluded: usize,
    pub spans_skipped: usize,
    /// Features are z-scored per dimension with statistics of the fit set.
    pub standardized: bool,
    pub confusion_csv: Option<String>,
}

pub fn run_probe(cfg: &ProbeCmdConfig) -> Result<ProbeResult> {
    require(&cfg.wavcoch, "wavcoch")?;
    require(&cfg.lm, "lm")?;
    require(&cfg.manifest, "manifest")?;
    let wavcoch = WavCoch::<f32>::load(&cfg.wavcoch)?;
    let lm = AuriStream::<f32>::load(&cfg.lm)?;
    let ds = load_labeled(&cfg.manifest, cfg.label_kind)?;
    let (layers, poolings) = grid(lm.config.n_layers, &cfg.layers, &cfg.poolings)?;
    let (fit_u, dev_u, dev_source) = fit_dev_split(&ds)?;
    let test_u: Vec<Utterance> = ds.split(Split::Test).cloned().collect();
    let labels = LabelMapper::new(cfg.folding);
    let probe = ProbeConfig { l2_strength: cfg.l2_strength, max_iters: cfg.max_iters, tol: cfg.tol };
    let d = lm.config.d_model;

    let fit = embed_utterances(&wavcoch, &lm, &fit_u, &labels, &layers, &poolings)?;
    let dev = embed_utterances(&wavcoch, &lm, &dev_u, &labels, &layers, &poolings)?;
    let test = embed_utterances(&wavcoch, &lm, &test_u, &labels, &layers, &poolings)?;

    let keep = top_classes(&fit.labels, cfg.selection_top_classes.max(1));
    let cells: Vec<(usize, usize)> =
        (0..layers.len()).flat_map(|li| (0..poolings.len()).map(move |pi| (li, pi))).collect();
    let scores: BTreeMap<(usize, Pooling), f64> = cells
        .par_iter()
        .map(|&(li, pi)| -> Result<((usize, Pooling), f64)> {
            let run = probe_cell(
                (&fit.features[li][pi], &fit.labels),
                (&dev.features[li][pi], &dev.labels),
                d,
                Some(&keep),
                &probe,
            )?;
            Ok(((layers[li], poolings[pi]), accuracies(&run.preds, &run.truth)?.weighted))
        })
        .collect::<Result<_>>()?;
    let candidates: Vec<(usize, Pooling)> = scores.keys().copied().collect();
    let sel = select_layer_pooling(&candidates, |l, p| Ok(scores[&(l, p)]))?;

    let li = layers.iter().position(|&l| l == sel.layer).expect("selected layer is a candidate");
    let pi = poolings.iter().position(|&p| p == sel.pooling).expect("selected pooling is a candidate");
    let run = probe_cell((&fit.features[li][pi], &fit.labels), (&test.features[li][pi], &test.labels), d, None, &probe)?;
    let acc = accuracies(&run.preds, &run.truth)?;

    let confusion_csv = match &cfg.out_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            let m = cochstream_core::evalsuite::confusion_matrix(&run.preds, &run.truth, run.classes.len())?;
            let csv = dir.join("confusion.csv");
            write_confusion_csv(&m, &run.classes, &csv)?;
            render_confusion_pgm(&m, &dir.join("confusion.pgm"))?;
            Some(display(&csv))
        }
        None => None,
    };
    let result = ProbeResult {
        layer: sel.layer,
        pooling: sel.pooling,
        dev_score: sel.score,
        grid: sel.grid,
        dev_source: dev_source.into(),
        test: acc,
        majority_baseline: run.majority_accuracy,
        classes: run.classes,
        n_fit: fit.labels.len(),
        n_dev: dev.labels.len(),
        n_test: test.labels.len(),
        test_excluded: run.excluded,
        spans_skipped: fit.skipped + dev.skipped + test.skipped,
        standardized: true,
        confusion_csv,
    };
    if let Some(dir) = &cfg.out_dir {
        write_json(&dir.join("probe.json"), &result)?;
    }
    Ok(result)
}

pub fn execute_probe(args: ProbeArgs) -> Result<Report> {
    let cfg: ProbeCmdConfig = resolve(ProbeCmdConfig::default(), args.config.as_deref(), &args)?;
    let result = run_probe(&cfg)?;
    Report::new("probe", &cfg, None, &result)?.input(&cfg.wavcoch)?.input(&cfg.lm)?.input(&cfg.manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimiCmdConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub wavcoch: PathBuf,
    pub lm: PathBuf,
    /// Word-pair CSV (word_a, word_b, score, wav_a, wav_b, subset).
    pub pairs: PathBuf,
    pub layers: Option<Vec<usize>>,
    pub poolings: Vec<Pooling>,
    /// Pairs with this subset tag select the layer/pooling and are excluded
    /// from the reported scores.
    pub dev_subset: String,
}

impl Default for SsimiCmdConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            wavcoch: PathBuf::new(),
            lm: PathBuf::new(),
            pairs: PathBuf::new(),
            layers: None,
            poolings: Pooling::ALL.to_vec(),
            dev_subset: "dev".into(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SsimiArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wavcoch: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SsimiResult {
    pub layer: usize,
    pub pooling: Pooling,
    pub grid: Vec<GridCell>,
    /// `dev subset` or, when no pair carries the dev tag, `all pairs`.
    pub selection_set: String,
    pub ssimi: f64,
    pub by_subset: BTreeMap<String, f64>,
    pub pairs: usize,
}

pub fn run_ssimi(cfg: &SsimiCmdConfig) -> Result<SsimiResult> {
    require(&cfg.wavcoch, "wavcoch")?;
    require(&cfg.lm, "lm")?;
    require(&cfg.pairs, "pairs")?;
    let wavcoch = WavCoch::<f32>::load(&cfg.wavcoch)?;
    let lm = AuriStream::<f32>::load(&cfg.lm)?;
    let pairs = load_word_pairs(&cfg.pairs)?;
    let (layers, poolings) = grid(lm.config.n_layers, &cfg.layers, &cfg.poolings)?;

    let wavs: Vec<PathBuf> =
        pairs.iter().flat_map(|p| [p.wav_a.clone(), p.wav_b.clone()]).collect::<BTreeSet<_>>().into_iter().collect();
    let embedded: BTreeMap<PathBuf, Vec<Vec<Vec<f32>>>> = wavs
        .par_iter()
        .map(|w| -> Result<(PathBuf, Vec<Vec<Vec<f32>>>)> {
            let t = tokenize_wav(&wavcoch, w)?;
            let e = lm.extract_embeddings_multi(&t.ids, &[(0, t.len())], &layers, &poolings)?;
            Ok((w.clone(), e.into_iter().map(|by_pool| by_pool.into_iter().map(|mut v| v.remove(0)).collect()).collect()))
        })
        .collect::<Result<_>>()?;
    let score = |idx: &[usize], li: usize, pi: usize| -> Result<f64> {
        let mut dist = Vec::with_capacity(idx.len());
        let mut human = Vec::with_capacity(idx.len());
        for &i in idx {
            let p = &pairs[i];
            dist.push(cosine_distance(&embedded[&p.wav_a][li][pi], &embedded[&p.wav_b][li][pi])?);
            human.push(p.score);
        }
        Ok(ssimi_score(&dist, &human)?)
    };
    let dev: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].subset == cfg.dev_subset).collect();
    let (select_on, report_on, selection_set) = if dev.len() >= 2 {
        let rest: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].subset != cfg.dev_subset).collect();
        (dev, rest, "dev subset")
    } else {
        let all: Vec<usize> = (0..pairs.len()).collect();
        (all.clone(), all, "all pairs")
    };
    let candidates: Vec<(usize, Pooling)> = layers.iter().flat_map(|&l| poolings.iter().map(move |&p| (l, p))).collect();
    let mut dev_scores = BTreeMap::new();
    for (li, &l) in layers.iter().enumerate() {
        for (pi, &p) in poolings.iter().enumerate() {
            dev_scores.insert((l, p), score(&select_on, li, pi)?);
        }
    }
    let sel = select_layer_pooling(&candidates, |l, p| Ok(dev_scores[&(l, p)]))?;
    let li = layers.iter().position(|&x| x == sel.layer).expect("selected layer");
    let pi = poolings.iter().position(|&x| x == sel.pooling).expect("selected pooling");
    let ssimi = score(&report_on, li, pi)?;
    let mut by_subset = BTreeMap::new();
    let subsets: BTreeSet<&str> = report_on.iter().map(|&i| pairs[i].subset.as_str()).collect();
    for s in subsets {
        let idx: Vec<usize> = report_on.iter().copied().filter(|&i| pairs[i].subset == s).collect();
        if idx.len() >= 2 {
            if let Ok(v) = score(&idx, li, pi) {
                by_subset.insert(s.to_string(), v);
            }
        }
    }
    Ok(SsimiResult {
        layer: sel.layer,
        pooling: sel.pooling,
        grid: sel.grid,
        selection_set: selection_set.into(),
        ssimi,
        by_subset,
        pairs: report_on.len(),
    })
}

pub fn execute_ssimi(args: SsimiArgs) -> Result<Report> {
    let cfg: SsimiCmdConfig = resolve(SsimiCmdConfig::default(), args.config.as_deref(), &args)?;
    let result = run_ssimi(&cfg)?;
    Report::new("ssimi", &cfg, None, &result)?.input(&cfg.wavcoch)?.input(&cfg.lm)?.input(&cfg.pairs)
}
