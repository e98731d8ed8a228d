//! Synthetic audio: tones, chirps, and a labelled corpus of formant-like
//! "phoneme" segments spoken by synthetic speakers.
//!
//! Each phoneme class is additive synthesis under a fixed spectral envelope:
//! voiced classes sum harmonics of the speaker's pitch, unvoiced classes sum
//! densely spaced random-phase partials. Speakers shift pitch and scale the
//! envelope slightly, so class identity is stable across speakers.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{save_wav, Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::evalsuite::{write_spans_tsv, write_word_pairs, LabeledSpan, Split, WordPair};
use crate::{CoreError, Result};

pub fn tone(hz: f64, amplitude: f64, n: usize) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let samples = (0..n).map(|i| (amplitude * (2.0 * PI * hz * i as f64 / sr).sin()) as f32).collect();
    Waveform { samples, sample_rate: SAMPLE_RATE }
}

/// Linear chirp from `f0` to `f1` Hz over `n` samples.
pub fn chirp(f0: f64, f1: f64, amplitude: f64, n: usize) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let dur = n as f64 / sr;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            (amplitude * (2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).sin()) as f32
        })
        .collect();
    Waveform { samples, sample_rate: SAMPLE_RATE }
}

pub fn white_noise(amplitude: f64, n: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n).map(|_| (amplitude * rng.random_range(-1.0..1.0)) as f32).collect();
    Waveform { samples, sample_rate: SAMPLE_RATE }
}

/// A phoneme-like class: a sum of Gaussian spectral peaks `(centre Hz, width Hz, gain)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeClass {
    pub label: &'static str,
    pub voiced: bool,
    pub peaks: &'static [(f64, f64, f64)],
}

impl PhonemeClass {
    fn envelope(&self, hz: f64, scale: f64) -> f64 {
        self.peaks
            .iter()
            .map(|&(c, w, g)| g * (-((hz - c * scale) / w).powi(2)).exp())
            .sum()
    }
}

/// The synthetic inventory; labels are TIMIT symbols so the standard folding applies.
pub fn phoneme_inventory() -> Vec<PhonemeClass> {
    vec![
        PhonemeClass { label: "aa", voiced: true, peaks: &[(730.0, 120.0, 1.0), (1090.0, 150.0, 0.6), (2440.0, 200.0, 0.2)] },
        PhonemeClass { label: "iy", voiced: true, peaks: &[(270.0, 80.0, 1.0), (2290.0, 200.0, 0.5), (3010.0, 250.0, 0.3)] },
        PhonemeClass { label: "uw", voiced: true, peaks: &[(300.0, 80.0, 1.0), (870.0, 120.0, 0.5), (2240.0, 200.0, 0.1)] },
        PhonemeClass { label: "ae", voiced: true, peaks: &[(660.0, 120.0, 1.0), (1720.0, 180.0, 0.6), (2410.0, 200.0, 0.3)] },
        PhonemeClass { label: "m", voiced: true, peaks: &[(250.0, 60.0, 1.0), (1100.0, 300.0, 0.08)] },
        PhonemeClass { label: "s", voiced: false, peaks: &[(6000.0, 1000.0, 0.6), (4800.0, 600.0, 0.3)] },
        PhonemeClass { label: "sh", voiced: false, peaks: &[(2800.0, 500.0, 0.6), (4000.0, 700.0, 0.3)] },
        PhonemeClass { label: "f", voiced: false, peaks: &[(1500.0, 2500.0, 0.15), (5000.0, 2500.0, 0.15)] },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Speaker {
    pub f0: f64,
    pub formant_scale: f64,
}

/// Renders `(class index, duration in samples)` segments with 5 ms cross-fades.
/// Returns the waveform and one span per segment.
pub fn render_segments(segments: &[(usize, usize)], speaker: Speaker, amplitude: f64, seed: u64) -> (Vec<f32>, Vec<LabeledSpan>) {
    let inventory = phoneme_inventory();
    let sr = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = segments.iter().map(|s| s.1).sum();
    let mut out = vec![0.0f64; total];
    let mut spans = Vec::with_capacity(segments.len());
    let ramp = (0.005 * sr) as usize;
    let mut start: usize = 0;
    for &(class, dur) in segments {
        let ph = &inventory[class];
        let partials: Vec<(f64, f64, f64)> = if ph.voiced {
            let f0 = speaker.f0 * (1.0 + rng.random_range(-0.03..0.03));
            (1..)
                .map(|k| k as f64 * f0)
                .take_while(|&f| f < 7800.0)
                .map(|f| (f, ph.envelope(f, speaker.formant_scale), rng.random_range(0.0..2.0 * PI)))
                .collect()
        } else {
            (0..160)
                .map(|_| {
                    let f = rng.random_range(100.0..7900.0);
                    (f, 0.6 * ph.envelope(f, speaker.formant_scale), rng.random_range(0.0..2.0 * PI))
                })
                .collect()
        };
        let norm = partials.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt().max(1e-9);
        // Segments overlap their neighbours by one ramp on each side.
        let lo = start.saturating_sub(ramp);
        let hi = (start + dur + ramp).min(total);
        for (i, o) in out[lo..hi].iter_mut().enumerate() {
            let n = lo + i;
            let t = n as f64 / sr;
            let fade_in = ((n + ramp) as f64 - start as f64) / (2 * ramp) as f64;
            let fade_out = ((start + dur + ramp) as f64 - n as f64) / (2 * ramp) as f64;
            let gain = fade_in.clamp(0.0, 1.0).min(fade_out.clamp(0.0, 1.0));
            let s: f64 = partials.iter().map(|&(f, a, ph0)| a * (2.0 * PI * f * t + ph0).sin()).sum();
            *o += gain * amplitude * s / norm;
        }
        spans.push(LabeledSpan { start: start as u64, end: (start + dur) as u64, label: ph.label.to_string() });
        start += dur;
    }
    (out.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(), spans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub train_sentences: usize,
    pub test_sentences: usize,
    /// Utterances generated per (speaker, sentence) combination is 1; this caps
    /// the total per split (0 = all combinations).
    #[serde(default)]
    pub max_utterances_per_split: usize,
    pub min_segment_ms: f64,
    pub max_segment_ms: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub word_pairs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_speakers: 4,
            test_speakers: 2,
            train_sentences: 4,
            test_sentences: 2,
            max_utterances_per_split: 0,
            min_segment_ms: 60.0,
            max_segment_ms: 160.0,
            amplitude: 0.3,
            word_pairs: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker: String,
    pub sentence: String,
    pub split: Split,
    pub wave: Waveform,
    pub spans: Vec<LabeledSpan>,
}

fn sentence_segments(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n_classes: usize) -> Vec<(usize, f64)> {
    // Durations are fractions of the range so each speaker keeps the sentence's rhythm.
    let mut segs = Vec::new();
    let mut covered = 0.0;
    let mut prev = usize::MAX;
    while covered < CLIP_SAMPLES as f64 {
        let mut c = rng.random_range(0..n_classes);
        if c == prev {
            c = (c + 1) % n_classes;
        }
        prev = c;
        let frac = rng.random_range(0.0..1.0);
        let ms = cfg.min_segment_ms + frac * (cfg.max_segment_ms - cfg.min_segment_ms);
        covered += ms * SAMPLE_RATE as f64 / 1000.0;
        segs.push((c, ms));
    }
    segs
}

fn speaker_of(rng: &mut ChaCha8Rng) -> Speaker {
    Speaker { f0: rng.random_range(90.0..220.0), formant_scale: rng.random_range(0.92..1.08) }
}

fn to_samples(segs: &[(usize, f64)], total: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(segs.len());
    let mut used = 0;
    for &(c, ms) in segs {
        if used >= total {
            break;
        }
        let n = ((ms * SAMPLE_RATE as f64 / 1000.0).round() as usize).min(total - used).max(1);
        out.push((c, n));
        used += n;
    }
    out
}

/// Utterances of disjoint train/test speakers and sentences, each one 5 s clip.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<SynthUtterance>> {
    if cfg.train_speakers == 0 || cfg.test_speakers == 0 || cfg.train_sentences == 0 || cfg.test_sentences == 0 {
        return Err(CoreError::Invalid("every split needs at least one speaker and one sentence".into()));
    }
    if !(cfg.min_segment_ms > 0.0 && cfg.max_segment_ms >= cfg.min_segment_ms) {
        return Err(CoreError::Invalid("segment durations must satisfy 0 < min <= max".into()));
    }
    let n_classes = phoneme_inventory().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for (split, n_spk, n_sent) in [
        (Split::Train, cfg.train_speakers, cfg.train_sentences),
        (Split::Test, cfg.test_speakers, cfg.test_sentences),
    ] {
        let speakers: Vec<Speaker> = (0..n_spk).map(|_| speaker_of(&mut rng)).collect();
        let sentences: Vec<Vec<(usize, f64)>> = (0..n_sent).map(|_| sentence_segments(&mut rng, cfg, n_classes)).collect();
        let mut count = 0;
        'outer: for (si, spk) in speakers.iter().enumerate() {
            for (ti, sent) in sentences.iter().enumerate() {
                if cfg.max_utterances_per_split > 0 && count >= cfg.max_utterances_per_split {
                    break 'outer;
                }
                let segs = to_samples(sent, CLIP_SAMPLES);
                let seed = rng.random::<u64>();
                let (samples, spans) = render_segments(&segs, *spk, cfg.amplitude, seed);
                out.push(SynthUtterance {
                    id: format!("{split}_spk{si}_sent{ti}"),
                    speaker: format!("{split}_spk{si}"),
                    sentence: format!("{split}_sent{ti}"),
                    split,
                    wave: Waveform { samples, sample_rate: SAMPLE_RATE },
                    spans,
                });
                count += 1;
            }
        }
    }
    Ok(out)
}

/// Short "words": fixed class sequences. Similar words share prefixes.
pub fn synth_words() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("maa", vec![4, 0]),
        ("maas", vec![4, 0, 5]),
        ("miy", vec![4, 1]),
        ("miys", vec![4, 1, 5]),
        ("suw", vec![5, 2]),
        ("suwm", vec![5, 2, 4]),
        ("shae", vec![6, 3]),
        ("shaef", vec![6, 3, 7]),
        ("fiy", vec![7, 1]),
        ("faa", vec![7, 0]),
    ]
}

fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Human-like similarity in `[0, 10]`: shared structure scores high.
pub fn word_similarity(a: &[usize], b: &[usize]) -> f64 {
    let d = edit_distance(a, b) as f64;
    10.0 * (1.0 - d / a.len().max(b.len()) as f64)
}

/// Paths written by [`write_synth_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthCorpusFiles {
    pub root: PathBuf,
    pub wav_dir: PathBuf,
    pub manifest: PathBuf,
    pub word_pairs: Option<PathBuf>,
    pub utterances: usize,
}

/// Writes `wav/<id>.wav` + `wav/<id>.tsv`, `manifest.csv`, and (optionally)
/// `words/*.wav` with `word_pairs.csv`.
pub fn write_synth_corpus(dir: &Path, cfg: &SynthConfig) -> Result<SynthCorpusFiles> {
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| CoreError::io(&wav_dir, e))?;
    let utts = synth_corpus(cfg)?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["wav", "speaker", "sentence", "split"])?;
    for u in &utts {
        let wav = wav_dir.join(format!("{}.wav", u.id));
        save_wav(&wav, &u.wave)?;
        write_spans_tsv(&wav.with_extension("tsv"), &u.spans)?;
        w.write_record([format!("wav/{}.wav", u.id), u.speaker.clone(), u.sentence.clone(), u.split.to_string()])?;
    }
    w.flush().map_err(|e| CoreError::io(&manifest, e))?;

    let word_pairs = if cfg.word_pairs > 0 {
        let words_dir = dir.join("words");
        std::fs::create_dir_all(&words_dir).map_err(|e| CoreError::io(&words_dir, e))?;
        let words = synth_words();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let spk = speaker_of(&mut rng);
        for (name, seq) in &words {
            let segs: Vec<(usize, usize)> = seq.iter().map(|&c| (c, 2400)).collect();
            let (mut samples, _) = render_segments(&segs, spk, cfg.amplitude, rng.random());
            // Pad to at least one analysis window.
            samples.resize(samples.len().max(1600), 0.0);
            save_wav(&words_dir.join(format!("{name}.wav")), &Waveform { samples, sample_rate: SAMPLE_RATE })?;
        }
        let mut all: Vec<(usize, usize)> = (0..words.len()).flat_map(|i| (i + 1..words.len()).map(move |j| (i, j))).collect();
        all.shuffle(&mut rng);
        let pairs: Vec<WordPair> = all
            .into_iter()
            .take(cfg.word_pairs)
            .map(|(i, j)| {
                let (a, b) = (&words[i], &words[j]);
                WordPair {
                    word_a: a.0.into(),
                    word_b: b.0.into(),
                    score: word_similarity(&a.1, &b.1),
                    wav_a: PathBuf::from(format!("words/{}.wav", a.0)),
                    wav_b: PathBuf::from(format!("words/{}.wav", b.0)),
                    subset: "synthetic".into(),
                }
            })
            .collect();
        let path = dir.join("word_pairs.csv");
        write_word_pairs(&path, &pairs)?;
        Some(path)
    } else {
        None
    };
    Ok(SynthCorpusFiles { root: dir.to_path_buf(), wav_dir, manifest, word_pairs, utterances: utts.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_disjoint_and_fully_labelled() {
        let cfg = SynthConfig { train_speakers: 2, test_speakers: 1, train_sentences: 2, test_sentences: 1, ..Default::default() };
        let utts = synth_corpus(&cfg).unwrap();
        assert_eq!(utts.len(), 5);
        for u in &utts {
            assert_eq!(u.wave.len(), CLIP_SAMPLES);
            assert!(u.wave.samples.iter().all(|s| s.abs() <= 1.0));
            assert_eq!(u.spans.first().unwrap().start, 0);
            assert_eq!(u.spans.last().unwrap().end, CLIP_SAMPLES as u64);
            assert!(u.spans.windows(2).all(|w| w[0].end == w[1].start));
            assert!(u.wave.rms() > 0.01);
        }
        let again = synth_corpus(&cfg).unwrap();
        assert_eq!(utts, again);
    }

    #[test]
    fn similarity_scale() {
        assert_eq!(word_similarity(&[1, 2], &[1, 2]), 10.0);
        assert_eq!(word_similarity(&[1, 2], &[3, 4]), 0.0);
        assert!((word_similarity(&[4, 0], &[4, 0, 5]) - 10.0 * (2.0 / 3.0)).abs() < 1e-12);
    }
}
