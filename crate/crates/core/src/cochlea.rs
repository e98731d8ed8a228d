//! Fixed signal frontends: the framed DFT that feeds the tokenizer encoder, the
//! cochleagram target, and the mel-spectrogram alternative target.
//!
//! All three share one framing: a 1001-sample Hann window every 80 samples
//! (200 frames/s at 16 kHz), so a 5 s clip yields 988 frames. Column `t` only
//! sees samples `[80 t, 80 t + 1001)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use cochstream_numerics::{Array, FrameSpec, FramedDft, Scalar, SpectrumMode, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::{CoreError, Result};

pub const WINDOW_SAMPLES: usize = 1001;
pub const HOP_SAMPLES: usize = 80;
pub const FRAME_RATE_HZ: u32 = 200;
pub const FRAMES_PER_CLIP: usize = 988;
pub const COCHLEAR_CHANNELS: usize = 211;
pub const MEL_BINS: usize = 80;
pub const SPECTRAL_BINS: usize = WINDOW_SAMPLES / 2 + 1;
pub const COMPRESSION_EXPONENT: f64 = 0.3;
pub const LOW_HZ: f64 = 50.0;
pub const HIGH_HZ: f64 = 8000.0;
/// Half-width of each half-cosine filter, in channel spacings.
pub const FILTER_HALF_WIDTH_SPACINGS: f64 = 4.0;

pub fn frame_spec(mode: SpectrumMode) -> FrameSpec {
    FrameSpec::new(WINDOW_SAMPLES, HOP_SAMPLES, mode)
}

/// Number of frames for `n` samples: `floor((n - 1001) / 80) + 1`.
pub fn n_frames(n_samples: usize) -> Option<usize> {
    frame_spec(SpectrumMode::Magnitude).n_frames(n_samples)
}

/// Which representation a decoder is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    #[default]
    Cochleagram,
    Mel,
}

impl TargetKind {
    pub fn rows(self) -> usize {
        match self {
            TargetKind::Cochleagram => COCHLEAR_CHANNELS,
            TargetKind::Mel => MEL_BINS,
        }
    }
}

/// Row-major `rows x cols` time-frequency matrix (rows = channels, cols = frames).
#[derive(Debug, Clone, PartialEq)]
pub struct TfMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

pub type Cochleagram = TfMatrix;
pub type MelSpectrogram = TfMatrix;

impl TfMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(CoreError::Invalid(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, values.len())));
        }
        Ok(Self { rows, cols, values })
    }

    /// From a time-major `[frames, channels]` buffer.
    pub fn from_time_major(frames: usize, channels: usize, data: &[f32]) -> Result<Self> {
        if frames * channels != data.len() {
            return Err(CoreError::Invalid("time-major buffer has the wrong length".into()));
        }
        let mut values = vec![0.0; data.len()];
        for t in 0..frames {
            for c in 0..channels {
                values[c * frames + t] = data[t * channels + c];
            }
        }
        Ok(Self { rows: channels, cols: frames, values })
    }

    /// Time-major `[frames, channels]` copy.
    pub fn to_time_major(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.values.len()];
        for c in 0..self.rows {
            for t in 0..self.cols {
                out[t * self.rows + c] = self.values[c * self.cols + t];
            }
        }
        out
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let cols = end - start;
        let mut values = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            values.extend_from_slice(&self.row(r)[start..end]);
        }
        Self { rows: self.rows, cols, values }
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(CoreError::Invalid(format!(
                "shape {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let s: f64 = self.values.iter().zip(&other.values).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        Ok(s / self.values.len() as f64)
    }
}

/// Magnitude (or complex) DFT frames, time-major `[frames, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrames {
    pub frames: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub mode: SpectrumMode,
}

/// Glasberg & Moore ERB-number of a frequency.
pub fn erb_number(hz: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * hz).log10()
}

pub fn erb_number_to_hz(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

/// 211 centre frequencies, evenly spaced on the ERB-number scale from 50 Hz to 8 kHz.
pub fn cochlear_center_freqs() -> Vec<f64> {
    let (lo, hi) = (erb_number(LOW_HZ), erb_number(HIGH_HZ));
    let step = (hi - lo) / (COCHLEAR_CHANNELS - 1) as f64;
    (0..COCHLEAR_CHANNELS).map(|c| erb_number_to_hz(lo + step * c as f64)).collect()
}

/// Half-cosine response of channel `c` at frequency `hz`.
pub fn cochlear_filter_response(channel: usize, hz: f64) -> f64 {
    let (lo, hi) = (erb_number(LOW_HZ), erb_number(HIGH_HZ));
    let spacing = (hi - lo) / (COCHLEAR_CHANNELS - 1) as f64;
    let center = lo + spacing * channel as f64;
    let half_width = FILTER_HALF_WIDTH_SPACINGS * spacing;
    let d = (erb_number(hz) - center) / half_width;
    if d.abs() < 1.0 {
        (std::f64::consts::FRAC_PI_2 * d).cos()
    } else {
        0.0
    }
}

fn bin_hz(f: usize) -> f64 {
    f as f64 * SAMPLE_RATE as f64 / WINDOW_SAMPLES as f64
}

/// `[SPECTRAL_BINS, 211]` filter weights.
fn cochlear_weights() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        let mut w = vec![0.0; SPECTRAL_BINS * COCHLEAR_CHANNELS];
        for f in 0..SPECTRAL_BINS {
            for c in 0..COCHLEAR_CHANNELS {
                w[f * COCHLEAR_CHANNELS + c] = cochlear_filter_response(c, bin_hz(f));
            }
        }
        w
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Mel-band edges: `MEL_BINS + 2` points evenly spaced in mel from 0 Hz to 8 kHz.
pub fn mel_band_edges() -> Vec<f64> {
    let top = hz_to_mel(HIGH_HZ);
    (0..MEL_BINS + 2).map(|i| mel_to_hz(top * i as f64 / (MEL_BINS + 1) as f64)).collect()
}

/// Triangular response of mel band `m` at `hz`.
pub fn mel_filter_response(m: usize, hz: f64) -> f64 {
    let e = mel_band_edges();
    let (lo, mid, hi) = (e[m], e[m + 1], e[m + 2]);
    if hz <= lo || hz >= hi {
        0.0
    } else if hz <= mid {
        (hz - lo) / (mid - lo)
    } else {
        (hi - hz) / (hi - mid)
    }
}

fn mel_weights() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        let mut w = vec![0.0; SPECTRAL_BINS * MEL_BINS];
        for f in 0..SPECTRAL_BINS {
            for m in 0..MEL_BINS {
                w[f * MEL_BINS + m] = mel_filter_response(m, bin_hz(f));
            }
        }
        w
    })
}

/// Differentiable cochleagram pipeline for one scalar type.
pub struct CochleaGraph<T: Scalar> {
    dft: Arc<FramedDft<T>>,
    weights: Array<T>,
}

impl<T: Scalar> CochleaGraph<T> {
    pub fn new() -> Result<Self> {
        Ok(Self {
            dft: Arc::new(FramedDft::new(frame_spec(SpectrumMode::Magnitude))?),
            weights: Array::new(
                &[SPECTRAL_BINS, COCHLEAR_CHANNELS],
                cochlear_weights().iter().map(|&w| T::of(w)).collect(),
            )?,
        })
    }

    /// `wave[n] -> cochleagram [frames, 211]` (time-major) on `tape`.
    pub fn apply(&self, tape: &mut Tape<T>, wave: Var) -> Result<Var> {
        let mag = tape.spectrum(wave, self.dft.clone())?;
        let w = tape.constant(self.weights.clone());
        let env = tape.matmul(mag, w)?;
        Ok(tape.pow(env, T::of(COMPRESSION_EXPONENT)))
    }
}

fn shared_graph() -> &'static CochleaGraph<f32> {
    static G: OnceLock<CochleaGraph<f32>> = OnceLock::new();
    G.get_or_init(|| CochleaGraph::new().expect("static frame spec is valid"))
}

fn require_clip(w: &Waveform) -> Result<()> {
    if w.sample_rate != SAMPLE_RATE || w.len() != CLIP_SAMPLES {
        return Err(CoreError::Invalid(format!(
            "expected a {CLIP_SAMPLES}-sample clip at {SAMPLE_RATE} Hz, got {} samples at {} Hz",
            w.len(),
            w.sample_rate
        )));
    }
    Ok(())
}

/// Hann-windowed DFT frames of a 5 s clip: `988 x 501` magnitudes (or `988 x 1002`
/// interleaved real/imaginary parts).
pub fn dft_frontend(w: &Waveform, mode: SpectrumMode) -> Result<SpectralFrames> {
    require_clip(w)?;
    spectral_frames_any(w, mode)
}

/// As [`dft_frontend`] for any signal of at least one window.
pub fn spectral_frames_any(w: &Waveform, mode: SpectrumMode) -> Result<SpectralFrames> {
    let dft = FramedDft::<f32>::new(frame_spec(mode))?;
    let (values, _) = dft.forward(&w.samples)?;
    let cols = dft.spec().out_cols();
    Ok(SpectralFrames { frames: values.len() / cols, cols, values, mode })
}

/// 211-channel cochleagram of a 5 s clip (211 x 988).
pub fn cochleagram(w: &Waveform) -> Result<Cochleagram> {
    require_clip(w)?;
    cochleagram_any(w)
}

/// Cochleagram of any signal of at least one window.
pub fn cochleagram_any(w: &Waveform) -> Result<Cochleagram> {
    let mut tape = Tape::<f32>::new();
    let n = w.samples.len();
    let wave = tape.constant(Array::new(&[n], w.samples.clone())?);
    let c = shared_graph().apply(&mut tape, wave)?;
    let frames = tape.shape(c)[0];
    TfMatrix::from_time_major(frames, COCHLEAR_CHANNELS, tape.value(c).data())
}

/// 80-band log1p mel spectrogram of a 5 s clip (80 x 988).
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    require_clip(w)?;
    let frames = spectral_frames_any(w, SpectrumMode::Magnitude)?;
    let weights = mel_weights();
    let mut out = vec![0.0f32; frames.frames * MEL_BINS];
    for t in 0..frames.frames {
        let row = &frames.values[t * SPECTRAL_BINS..(t + 1) * SPECTRAL_BINS];
        for (f, &mag) in row.iter().enumerate() {
            if mag == 0.0 {
                continue;
            }
            let wf = &weights[f * MEL_BINS..(f + 1) * MEL_BINS];
            for (o, &wm) in out[t * MEL_BINS..(t + 1) * MEL_BINS].iter_mut().zip(wf) {
                *o += (wm * mag as f64) as f32;
            }
        }
    }
    for v in out.iter_mut() {
        *v = v.ln_1p();
    }
    TfMatrix::from_time_major(frames.frames, MEL_BINS, &out)
}

/// Target representation of a clip.
pub fn target_of(w: &Waveform, kind: TargetKind) -> Result<TfMatrix> {
    match kind {
        TargetKind::Cochleagram => cochleagram(w),
        TargetKind::Mel => mel_spectrogram(w),
    }
}

/// 8-bit binary PGM: low channels at the bottom, min-max normalized. A constant
/// matrix renders as all-black.
pub fn render_pgm(m: &TfMatrix, path: &Path) -> Result<()> {
    let pixels = pgm_pixels(m, |x| x);
    write_pgm(path, m.cols, m.rows, &pixels)
}

/// Maps values through `transform`, min-max normalizes, flips vertically.
pub fn pgm_pixels(m: &TfMatrix, transform: impl Fn(f64) -> f64) -> Vec<u8> {
    let vals: Vec<f64> = m.values.iter().map(|&v| transform(v as f64)).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut pixels = Vec::with_capacity(vals.len());
    for r in (0..m.rows).rev() {
        for c in 0..m.cols {
            let v = vals[r * m.cols + c];
            let p = if range > 0.0 { ((v - lo) / range * 255.0).round() } else { 0.0 };
            pixels.push(p as u8);
        }
    }
    pixels
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n").map_err(|e| CoreError::io(path, e))?;
    w.write_all(pixels).map_err(|e| CoreError::io(path, e))?;
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Reads a binary PGM written by [`write_pgm`]: `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(CoreError::format(path, "not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| CoreError::format(path, "bad PGM header"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| CoreError::format(path, "truncated PGM data"))?;
    Ok((w, h, pixels.to_vec()))
}

const CGRM_MAGIC: &[u8; 4] = b"CGRM";
const CGRM_VERSION: u16 = 1;

/// `"CGRM"`, u16 version, u32 rows, u32 cols, then row-major f32, all little-endian.
pub fn write_cgrm(path: &Path, m: &TfMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(14 + 4 * m.values.len());
    buf.extend_from_slice(CGRM_MAGIC);
    buf.extend_from_slice(&CGRM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| CoreError::io(path, e))?;
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_cgrm(path: &Path) -> Result<TfMatrix> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() < 14 || &bytes[..4] != CGRM_MAGIC {
        return Err(CoreError::format(path, "missing CGRM magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CGRM_VERSION {
        return Err(CoreError::format(path, format!("unsupported CGRM version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = &bytes[14..];
    if body.len() != rows * cols * 4 {
        return Err(CoreError::format(path, format!("expected {} data bytes, found {}", rows * cols * 4, body.len())));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    TfMatrix::new(rows, cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(hz: f64, amp: f64) -> Waveform {
        let s = (0..CLIP_SAMPLES).map(|i| (amp * (2.0 * PI * hz * i as f64 / 16_000.0).sin()) as f32).collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn center_freqs_span_range() {
        let cf = cochlear_center_freqs();
        assert_eq!(cf.len(), 211);
        assert!((cf[0] - 50.0).abs() < 1e-9);
        assert!((cf[210] - 8000.0).abs() < 1e-6);
        assert!(cf.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn every_channel_sees_some_bin() {
        let w = cochlear_weights();
        for c in 0..COCHLEAR_CHANNELS {
            let total: f64 = (0..SPECTRAL_BINS).map(|f| w[f * COCHLEAR_CHANNELS + c]).sum();
            assert!(total > 0.1, "channel {c}");
        }
    }

    #[test]
    fn shapes_for_one_clip() {
        let w = tone(440.0, 0.3);
        let f = dft_frontend(&w, SpectrumMode::Magnitude).unwrap();
        assert_eq!((f.frames, f.cols), (988, 501));
        let fc = dft_frontend(&w, SpectrumMode::Complex).unwrap();
        assert_eq!((fc.frames, fc.cols), (988, 1002));
        let c = cochleagram(&w).unwrap();
        assert_eq!((c.rows, c.cols), (211, 988));
        let m = mel_spectrogram(&w).unwrap();
        assert_eq!((m.rows, m.cols), (80, 988));
    }

    #[test]
    fn wrong_length_is_rejected() {
        let w = Waveform::new(vec![0.0; 79_999], SAMPLE_RATE).unwrap();
        assert!(dft_frontend(&w, SpectrumMode::Magnitude).is_err());
        assert!(cochleagram(&w).is_err());
        assert!(mel_spectrogram(&w).is_err());
    }

    #[test]
    fn silence_maps_to_zero() {
        let w = Waveform::new(vec![0.0; CLIP_SAMPLES], SAMPLE_RATE).unwrap();
        assert!(dft_frontend(&w, SpectrumMode::Magnitude).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(cochleagram(&w).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(mel_spectrogram(&w).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gain_never_decreases_cochleagram() {
        let w = tone(700.0, 0.2);
        let mut louder = w.clone();
        for s in louder.samples.iter_mut() {
            *s *= 1.5;
        }
        let (a, b) = (cochleagram(&w).unwrap(), cochleagram(&louder).unwrap());
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| y >= x));
    }

    #[test]
    fn cgrm_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.cgrm");
        let m = TfMatrix::new(2, 3, vec![0.0, 1.5, -2.0, 3.25, 4.0, 1e-7]).unwrap();
        write_cgrm(&p, &m).unwrap();
        assert_eq!(read_cgrm(&p).unwrap(), m);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CGRM");
        assert_eq!(bytes.len(), 14 + 6 * 4);
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(read_cgrm(&p).is_err());
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let constant = TfMatrix::new(3, 4, vec![2.0; 12]).unwrap();
        render_pgm(&constant, &p).unwrap();
        let (w, h, px) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert!(px.iter().all(|&x| x == px[0]));

        // row 0 (lowest channel) is drawn at the bottom
        let ramp = TfMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        render_pgm(&ramp, &p).unwrap();
        let (_, _, px) = read_pgm(&p).unwrap();
        assert_eq!(px, vec![255, 0]);
    }
}
