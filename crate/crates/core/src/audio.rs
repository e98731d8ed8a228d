//! Waveform I/O, resampling to 16 kHz, and 5-second clip framing.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SAMPLES: usize = 80_000;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(CoreError::Invalid("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / self.len() as f64).sqrt()
    }

    /// Copy with every sample clamped to `[-1, 1]`.
    pub fn clamped(&self) -> Self {
        Self { samples: self.samples.iter().map(|x| x.clamp(-1.0, 1.0)).collect(), sample_rate: self.sample_rate }
    }
}

/// Reads a RIFF/WAVE file (PCM16 or 32-bit float, one or two channels) as mono.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |e: hound::Error| CoreError::Wav { path: path.to_path_buf(), message: e.to_string() };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(CoreError::UnsupportedFormat(format!("{}: {channels} channels", path.display())));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav_err)?
        }
        (fmt, bits) => {
            return Err(CoreError::UnsupportedFormat(format!(
                "{}: {bits}-bit {fmt:?} samples (need PCM16 or float32)",
                path.display()
            )))
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|f| (f[0] + f[1]) * 0.5).collect()
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes canonical 16-bit little-endian PCM mono.
pub fn save_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| CoreError::Wav { path: path.to_path_buf(), message: e.to_string() };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &x in &w.samples {
        let v = (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

const SINC_ZERO_CROSSINGS: usize = 24;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Windowed-sinc polyphase resampling to 16 kHz. A 16 kHz input is returned unchanged.
pub fn resample_to_16k(w: &Waveform) -> Result<Waveform> {
    resample(w, SAMPLE_RATE)
}

pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.sample_rate < 8000 {
        return Err(CoreError::Invalid(format!(
            "sample rate {} Hz is below 8000 Hz and would alias the speech band",
            w.sample_rate
        )));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let (src, dst) = (w.sample_rate as u64, target_rate as u64);
    let g = gcd(src, dst);
    let (up, down) = (dst / g, src / g);
    // Cutoff relative to the input Nyquist; narrowed slightly to leave a transition band.
    let cutoff = (dst as f64 / src as f64).min(1.0) * 0.94;
    let half = (SINC_ZERO_CROSSINGS as f64 / cutoff).ceil() as i64;
    let taps = (2 * half) as usize;

    // phase p in [0, up): output sample position n*down/up has fractional part p/up.
    let mut table = vec![0.0f64; up as usize * taps];
    for p in 0..up as usize {
        let frac = p as f64 / up as f64;
        let row = &mut table[p * taps..(p + 1) * taps];
        for (j, h) in row.iter_mut().enumerate() {
            // tap j sits at input offset (j - half + 1) relative to floor(position)
            let x = (j as i64 - half + 1) as f64 - frac;
            let arg = x * cutoff;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            let win_pos = x / (half as f64);
            let window = if win_pos.abs() >= 1.0 { 0.0 } else { 0.5 + 0.5 * (PI * win_pos).cos() };
            *h = cutoff * sinc * window;
        }
    }

    let n_in = w.samples.len() as u64;
    let n_out = (n_in * up).div_ceil(down) as usize;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let phase = (pos % up) as usize;
        let row = &table[phase * taps..(phase + 1) * taps];
        let (mut acc, mut norm) = (0.0f64, 0.0f64);
        for (j, &h) in row.iter().enumerate() {
            let idx = base + j as i64 - half + 1;
            if idx >= 0 && (idx as u64) < n_in {
                acc += h * w.samples[idx as usize] as f64;
                norm += h;
            }
        }
        // Renormalizing by the in-range tap mass keeps DC exact at the edges too.
        out.push(if norm.abs() > 1e-9 { (acc / norm) as f32 } else { 0.0 });
    }
    Waveform::new(out, target_rate)
}

/// What to do with a trailing partial clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartialClip {
    #[default]
    Pad,
    Drop,
}

/// Splits into consecutive non-overlapping clips of `clip_samples`.
pub fn frame_clips(w: &Waveform, clip_samples: usize, policy: PartialClip) -> Result<Vec<Waveform>> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(CoreError::Invalid(format!("framing expects 16 kHz audio, got {} Hz", w.sample_rate)));
    }
    if clip_samples == 0 {
        return Err(CoreError::Invalid("clip length must be positive".into()));
    }
    let mut clips = Vec::new();
    for chunk in w.samples.chunks(clip_samples) {
        if chunk.len() == clip_samples {
            clips.push(Waveform { samples: chunk.to_vec(), sample_rate: SAMPLE_RATE });
        } else if policy == PartialClip::Pad {
            let mut samples = chunk.to_vec();
            samples.resize(clip_samples, 0.0);
            clips.push(Waveform { samples, sample_rate: SAMPLE_RATE });
        }
    }
    Ok(clips)
}

/// Zero-pads or truncates to exactly `n` samples.
pub fn fit_length(w: &Waveform, n: usize) -> Waveform {
    let mut samples = w.samples.clone();
    samples.resize(n, 0.0);
    Waveform { samples, sample_rate: w.sample_rate }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, n: usize, amp: f64) -> Waveform {
        let s = (0..n).map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32).collect();
        Waveform::new(s, rate).unwrap()
    }

    #[test]
    fn identity_at_16k() {
        let w = sine(440.0, 16_000, 1234, 0.3);
        assert_eq!(resample_to_16k(&w).unwrap(), w);
    }

    #[test]
    fn rejects_low_rates() {
        let w = Waveform::new(vec![0.0; 100], 4000).unwrap();
        assert!(resample_to_16k(&w).is_err());
    }

    #[test]
    fn downsampled_sine_matches_analytic() {
        let w = sine(1000.0, 48_000, 48_000, 0.5);
        let r = resample_to_16k(&w).unwrap();
        assert_eq!(r.sample_rate, 16_000);
        assert_eq!(r.len(), 16_000);
        let reference: Vec<f64> =
            (0..r.len()).map(|i| 0.5 * (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin()).collect();
        let got: Vec<f64> = r.samples.iter().map(|&x| x as f64).collect();
        let r_corr = crate::evalsuite::pearson(&got, &reference).unwrap();
        assert!(r_corr > 0.999, "{r_corr}");
    }

    #[test]
    fn dc_is_preserved() {
        for rate in [8000, 22_050, 44_100, 48_000] {
            let w = Waveform::new(vec![0.5; rate as usize / 2], rate).unwrap();
            let r = resample_to_16k(&w).unwrap();
            assert!(r.samples.iter().all(|&x| (x - 0.5).abs() < 1e-3), "rate {rate}");
        }
    }

    #[test]
    fn band_limited_energy_is_preserved() {
        for rate in [22_050, 44_100, 48_000] {
            let mut w = sine(700.0, rate, rate as usize, 0.4);
            let other = sine(3100.0, rate, rate as usize, 0.2);
            for (a, b) in w.samples.iter_mut().zip(&other.samples) {
                *a += b;
            }
            let r = resample_to_16k(&w).unwrap();
            let p_in = w.rms().powi(2);
            let p_out = r.rms().powi(2);
            assert!(((p_out - p_in) / p_in).abs() < 0.01, "rate {rate}: {p_in} vs {p_out}");
        }
    }

    #[test]
    fn framing_policies() {
        let mk = |n| Waveform::new(vec![0.1; n], 16_000).unwrap();
        assert_eq!(frame_clips(&mk(80_000), CLIP_SAMPLES, PartialClip::Pad).unwrap().len(), 1);
        let clips = frame_clips(&mk(100_000), CLIP_SAMPLES, PartialClip::Pad).unwrap();
        assert_eq!(clips.len(), 2);
        assert!(clips.iter().all(|c| c.len() == CLIP_SAMPLES));
        assert!(clips[1].samples[20_000..].iter().all(|&x| x == 0.0));
        assert_eq!(clips[1].samples[20_000..].len(), 60_000);
        assert!(frame_clips(&mk(79_999), CLIP_SAMPLES, PartialClip::Drop).unwrap().is_empty());
        assert!(frame_clips(&Waveform::new(vec![], 16_000).unwrap(), CLIP_SAMPLES, PartialClip::Pad)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn wav_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = sine(300.0, 16_000, 4000, 0.9);
        save_wav(&path, &w).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        let worst = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst <= 1.0 / 32768.0);

        let spec = hound::WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let stereo = dir.path().join("s.wav");
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        for v in [16384i16, 16384, 6554, 13107] {
            wr.write_sample(v).unwrap();
        }
        wr.finalize().unwrap();
        let m = load_wav(&stereo).unwrap();
        assert_eq!(m.samples[0], 0.5);
        assert!((m.samples[1] - 0.3).abs() < 1e-4);
    }

    #[test]
    fn rejects_unsupported_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"RIFF....not a wave").unwrap();
        assert!(matches!(load_wav(&bad), Err(CoreError::Wav { .. })));

        let spec = hound::WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 24, sample_format: hound::SampleFormat::Int };
        let p = dir.path().join("24.wav");
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        wr.write_sample(5i32).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(CoreError::UnsupportedFormat(_))));
    }
}
