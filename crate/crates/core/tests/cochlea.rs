use cochstream_core::audio::{Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use cochstream_core::cochlea::{self, CochleaGraph, COCHLEAR_CHANNELS, FRAMES_PER_CLIP, HOP_SAMPLES, WINDOW_SAMPLES};
use cochstream_core::synth::tone;
use cochstream_numerics::{grad_check, Array, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Channel whose centre is nearest `hz` on the Glasberg & Moore ERB-rate
/// scale, computed from scratch: 211 channels evenly spaced in ERB number
/// between 50 Hz and 8 kHz.
fn nearest_channel(hz: f64) -> usize {
    let erb = |f: f64| 21.4 * (1.0 + 0.00437 * f).log10();
    let (lo, hi) = (erb(50.0), erb(8000.0));
    let pos = (erb(hz) - lo) / (hi - lo) * 210.0;
    pos.round() as usize
}

fn column_argmax(c: &cochlea::Cochleagram, col: usize) -> usize {
    (0..c.rows).fold(0, |b, r| if c.get(r, col) > c.get(b, col) { r } else { b })
}

#[test]
fn pure_tones_peak_at_their_channel() {
    for hz in [150.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 6000.0] {
        let c = cochlea::cochleagram(&tone(hz, 0.5, CLIP_SAMPLES)).unwrap();
        assert_eq!((c.rows, c.cols), (COCHLEAR_CHANNELS, FRAMES_PER_CLIP));
        let want = nearest_channel(hz);
        for col in [0, 400, 987] {
            let got = column_argmax(&c, col);
            assert!(got.abs_diff(want) <= 2, "{hz} Hz: argmax channel {got}, expected about {want}");
        }
    }
}

#[test]
fn louder_tone_gives_larger_cochleagram() {
    let quiet = cochlea::cochleagram(&tone(800.0, 0.1, CLIP_SAMPLES)).unwrap();
    let loud = cochlea::cochleagram(&tone(800.0, 0.4, CLIP_SAMPLES)).unwrap();
    let ch = nearest_channel(800.0);
    // Power-law compression: a 4x amplitude gain scales the envelope by 4^0.3.
    let ratio = loud.get(ch, 500) as f64 / quiet.get(ch, 500) as f64;
    assert!((ratio - 4f64.powf(0.3)).abs() < 1e-3, "ratio {ratio}");
}

#[test]
fn columns_only_see_their_own_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 4000;
    let base: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let reference = cochlea::cochleagram_any(&Waveform::new(base.clone(), SAMPLE_RATE).unwrap()).unwrap();
    for _ in 0..100 {
        let s = rng.random_range(0..n);
        let mut x = base.clone();
        x[s] += 0.25;
        let c = cochlea::cochleagram_any(&Waveform::new(x, SAMPLE_RATE).unwrap()).unwrap();
        for t in 0..c.cols {
            let start = t * HOP_SAMPLES;
            let covers = s >= start && s < start + WINDOW_SAMPLES;
            let changed = (0..c.rows).any(|r| c.get(r, t) != reference.get(r, t));
            if !covers {
                assert!(!changed, "sample {s} changed column {t}");
            }
        }
        let first = s.saturating_sub(WINDOW_SAMPLES - 1).div_ceil(HOP_SAMPLES);
        if first * HOP_SAMPLES > s || first >= c.cols {
            continue;
        }
        assert!(
            (0..c.rows).any(|r| c.get(r, first) != reference.get(r, first)),
            "sample {s} did not affect column {first}"
        );
    }
}

#[test]
fn waveform_gradient_matches_finite_differences() {
    let graph = CochleaGraph::<f64>::new().unwrap();
    let n = WINDOW_SAMPLES + 2 * HOP_SAMPLES;
    // Broadband noise keeps every filter envelope well away from zero, where
    // the 0.3 power has an unbounded derivative.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let floor = cochlea::cochleagram_any(&Waveform::new(x.iter().map(|&v| v as f32).collect(), SAMPLE_RATE).unwrap())
        .unwrap()
        .values
        .iter()
        .fold(f32::INFINITY, |a, &b| a.min(b));
    assert!(floor > 0.1, "envelope floor {floor}");
    let weights: Vec<f64> = (0..3 * COCHLEAR_CHANNELS).map(|i| ((i * 31 % 11) as f64 - 5.0) / 5.0).collect();
    let f = |p: &[Array<f64>]| {
        let mut tape = Tape::new();
        let w = tape.param(p[0].clone());
        let c = graph.apply(&mut tape, w).map_err(|e| cochstream_numerics::NumericsError::Invalid(e.to_string()))?;
        let k = tape.constant(Array::new(&[3, COCHLEAR_CHANNELS], weights.clone())?);
        let prod = tape.mul(c, k)?;
        let loss = tape.sum(prod);
        let g = tape.backward(loss)?;
        Ok((tape.value(loss).item(), vec![g.get(w).unwrap().clone()]))
    };
    let point = [Array::new(&[n], x).unwrap()];
    // A 1e-4 step balances truncation error against round-off on the
    // near-zero gradients of samples under the window tails.
    let err = grad_check(f, &point, 1e-4).unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}
