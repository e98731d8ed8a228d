//! Framed, Hann-tapered discrete Fourier transform with an exact adjoint.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::{NumericsError, Result, Scalar};

/// What a framed transform emits per nonnegative-frequency bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpectrumMode {
    /// `|X_f|`, one column per bin.
    Magnitude,
    /// `(Re X_f, Im X_f)` interleaved, two columns per bin.
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameSpec {
    pub window: usize,
    pub hop: usize,
    pub mode: SpectrumMode,
}

impl FrameSpec {
    pub const fn new(window: usize, hop: usize, mode: SpectrumMode) -> Self {
        Self { window, hop, mode }
    }

    /// `floor((n - window) / hop) + 1`, or `None` when the signal is shorter
    /// than one window.
    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.window).then(|| (n_samples - self.window) / self.hop + 1)
    }

    /// Nonnegative-frequency bins of the real-input transform.
    pub fn n_bins(&self) -> usize {
        self.window / 2 + 1
    }

    pub fn out_cols(&self) -> usize {
        match self.mode {
            SpectrumMode::Magnitude => self.n_bins(),
            SpectrumMode::Complex => 2 * self.n_bins(),
        }
    }

    /// Center frequency of bin `f` at `sample_rate`.
    pub fn bin_hz(&self, f: usize, sample_rate: f64) -> f64 {
        f as f64 * sample_rate / self.window as f64
    }
}

/// Planned transform for one [`FrameSpec`].
///
/// Spectra are scaled by `2 / sum(window)`, so a unit-amplitude sinusoid
/// centred on a bin has magnitude 1 there.
pub struct FramedDft<T: Scalar> {
    spec: FrameSpec,
    taper: Vec<T>,
    scale: T,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Scalar> fmt::Debug for FramedDft<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FramedDft").field("spec", &self.spec).finish()
    }
}

impl<T: Scalar> FramedDft<T> {
    pub fn new(spec: FrameSpec) -> Result<Self> {
        if spec.window < 2 || spec.hop == 0 {
            return Err(NumericsError::Invalid(format!("bad frame spec {spec:?}")));
        }
        let n = spec.window;
        let taper: Vec<f64> =
            (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect();
        let sum: f64 = taper.iter().sum();
        let mut planner = FftPlanner::new();
        Ok(Self {
            spec,
            taper: taper.iter().map(|&w| T::of(w)).collect(),
            scale: T::of(2.0 / sum),
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn spec(&self) -> &FrameSpec {
        &self.spec
    }

    /// Returns `(features [frames, out_cols], scaled complex spectra [frames, bins])`.
    pub fn forward(&self, samples: &[T]) -> Result<(Vec<T>, Vec<Complex<T>>)> {
        let frames = self.spec.n_frames(samples.len()).ok_or_else(|| {
            NumericsError::Shape(format!(
                "signal of {} samples is shorter than the {}-sample window",
                samples.len(),
                self.spec.window
            ))
        })?;
        let n = self.spec.window;
        let bins = self.spec.n_bins();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); frames * n];
        for t in 0..frames {
            let start = t * self.spec.hop;
            let row = &mut buf[t * n..(t + 1) * n];
            for ((dst, &x), &w) in row.iter_mut().zip(&samples[start..start + n]).zip(&self.taper) {
                *dst = Complex::new(x * w, T::zero());
            }
        }
        self.forward.process(&mut buf);

        let cols = self.spec.out_cols();
        let mut spectra = Vec::with_capacity(frames * bins);
        let mut out = vec![T::zero(); frames * cols];
        for t in 0..frames {
            for f in 0..bins {
                let z = buf[t * n + f] * self.scale;
                spectra.push(z);
                match self.spec.mode {
                    SpectrumMode::Magnitude => out[t * cols + f] = z.norm(),
                    SpectrumMode::Complex => {
                        out[t * cols + 2 * f] = z.re;
                        out[t * cols + 2 * f + 1] = z.im;
                    }
                }
            }
        }
        Ok((out, spectra))
    }

    /// Accumulates the gradient w.r.t. the input samples into `grad_samples`.
    pub fn backward(&self, spectra: &[Complex<T>], grad_out: &[T], grad_samples: &mut [T]) {
        let n = self.spec.window;
        let bins = self.spec.n_bins();
        let cols = self.spec.out_cols();
        let frames = spectra.len() / bins;
        let zero = Complex::new(T::zero(), T::zero());
        let mut buf = vec![zero; frames * n];
        for t in 0..frames {
            for f in 0..bins {
                let z = spectra[t * bins + f];
                let g = match self.spec.mode {
                    SpectrumMode::Magnitude => {
                        let mag = z.norm();
                        if mag > T::zero() {
                            z * (grad_out[t * cols + f] / mag)
                        } else {
                            zero
                        }
                    }
                    SpectrumMode::Complex => {
                        Complex::new(grad_out[t * cols + 2 * f], grad_out[t * cols + 2 * f + 1])
                    }
                };
                buf[t * n + f] = g;
            }
        }
        // X_f = sum_n w_n x_n e^{-i theta}, so dL/dx_n = w_n Re(sum_f G_f e^{+i theta}).
        self.inverse.process(&mut buf);
        for t in 0..frames {
            let start = t * self.spec.hop;
            let row = &buf[t * n..(t + 1) * n];
            for (i, (z, &w)) in row.iter().zip(&self.taper).enumerate() {
                grad_samples[start + i] = grad_samples[start + i] + z.re * w * self.scale;
            }
        }
    }
}
