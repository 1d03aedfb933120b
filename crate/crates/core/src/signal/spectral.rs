use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

/// Per-frame one-sided spectra (`frame_len / 2 + 1` bins).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    frames: Vec<Vec<Complex64>>,
    frame_len: usize,
    hop: usize,
    window: Window,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(
        frames: Vec<Vec<Complex64>>,
        frame_len: usize,
        hop: usize,
        window: Window,
        sample_rate: u32,
    ) -> Result<Self> {
        let bins = frame_len / 2 + 1;
        if frames.iter().any(|f| f.len() != bins) {
            return Err(Error::Shape(format!("every frame must have {bins} bins")));
        }
        if hop == 0 || hop > frame_len {
            return Err(Error::Argument(format!("hop {hop} outside (0, {frame_len}]")));
        }
        Ok(ComplexSpectrogram {
            frames,
            frame_len,
            hop,
            window,
            sample_rate,
        })
    }

    pub fn frames(&self) -> &[Vec<Complex64>] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Vec<Complex64>] {
        &mut self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn fft_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Center frequency of bin `k` in Hz.
    pub fn bin_hz(&self, k: usize) -> f64 {
        k as f64 * f64::from(self.sample_rate) / self.frame_len as f64
    }
}

/// Short-time Fourier transform without edge padding: frame count is
/// `1 + (len - frame_len) / hop`.
pub fn stft(wave: &Waveform, frame_len: usize, hop: usize, window: Window) -> Result<ComplexSpectrogram> {
    if frame_len == 0 || hop == 0 || hop > frame_len {
        return Err(Error::Argument(format!(
            "need 0 < hop ≤ frame_len, got hop {hop}, frame_len {frame_len}"
        )));
    }
    let x = wave.samples();
    if x.len() < frame_len {
        return Err(Error::EmptySpectrogram {
            samples: x.len(),
            frame_len,
        });
    }
    let n_frames = 1 + (x.len() - frame_len) / hop;
    let w = window.coefficients(frame_len);
    let fft = FftPlanner::new().plan_fft_forward(frame_len);
    let bins = frame_len / 2 + 1;
    let mut buf = vec![Complex64::new(0.0, 0.0); frame_len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let frames = (0..n_frames)
        .map(|f| {
            let start = f * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(x[start + i] * w[i], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            buf[..bins].to_vec()
        })
        .collect();
    ComplexSpectrogram::new(frames, frame_len, hop, window, wave.sample_rate())
}

/// Checks that the squared window overlap-adds to a constant at this hop,
/// which is what weighted overlap-add synthesis needs.
fn check_cola(w: &[f64], hop: usize) -> Result<()> {
    let sums: Vec<f64> = (0..hop)
        .map(|r| w.iter().skip(r).step_by(hop).map(|v| v * v).sum())
        .collect();
    let mean = sums.iter().sum::<f64>() / sums.len() as f64;
    if mean <= 0.0 || sums.iter().any(|s| (s - mean).abs() > 1e-9 * mean) {
        return Err(Error::config(
            "istft.hop",
            format!("window/hop pair (frame {}, hop {hop}) is not constant-overlap-add", w.len()),
        ));
    }
    Ok(())
}

/// Weighted overlap-add synthesis normalized by the per-sample window-square
/// sum. Output length is `(frames - 1) · hop + frame_len`.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let n = spec.frame_len;
    let hop = spec.hop;
    let w = spec.window.coefficients(n);
    check_cola(&w, hop)?;
    if spec.frames.is_empty() {
        return Waveform::new(Vec::new(), spec.sample_rate);
    }
    let len = (spec.frames.len() - 1) * hop + n;
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    for (f, frame) in spec.frames.iter().enumerate() {
        buf[..frame.len()].copy_from_slice(frame);
        for k in frame.len()..n {
            buf[k] = frame[n - k].conj();
        }
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = f * hop;
        for i in 0..n {
            out[start + i] += buf[i].re / n as f64 * w[i];
            norm[start + i] += w[i] * w[i];
        }
    }
    for (o, s) in out.iter_mut().zip(&norm) {
        *o = if *s > 1e-10 { *o / s } else { 0.0 };
    }
    Waveform::new(out, spec.sample_rate)
}
