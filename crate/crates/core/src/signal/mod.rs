//! Waveforms, spectral analysis and log-mel features.

mod f0;
mod mel;
mod resample;
mod spectral;
mod wav;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use f0::estimate_f0;
pub use mel::{hz_to_mel, log_mel, mel_filterbank, mel_to_hz, LOG_FLOOR};
pub use resample::{resample, resample_ratio, KERNEL_TAPS};
pub use spectral::{istft, stft, ComplexSpectrogram, Window};
pub use wav::{load_wav, quantize, save_wav};

/// Sample rate every ingested waveform is converted to.
pub const CANONICAL_RATE: u32 = 16_000;

/// Mono PCM samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Argument(format!("sample {i} is not finite")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn scaled(&self, a: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * a).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Time × mel-channel log energies, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    n_frames: usize,
    n_mels: usize,
    frame_shift_s: f64,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f64>, n_frames: usize, n_mels: usize, frame_shift_s: f64) -> Result<Self> {
        if values.len() != n_frames * n_mels {
            return Err(Error::Shape(format!(
                "{} values for {n_frames} frames of {n_mels} mels",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("feature values must be finite".into()));
        }
        Ok(FeatureMatrix {
            values,
            n_frames,
            n_mels,
            frame_shift_s,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame_shift_s(&self) -> f64 {
        self.frame_shift_s
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.n_mels + m]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }

    /// Zero-mean, unit-variance over the whole utterance.
    pub fn standardized(&self) -> FeatureMatrix {
        let mean = self.mean();
        let n = self.values.len().max(1) as f64;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-8).sqrt();
        FeatureMatrix {
            values: self.values.iter().map(|v| (v - mean) * inv).collect(),
            ..self.clone()
        }
    }

    /// First `n` frames.
    pub fn truncated(&self, n: usize) -> FeatureMatrix {
        let n = n.min(self.n_frames);
        FeatureMatrix {
            values: self.values[..n * self.n_mels].to_vec(),
            n_frames: n,
            ..self.clone()
        }
    }

    /// Extends to `n` frames by appending rows of `value`.
    pub fn padded(&self, n: usize, value: f64) -> FeatureMatrix {
        let mut values = self.values.clone();
        values.resize(n.max(self.n_frames) * self.n_mels, value);
        FeatureMatrix {
            values,
            n_frames: n.max(self.n_frames),
            ..self.clone()
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.n_frames, self.n_mels], self.values.clone()).expect("consistent shape")
    }
}

/// Waveform → log-mel pipeline settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Per-utterance standardization of the log-mel matrix.
    pub standardize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            frame_len: 400,
            hop: 160,
            n_mels: 16,
            f_min: 0.0,
            f_max: 8000.0,
            standardize: true,
        }
    }
}

impl FrontendConfig {
    /// Hann-windowed log-mel features at the canonical rate.
    pub fn extract(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        let resampled;
        let wave = if wave.sample_rate() == CANONICAL_RATE {
            wave
        } else {
            resampled = resample(wave, f64::from(CANONICAL_RATE))?;
            &resampled
        };
        let spec = stft(wave, self.frame_len, self.hop, Window::Hann)?;
        let feats = log_mel(&spec, self.n_mels, self.f_min, self.f_max)?;
        Ok(if self.standardize {
            feats.standardized()
        } else {
            feats
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_invariants() {
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16000).is_err());
        let w = Waveform::new(vec![0.0; 24000], 16000).unwrap();
        assert_eq!(w.duration_s(), 1.5);
    }

    #[test]
    fn frontend_resamples_foreign_rates() {
        let fe = FrontendConfig::default();
        let tone = |rate: u32| {
            let s = (0..rate as usize)
                .map(|i| (2.0 * std::f64::consts::PI * 500.0 * i as f64 / f64::from(rate)).sin() * 0.5)
                .collect();
            Waveform::new(s, rate).unwrap()
        };
        let a = fe.extract(&tone(16000)).unwrap();
        let b = fe.extract(&tone(8000)).unwrap();
        assert_eq!(a.n_frames(), b.n_frames());
        assert_eq!(a.n_mels(), 16);
    }

    #[test]
    fn padding_and_truncation() {
        let f = FeatureMatrix::new(vec![1.0, 2.0, 3.0, 4.0], 2, 2, 0.01).unwrap();
        let p = f.padded(4, -1.0);
        assert_eq!(p.n_frames(), 4);
        assert_eq!(p.row(3), &[-1.0, -1.0]);
        assert_eq!(p.truncated(2), f);
    }
}
