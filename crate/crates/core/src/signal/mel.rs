use crate::error::{Error, Result};
use crate::signal::{ComplexSpectrogram, FeatureMatrix};

/// Energies below this are clamped before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels + 2` edge frequencies equally spaced on the mel scale; filter
/// `m` rises from edge `m`, peaks at edge `m + 1` and falls to edge `m + 2`.
pub fn mel_edges(n_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filters with unit peak, `n_mels × (frame_len / 2 + 1)`.
pub fn mel_filterbank(
    n_mels: usize,
    frame_len: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Vec<Vec<f64>>> {
    if n_mels < 2 {
        return Err(Error::Argument(format!("need at least 2 mel channels, got {n_mels}")));
    }
    let nyquist = f64::from(sample_rate) / 2.0;
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(Error::Argument(format!(
            "need 0 ≤ f_min < f_max ≤ {nyquist}, got {f_min}..{f_max}"
        )));
    }
    let edges = mel_edges(n_mels, f_min, f_max);
    let bins = frame_len / 2 + 1;
    let bin_hz = f64::from(sample_rate) / frame_len as f64;
    Ok((0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect())
}

/// Natural-log mel energies of the power spectrum.
pub fn log_mel(spec: &ComplexSpectrogram, n_mels: usize, f_min: f64, f_max: f64) -> Result<FeatureMatrix> {
    let bank = mel_filterbank(n_mels, spec.frame_len(), spec.sample_rate(), f_min, f_max)?;
    let mut values = Vec::with_capacity(spec.n_frames() * n_mels);
    for frame in spec.frames() {
        let power: Vec<f64> = frame.iter().map(|c| c.norm_sqr()).collect();
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            values.push(e.max(LOG_FLOOR).ln());
        }
    }
    let shift = spec.hop() as f64 / f64::from(spec.sample_rate());
    FeatureMatrix::new(values, spec.n_frames(), n_mels, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{stft, Waveform, Window};
    use rustfft::num_complex::Complex64;
    use std::f64::consts::PI;

    fn tone(freq: f64, amp: f64) -> Waveform {
        let s = (0..8000)
            .map(|i| (2.0 * PI * freq * i as f64 / 16000.0).sin() * amp)
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 2000], 16000).unwrap();
        let f = log_mel(&stft(&w, 400, 160, Window::Hann).unwrap(), 16, 0.0, 8000.0).unwrap();
        assert!(f.values().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn tone_at_filter_center_wins_its_row() {
        let edges = mel_edges(16, 0.0, 8000.0);
        for m in [3usize, 7, 12] {
            let spec = stft(&tone(edges[m + 1], 0.5), 512, 160, Window::Hann).unwrap();
            let f = log_mel(&spec, 16, 0.0, 8000.0).unwrap();
            for t in 0..f.n_frames() {
                let row = f.row(t);
                let arg = (0..16).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(arg, m);
            }
        }
    }

    #[test]
    fn doubling_amplitude_adds_log_four() {
        let a = log_mel(&stft(&tone(440.0, 0.2), 400, 160, Window::Hann).unwrap(), 16, 0.0, 8000.0).unwrap();
        let b = log_mel(&stft(&tone(440.0, 0.4), 400, 160, Window::Hann).unwrap(), 16, 0.0, 8000.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            if *x > LOG_FLOOR.ln() + 1.0 {
                assert!((y - x - 4f64.ln()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn monotone_in_power() {
        let spec = stft(&tone(1234.0, 0.3), 400, 160, Window::Hann).unwrap();
        let base = log_mel(&spec, 16, 0.0, 8000.0).unwrap();
        let mut bumped = spec.clone();
        for k in [0usize, 17, 40, 200] {
            let cell = &mut bumped.frames_mut()[2][k];
            *cell = if cell.norm() > 0.0 { *cell * 2.0 } else { Complex64::new(1.0, 0.0) };
            let f = log_mel(&bumped, 16, 0.0, 8000.0).unwrap();
            for (x, y) in base.values().iter().zip(f.values()) {
                assert!(y >= x || (x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argument_errors() {
        let spec = stft(&tone(440.0, 0.2), 400, 160, Window::Hann).unwrap();
        assert!(log_mel(&spec, 1, 0.0, 8000.0).is_err());
        assert!(log_mel(&spec, 16, 4000.0, 3000.0).is_err());
        assert!(log_mel(&spec, 16, 0.0, 9000.0).is_err());
    }
}
