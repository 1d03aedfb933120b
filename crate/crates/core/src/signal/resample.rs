use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Kernel length measured at the lower of the two rates.
pub const KERNEL_TAPS: usize = 32;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited interpolation of `samples` onto a grid `ratio` times as
/// dense. Output length is `round(len · ratio)`.
pub fn resample_ratio(samples: &[f64], ratio: f64) -> Vec<f64> {
    let n_out = (samples.len() as f64 * ratio).round() as usize;
    if ratio == 1.0 {
        return samples.to_vec();
    }
    // cutoff relative to the input Nyquist; widen the kernel when decimating
    let cutoff = ratio.min(1.0);
    let half = KERNEL_TAPS as f64 / 2.0 / cutoff;
    let n_in = samples.len() as isize;
    (0..n_out)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = ((t - half).ceil() as isize).max(0);
            let hi = ((t + half).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            for i in lo..=hi {
                let d = t - i as f64;
                let u = d / half;
                if u.abs() >= 1.0 {
                    continue;
                }
                let w = 0.5 * (1.0 + (PI * u).cos());
                acc += samples[i as usize] * cutoff * sinc(cutoff * d) * w;
            }
            acc
        })
        .collect()
}

/// Windowed-sinc conversion to `target_rate` Hz.
pub fn resample(wave: &Waveform, target_rate: f64) -> Result<Waveform> {
    if !(target_rate > 0.0) || !target_rate.is_finite() {
        return Err(Error::Argument(format!("target rate {target_rate} must be positive")));
    }
    let source = f64::from(wave.sample_rate());
    if target_rate == source {
        return Ok(wave.clone());
    }
    let out = resample_ratio(wave.samples(), target_rate / source);
    Waveform::new(out, target_rate.round() as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{stft, Window};

    fn tone(freq: f64, rate: u32, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / f64::from(rate)).sin() * 0.5)
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    #[test]
    fn same_rate_is_identity() {
        let w = tone(300.0, 16000, 500);
        assert_eq!(resample(&w, 16000.0).unwrap(), w);
    }

    #[test]
    fn length_formula() {
        let w = tone(300.0, 16000, 16000);
        assert_eq!(resample(&w, 8000.0).unwrap().len(), 8000);
        assert_eq!(resample_ratio(w.samples(), 1.0 / 1.1).len(), 14545);
        assert!(matches!(resample(&w, 0.0), Err(Error::Argument(_))));
        assert!(matches!(resample(&w, -5.0), Err(Error::Argument(_))));
    }

    #[test]
    fn tone_peak_survives_decimation() {
        let w = resample(&tone(440.0, 16000, 16000), 8000.0).unwrap();
        let spec = stft(&w, 8000, 8000, Window::Hann).unwrap();
        let mags: Vec<f64> = spec.frames()[0].iter().map(|c| c.norm()).collect();
        let peak = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        // 1 Hz bins at 8000-point resolution
        assert!((peak as f64 - 440.0).abs() <= 1.0, "{peak}");
    }

    #[test]
    fn resampling_is_linear() {
        let w = tone(700.0, 16000, 3000);
        let a = 0.37;
        let lhs = resample(&w.scaled(a), 11025.0).unwrap();
        let rhs = resample(&w, 11025.0).unwrap().scaled(a);
        let err = lhs
            .samples()
            .iter()
            .zip(rhs.samples())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9);
    }
}
