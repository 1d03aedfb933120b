use crate::error::{Error, Result};
use crate::signal::Waveform;

const MAX_ANALYSIS: usize = 32_768;
const VOICING_THRESHOLD: f64 = 0.6;

/// Normalized autocorrelation at lag `tau` over the overlapping region.
fn ncc(x: &[f64], tau: usize) -> f64 {
    let n = x.len() - tau;
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i], x[i + tau]);
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    let d = (xx * yy).sqrt();
    if d > 0.0 {
        xy / d
    } else {
        0.0
    }
}

/// Autocorrelation pitch estimate in `[f_lo, f_hi]`.
///
/// Takes the shortest lag whose normalized autocorrelation is a local
/// maximum within 90% of the best peak, refined by parabolic interpolation.
pub fn estimate_f0(wave: &Waveform, f_lo: f64, f_hi: f64) -> Result<f64> {
    if !(f_lo > 0.0 && f_lo < f_hi) {
        return Err(Error::Argument(format!("need 0 < f_lo < f_hi, got {f_lo}, {f_hi}")));
    }
    let rate = f64::from(wave.sample_rate());
    let min_len = (3.0 * rate / f_lo).ceil() as usize;
    if wave.len() < min_len {
        return Err(Error::Argument(format!(
            "{} samples hold fewer than three periods of {f_lo} Hz",
            wave.len()
        )));
    }
    let s = wave.samples();
    let x: Vec<f64> = if s.len() > MAX_ANALYSIS {
        let start = (s.len() - MAX_ANALYSIS) / 2;
        s[start..start + MAX_ANALYSIS].to_vec()
    } else {
        s.to_vec()
    };
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let x: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy <= 1e-12 * x.len() as f64 {
        return Err(Error::NoPitch);
    }

    let lag_min = ((rate / f_hi).floor() as usize).max(2);
    let lag_max = ((rate / f_lo).ceil() as usize).min(x.len() / 2);
    if lag_min + 1 >= lag_max {
        return Err(Error::Argument("pitch search range is empty".into()));
    }
    // r[i] is the correlation at lag (lag_min - 1 + i)
    let r: Vec<f64> = (lag_min - 1..=lag_max + 1).map(|tau| ncc(&x, tau)).collect();
    let best = r[1..r.len() - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best < VOICING_THRESHOLD {
        return Err(Error::NoPitch);
    }
    let i = (1..r.len() - 1)
        .find(|&i| r[i] >= 0.9 * best && r[i] >= r[i - 1] && r[i] >= r[i + 1])
        .ok_or(Error::NoPitch)?;
    let denom = r[i - 1] - 2.0 * r[i] + r[i + 1];
    let delta = if denom.abs() > 1e-15 {
        (0.5 * (r[i - 1] - r[i + 1]) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let period = (lag_min - 1 + i) as f64 + delta;
    Ok((rate / period).clamp(f_lo, f_hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tone(freq: f64) -> Waveform {
        let s = (0..16000)
            .map(|i| (2.0 * PI * freq * i as f64 / 16000.0).sin() * 0.5)
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn sine_tones() {
        for f in [220.0, 440.0] {
            let est = estimate_f0(&tone(f), 60.0, 1000.0).unwrap();
            assert!((est - f).abs() <= 0.01 * f, "{f}: {est}");
        }
    }

    #[test]
    fn sweep_within_one_percent() {
        for f in (80..=600).step_by(37) {
            let f = f as f64;
            let est = estimate_f0(&tone(f), 70.0, 700.0).unwrap();
            assert!(est >= 0.99 * f && est <= 1.01 * f, "{f}: {est}");
        }
    }

    #[test]
    fn dc_and_noise_have_no_pitch() {
        let dc = Waveform::new(vec![0.3; 8000], 16000).unwrap();
        assert!(matches!(estimate_f0(&dc, 60.0, 1000.0), Err(Error::NoPitch)));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Waveform::new((0..16000).map(|_| rng.random_range(-0.5..0.5)).collect(), 16000).unwrap();
        assert!(matches!(estimate_f0(&noise, 60.0, 1000.0), Err(Error::NoPitch)));
    }

    #[test]
    fn too_short_is_an_argument_error() {
        let w = Waveform::new(vec![0.1; 100], 16000).unwrap();
        assert!(matches!(estimate_f0(&w, 80.0, 600.0), Err(Error::Argument(_))));
    }
}
