//! Pitch, speed, vocal-tract-length and SpecAugment perturbations, and the
//! policy that turns one utterance into its augmented copies.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{istft, resample_ratio, stft, ComplexSpectrogram, FeatureMatrix, FrontendConfig, Waveform, Window};

/// Analysis frame and hop of the phase-vocoder style transforms.
pub const VOCODER_FRAME: usize = 512;
pub const VOCODER_HOP: usize = 128;

/// Perturbation rates shared by speed perturbation and VTLP.
pub const PAIRED_RATES: [f64; 2] = [0.9, 1.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PitchPerturbConfig {
    /// Shift in twelfths of an octave; positive is higher.
    pub n_semitones: i32,
}

impl PitchPerturbConfig {
    pub fn new(n_semitones: i32) -> Result<Self> {
        if n_semitones.abs() > 12 {
            return Err(Error::Argument(format!("pitch shift {n_semitones} outside [-12, 12]")));
        }
        Ok(PitchPerturbConfig { n_semitones })
    }

    /// Frequency ratio `2^(n/12)`.
    pub fn ratio(self) -> f64 {
        2f64.powf(f64::from(self.n_semitones) / 12.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedPerturbConfig {
    pub rate: f64,
}

impl SpeedPerturbConfig {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.5..=2.0).contains(&rate) {
            return Err(Error::Argument(format!("speed rate {rate} outside [0.5, 2.0]")));
        }
        Ok(SpeedPerturbConfig { rate })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VtlpConfig {
    pub alpha: f64,
    /// Knee of the piecewise-linear warp, in source-frequency Hz.
    pub f_boundary: f64,
}

impl VtlpConfig {
    /// Warp factor `alpha` with the knee at 80% of Nyquist.
    pub fn with_alpha(alpha: f64, sample_rate: u32) -> Self {
        VtlpConfig {
            alpha,
            f_boundary: 0.8 * f64::from(sample_rate) / 2.0,
        }
    }

    fn validate(&self, nyquist: f64) -> Result<()> {
        if !(0.8..=1.2).contains(&self.alpha) {
            return Err(Error::Argument(format!("VTLP alpha {} outside [0.8, 1.2]", self.alpha)));
        }
        if !(self.f_boundary > 0.0 && self.f_boundary < nyquist) {
            return Err(Error::Argument(format!(
                "VTLP boundary {} outside (0, {nyquist})",
                self.f_boundary
            )));
        }
        Ok(())
    }

    /// Source → warped frequency: slope `alpha` up to the knee, then the
    /// straight line to a fixed Nyquist.
    pub fn warp(&self, f: f64, nyquist: f64) -> f64 {
        let fb = self.f_boundary;
        if f <= fb {
            self.alpha * f
        } else {
            self.alpha * fb + (f - fb) * (nyquist - self.alpha * fb) / (nyquist - fb)
        }
    }

    pub fn unwarp(&self, f: f64, nyquist: f64) -> f64 {
        let knee = self.alpha * self.f_boundary;
        if f <= knee {
            f / self.alpha
        } else {
            self.f_boundary + (f - knee) * (nyquist - self.f_boundary) / (nyquist - knee)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_fraction: f64,
    /// `None` fills masks with the utterance's feature mean.
    pub mask_value: Option<f64>,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            n_freq_masks: 2,
            max_freq_width: 4,
            n_time_masks: 2,
            max_time_fraction: 0.05,
            mask_value: None,
        }
    }
}

impl SpecAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_time_fraction > 0.0 && self.max_time_fraction <= 0.5) {
            return Err(Error::config(
                "augment.spec_augment.max_time_fraction",
                format!("{} outside (0, 0.5]", self.max_time_fraction),
            ));
        }
        Ok(())
    }
}

fn princarg(phase: f64) -> f64 {
    phase - 2.0 * PI * ((phase + PI) / (2.0 * PI)).floor()
}

fn padded(x: &[f64], pad: usize) -> Vec<f64> {
    let mut v = vec![0.0; x.len() + 2 * pad];
    v[pad..pad + x.len()].copy_from_slice(x);
    v
}

fn window_out(y: &[f64], start: usize, len: usize) -> Vec<f64> {
    (start..start + len).map(|i| y.get(i).copied().unwrap_or(0.0)).collect()
}

/// Phase-vocoder time stretch; the output is `1 / rate` times as long.
fn time_stretch(x: &[f64], rate: f64, sample_rate: u32) -> Result<Vec<f64>> {
    let (n, hop) = (VOCODER_FRAME, VOCODER_HOP);
    let wave = Waveform::new(x.to_vec(), sample_rate)?;
    let spec = stft(&wave, n, hop, Window::Hann)?;
    let frames = spec.frames();
    let bins = spec.fft_bins();
    let advance: Vec<f64> = (0..bins).map(|k| 2.0 * PI * k as f64 * hop as f64 / n as f64).collect();
    let zero = vec![Complex64::new(0.0, 0.0); bins];
    let mut phase: Vec<f64> = frames[0].iter().map(|c| c.arg()).collect();
    let mut out = Vec::new();
    let mut step = 0.0f64;
    while step < frames.len() as f64 {
        let j = step.floor() as usize;
        let frac = step - j as f64;
        let a = &frames[j];
        let b = frames.get(j + 1).unwrap_or(&zero);
        let frame: Vec<Complex64> = (0..bins)
            .map(|k| {
                let mag = (1.0 - frac) * a[k].norm() + frac * b[k].norm();
                Complex64::from_polar(mag, phase[k])
            })
            .collect();
        out.push(frame);
        for k in 0..bins {
            let d = princarg(b[k].arg() - a[k].arg() - advance[k]);
            phase[k] += advance[k] + d;
        }
        step += rate;
    }
    let stretched = ComplexSpectrogram::new(out, n, hop, Window::Hann, sample_rate)?;
    Ok(istft(&stretched)?.into_samples())
}

/// Shifts pitch by `2^(n/12)` while keeping duration: time-stretch by the
/// ratio, then resample back to the original length.
pub fn pitch_perturb(wave: &Waveform, cfg: PitchPerturbConfig) -> Result<Waveform> {
    PitchPerturbConfig::new(cfg.n_semitones)?;
    if wave.is_empty() {
        return Err(Error::Argument("cannot pitch-shift an empty waveform".into()));
    }
    if cfg.n_semitones == 0 {
        return Ok(wave.clone());
    }
    let ratio = cfg.ratio();
    let pad = VOCODER_FRAME;
    let x = padded(wave.samples(), pad);
    let stretched = time_stretch(&x, 1.0 / ratio, wave.sample_rate())?;
    let restored = resample_ratio(&stretched, 1.0 / ratio);
    let out: Vec<f64> = window_out(&restored, pad, wave.len())
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    Waveform::new(out, wave.sample_rate())
}

/// Two independent shifts: magnitude uniform in 1..=12, fair-coin sign.
pub fn sample_pitch_shifts<R: Rng + ?Sized>(rng: &mut R) -> [PitchPerturbConfig; 2] {
    let mut draw = || {
        let mag: i32 = rng.random_range(1..=12);
        let n = if rng.random_bool(0.5) { mag } else { -mag };
        PitchPerturbConfig { n_semitones: n }
    };
    [draw(), draw()]
}

/// Resampling-based speed change; tempo and pitch scale together.
pub fn speed_perturb(wave: &Waveform, cfg: SpeedPerturbConfig) -> Result<Waveform> {
    SpeedPerturbConfig::new(cfg.rate)?;
    if wave.is_empty() {
        return Err(Error::Argument("cannot speed-perturb an empty waveform".into()));
    }
    if cfg.rate == 1.0 {
        return Ok(wave.clone());
    }
    let out = resample_ratio(wave.samples(), 1.0 / cfg.rate);
    Waveform::new(out.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), wave.sample_rate())
}

/// Vocal-tract-length perturbation by warping the STFT along frequency.
///
/// Magnitudes are read from the unwarped source position (linear
/// interpolation between bins), the initial phase comes from the nearest
/// source bin and later phases advance at the warped instantaneous
/// frequency. Frame energies and the total signal energy are preserved.
pub fn vtlp(wave: &Waveform, cfg: VtlpConfig) -> Result<Waveform> {
    let rate = f64::from(wave.sample_rate());
    let nyquist = rate / 2.0;
    cfg.validate(nyquist)?;
    let (n, hop) = (VOCODER_FRAME, VOCODER_HOP);
    if wave.len() < n {
        return Err(Error::EmptySpectrogram {
            samples: wave.len(),
            frame_len: n,
        });
    }
    let x = padded(wave.samples(), n);
    let mut spec = stft(&Waveform::new(x, wave.sample_rate())?, n, hop, Window::Hann)?;
    let bins = spec.fft_bins();
    let bin_hz = rate / n as f64;
    let advance: Vec<f64> = (0..bins).map(|k| 2.0 * PI * k as f64 * hop as f64 / n as f64).collect();

    // source position of each output bin
    let source: Vec<(usize, f64, usize)> = (0..bins)
        .map(|k| {
            let s = (cfg.unwarp(k as f64 * bin_hz, nyquist) / bin_hz).clamp(0.0, (bins - 1) as f64);
            let j0 = (s.floor() as usize).min(bins - 1);
            (j0, s - j0 as f64, (s.round() as usize).min(bins - 1))
        })
        .collect();

    let mut prev_phase: Vec<f64> = spec.frames()[0].iter().map(|c| c.arg()).collect();
    let mut out_phase: Vec<f64> = source.iter().map(|&(_, _, j)| prev_phase[j]).collect();
    for (f, frame) in spec.frames_mut().iter_mut().enumerate() {
        let mags: Vec<f64> = frame.iter().map(|c| c.norm()).collect();
        let phases: Vec<f64> = frame.iter().map(|c| c.arg()).collect();
        if f > 0 {
            let warped_advance: Vec<f64> = (0..bins)
                .map(|j| {
                    let inst = advance[j] + princarg(phases[j] - prev_phase[j] - advance[j]);
                    let hz = inst * rate / (2.0 * PI * hop as f64);
                    2.0 * PI * cfg.warp(hz, nyquist) * hop as f64 / rate
                })
                .collect();
            for (k, &(_, _, j)) in source.iter().enumerate() {
                out_phase[k] += warped_advance[j];
            }
        }
        let energy_in: f64 = mags.iter().map(|m| m * m).sum();
        let new_mags: Vec<f64> = source
            .iter()
            .map(|&(j0, frac, _)| {
                let j1 = (j0 + 1).min(bins - 1);
                (1.0 - frac) * mags[j0] + frac * mags[j1]
            })
            .collect();
        let energy_out: f64 = new_mags.iter().map(|m| m * m).sum();
        let gain = if energy_out > 0.0 {
            (energy_in / energy_out).sqrt()
        } else {
            0.0
        };
        for k in 0..bins {
            frame[k] = Complex64::from_polar(new_mags[k] * gain, out_phase[k]);
        }
        prev_phase = phases;
    }
    let y = istft(&spec)?.into_samples();
    let mut out = window_out(&y, n, wave.len());
    // remapped frames are not a consistent STFT; overlap-add loses some
    // energy, so restore the input's total
    let e_in: f64 = wave.samples().iter().map(|v| v * v).sum();
    let e_out: f64 = out.iter().map(|v| v * v).sum();
    let gain = if e_out > 0.0 { (e_in / e_out).sqrt() } else { 0.0 };
    out.iter_mut().for_each(|v| *v = (*v * gain).clamp(-1.0, 1.0));
    Waveform::new(out, wave.sample_rate())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskAxis {
    Frequency,
    Time,
}

/// One contiguous stripe: `[start, start + width)` along `axis`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Draws frequency stripes first, then time stripes.
pub fn draw_masks<R: Rng + ?Sized>(n_frames: usize, n_mels: usize, cfg: &SpecAugmentConfig, rng: &mut R) -> Vec<Mask> {
    let mut masks = Vec::with_capacity(cfg.n_freq_masks + cfg.n_time_masks);
    let max_f = cfg.max_freq_width.min(n_mels);
    for _ in 0..cfg.n_freq_masks {
        let width = rng.random_range(0..=max_f);
        let start = rng.random_range(0..=n_mels - width);
        masks.push(Mask {
            axis: MaskAxis::Frequency,
            start,
            width,
        });
    }
    let max_t = ((cfg.max_time_fraction * n_frames as f64).floor() as usize).min(n_frames);
    for _ in 0..cfg.n_time_masks {
        let width = rng.random_range(0..=max_t);
        let start = rng.random_range(0..=n_frames - width);
        masks.push(Mask {
            axis: MaskAxis::Time,
            start,
            width,
        });
    }
    masks
}

pub fn apply_masks(feat: &FeatureMatrix, masks: &[Mask], value: f64) -> FeatureMatrix {
    let mut out = feat.clone();
    let (t_len, m_len) = (feat.n_frames(), feat.n_mels());
    let v = out.values_mut();
    for mask in masks {
        match mask.axis {
            MaskAxis::Frequency => {
                for t in 0..t_len {
                    for m in mask.start..mask.start + mask.width {
                        v[t * m_len + m] = value;
                    }
                }
            }
            MaskAxis::Time => {
                for t in mask.start..mask.start + mask.width {
                    v[t * m_len..(t + 1) * m_len].iter_mut().for_each(|c| *c = value);
                }
            }
        }
    }
    out
}

/// Masks random frequency bands and time spans.
pub fn spec_augment<R: Rng + ?Sized>(feat: &FeatureMatrix, cfg: &SpecAugmentConfig, rng: &mut R) -> FeatureMatrix {
    let masks = draw_masks(feat.n_frames(), feat.n_mels(), cfg, rng);
    let value = cfg.mask_value.unwrap_or_else(|| feat.mean());
    apply_masks(feat, &masks, value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AugmentMethod {
    None,
    Pp,
    Sp,
    Vtlp,
    Sa,
    SaPp,
    SaVtlp,
    SaSp,
}

impl AugmentMethod {
    pub const ALL: [AugmentMethod; 8] = [
        AugmentMethod::None,
        AugmentMethod::Pp,
        AugmentMethod::Sp,
        AugmentMethod::Vtlp,
        AugmentMethod::Sa,
        AugmentMethod::SaPp,
        AugmentMethod::SaVtlp,
        AugmentMethod::SaSp,
    ];

    pub fn uses_spec_augment(self) -> bool {
        matches!(self, AugmentMethod::Sa | AugmentMethod::SaPp | AugmentMethod::SaVtlp | AugmentMethod::SaSp)
    }

    /// The waveform-level component, if any.
    pub fn wave_method(self) -> AugmentMethod {
        match self {
            AugmentMethod::SaPp => AugmentMethod::Pp,
            AugmentMethod::SaVtlp => AugmentMethod::Vtlp,
            AugmentMethod::SaSp => AugmentMethod::Sp,
            AugmentMethod::Sa => AugmentMethod::None,
            m => m,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentMethod::None => "none",
            AugmentMethod::Pp => "pp",
            AugmentMethod::Sp => "sp",
            AugmentMethod::Vtlp => "vtlp",
            AugmentMethod::Sa => "sa",
            AugmentMethod::SaPp => "sa+pp",
            AugmentMethod::SaVtlp => "sa+vtlp",
            AugmentMethod::SaSp => "sa+sp",
        }
    }
}

impl fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(' ', "");
        AugmentMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| Error::config("augment.method", format!("unknown augmentation method `{s}`")))
    }
}

impl TryFrom<String> for AugmentMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AugmentMethod> for String {
    fn from(m: AugmentMethod) -> String {
        m.as_str().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub method: AugmentMethod,
    pub copies: usize,
    pub seed: u64,
    pub spec_augment: SpecAugmentConfig,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            method: AugmentMethod::None,
            copies: 2,
            seed: 0,
            spec_augment: SpecAugmentConfig::default(),
        }
    }
}

/// FNV-1a, used to derive stable per-item seeds from string labels.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

impl AugmentPolicy {
    /// Generator for one utterance: `seed ⊕ hash(id)`, so results do not
    /// depend on processing order.
    pub fn rng_for(&self, utterance_id: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(utterance_id))
    }
}

/// What was done to produce an augmented copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: AugmentMethod,
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedCopy {
    pub wave: Waveform,
    pub features: FeatureMatrix,
    pub provenance: Provenance,
}

/// Applies the waveform-level part of `method` for `copies` copies. SP and
/// VTLP alternate the rates 0.9 and 1.1; PP draws a fresh pair of shifts for
/// every two copies.
pub fn wave_copies<R: Rng + ?Sized>(
    wave: &Waveform,
    method: AugmentMethod,
    copies: usize,
    rng: &mut R,
) -> Result<Vec<(Waveform, Provenance)>> {
    let mut out = Vec::with_capacity(copies);
    let mut shifts = [PitchPerturbConfig { n_semitones: 0 }; 2];
    for i in 0..copies {
        let mut params = BTreeMap::new();
        let w = match method.wave_method() {
            AugmentMethod::Pp => {
                if i % 2 == 0 {
                    shifts = sample_pitch_shifts(rng);
                }
                let cfg = shifts[i % 2];
                params.insert("n_semitones".to_string(), f64::from(cfg.n_semitones));
                pitch_perturb(wave, cfg)?
            }
            AugmentMethod::Sp => {
                let rate = PAIRED_RATES[i % 2];
                params.insert("rate".to_string(), rate);
                speed_perturb(wave, SpeedPerturbConfig::new(rate)?)?
            }
            AugmentMethod::Vtlp => {
                let alpha = PAIRED_RATES[i % 2];
                params.insert("alpha".to_string(), alpha);
                vtlp(wave, VtlpConfig::with_alpha(alpha, wave.sample_rate()))?
            }
            _ => wave.clone(),
        };
        out.push((
            w,
            Provenance {
                method,
                params,
            },
        ));
    }
    Ok(out)
}

/// Produces `policy.copies` augmented variants of one utterance (the
/// original is not included). Combined methods perturb the waveform first
/// and mask the resulting features.
pub fn make_augmented_copies<R: Rng + ?Sized>(
    wave: &Waveform,
    policy: &AugmentPolicy,
    frontend: &FrontendConfig,
    rng: &mut R,
) -> Result<Vec<AugmentedCopy>> {
    policy.spec_augment.validate()?;
    wave_copies(wave, policy.method, policy.copies, rng)?
        .into_iter()
        .map(|(w, provenance)| {
            let mut features = frontend.extract(&w)?;
            if policy.method.uses_spec_augment() {
                features = spec_augment(&features, &policy.spec_augment, rng);
            }
            Ok(AugmentedCopy {
                wave: w,
                features,
                provenance,
            })
        })
        .collect()
}
