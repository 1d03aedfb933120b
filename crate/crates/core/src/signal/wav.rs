use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::Waveform;

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a 16-bit PCM mono WAV; samples are scaled by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: {}-bit {:?} samples, expected 16-bit PCM",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    Waveform::new(samples, spec.sample_rate)
}

/// 16-bit quantization with saturation: `1.0` maps to `32767`.
pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn save_wav(wave: &Waveform, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &x in wave.samples() {
        w.write_sample(quantize(x)).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_file_has_rate_many_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        save_wav(&w, &p).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.len(), 16000);
        assert_eq!(back.sample_rate(), 16000);
        assert!(back.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn round_trip_error_within_one_lsb_and_payload_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let q = dir.path().join("b.wav");
        let samples: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.013).sin() * 0.999).collect();
        let w = Waveform::new(samples, 16000).unwrap();
        save_wav(&w, &p).unwrap();
        let back = load_wav(&p).unwrap();
        assert!(w.samples().iter().zip(back.samples()).all(|(a, b)| (a - b).abs() <= 1.0 / 32768.0));
        save_wav(&back, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn saturation_and_empty_payload() {
        assert_eq!(quantize(1.0), 32767);
        assert_eq!(quantize(-1.0), -32768);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.wav");
        save_wav(&Waveform::new(Vec::new(), 16000).unwrap(), &p).unwrap();
        assert!(load_wav(&p).unwrap().is_empty());
    }

    #[test]
    fn stereo_is_a_format_error_and_truncation_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Format(_))));

        let t = dir.path().join("trunc.wav");
        save_wav(&Waveform::new(vec![0.25; 100], 16000).unwrap(), &t).unwrap();
        let bytes = std::fs::read(&t).unwrap();
        std::fs::write(&t, &bytes[..bytes.len() - 51]).unwrap();
        assert!(matches!(load_wav(&t), Err(Error::Io(_))));
    }
}
