//! WAV input/output and simple level/rate conditioning.

use std::io::{Cursor, Read, Seek};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono audio buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Reads a WAV file (integer or 32-bit float PCM), averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Audio> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    decode(reader).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Same as [`read_wav`] for an in-memory WAV file.
pub fn read_wav_bytes(bytes: &[u8]) -> Result<Audio> {
    let reader = WavReader::new(Cursor::new(bytes))?;
    decode(reader)
}

fn decode<R: Read>(reader: WavReader<R>) -> Result<Audio> {
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader.into_samples::<f32>().collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Ok(Audio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

fn float_spec(sample_rate: u32) -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    }
}

fn write_into<W: std::io::Write + Seek>(writer: W, samples: &[f32], sample_rate: u32) -> Result<()> {
    let mut wav = WavWriter::new(writer, float_spec(sample_rate))?;
    for &s in samples {
        wav.write_sample(s)?;
    }
    wav.finalize()?;
    Ok(())
}

/// Writes mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_into(file, samples, sample_rate)
}

/// Encodes mono 32-bit float WAV into memory.
pub fn wav_bytes(samples: &[f32], sample_rate: u32) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::new());
    write_into(&mut cursor, samples, sample_rate)?;
    Ok(cursor.into_inner())
}

/// Writes 16-bit integer PCM, used for fixtures and exports.
pub fn write_wav_i16(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut wav = WavWriter::create(path, spec)?;
    for &s in samples {
        wav.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    wav.finalize()?;
    Ok(())
}

/// Scales `samples` so the absolute peak equals `target`. Silent input is left alone.
pub fn peak_normalize(samples: &mut [f32], target: f32) {
    let peak = samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if peak > 0.0 && peak.is_finite() {
        let gain = target / peak;
        samples.iter_mut().for_each(|s| *s *= gain);
    }
}

/// Converts between rates related by an integer factor.
///
/// Downsampling averages each block of `factor` samples; upsampling
/// interpolates linearly. Other ratios are rejected.
pub fn resample_integer(audio: &Audio, target_rate: u32) -> Result<Audio> {
    let from = audio.sample_rate;
    if from == target_rate {
        return Ok(audio.clone());
    }
    let samples = if from > target_rate && from % target_rate == 0 {
        let factor = (from / target_rate) as usize;
        audio
            .samples
            .chunks(factor)
            .map(|c| c.iter().sum::<f32>() / c.len() as f32)
            .collect()
    } else if target_rate > from && target_rate % from == 0 {
        let factor = (target_rate / from) as usize;
        let src = &audio.samples;
        let mut out = Vec::with_capacity(src.len() * factor);
        for (i, &a) in src.iter().enumerate() {
            let b = src.get(i + 1).copied().unwrap_or(a);
            for k in 0..factor {
                out.push(a + (b - a) * k as f32 / factor as f32);
            }
        }
        out
    } else {
        return Err(Error::Config(format!(
            "cannot convert {from} Hz to {target_rate} Hz: not an integer factor"
        )));
    };
    Ok(Audio {
        samples,
        sample_rate: target_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_in_memory() {
        let samples: Vec<f32> = (0..100).map(|i| (i as f32 * 0.1).sin() * 0.5).collect();
        let bytes = wav_bytes(&samples, 16000).unwrap();
        let audio = read_wav_bytes(&bytes).unwrap();
        assert_eq!(audio.sample_rate, 16000);
        assert_eq!(audio.samples, samples);
    }

    #[test]
    fn stereo_is_averaged() {
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut cursor = Cursor::new(Vec::new());
        {
            let mut w = WavWriter::new(&mut cursor, spec).unwrap();
            for (l, r) in [(1.0f32, 0.0f32), (0.5, -0.5), (0.25, 0.75)] {
                w.write_sample(l).unwrap();
                w.write_sample(r).unwrap();
            }
            w.finalize().unwrap();
        }
        let audio = read_wav_bytes(&cursor.into_inner()).unwrap();
        assert_eq!(audio.samples, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn int16_is_scaled_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        write_wav_i16(&path, &[0.5, -0.5, 1.0], 16000).unwrap();
        let audio = read_wav(&path).unwrap();
        assert!((audio.samples[0] - 0.5).abs() < 1e-4);
        assert!((audio.samples[1] + 0.5).abs() < 1e-4);
        assert!(audio.samples[2] <= 1.0);
    }

    #[test]
    fn normalization_hits_target_peak() {
        let mut x = vec![0.1, -0.4, 0.2];
        peak_normalize(&mut x, 0.9);
        assert!((x[1] + 0.9).abs() < 1e-6);
        let mut silent = vec![0.0; 4];
        peak_normalize(&mut silent, 0.9);
        assert_eq!(silent, vec![0.0; 4]);
    }

    #[test]
    fn integer_factor_resampling() {
        let audio = Audio {
            samples: vec![1.0, 3.0, 5.0, 7.0],
            sample_rate: 32000,
        };
        let down = resample_integer(&audio, 16000).unwrap();
        assert_eq!(down.samples, vec![2.0, 6.0]);
        let up = resample_integer(&down, 32000).unwrap();
        assert_eq!(up.samples, vec![2.0, 4.0, 6.0, 6.0]);
        assert!(resample_integer(&audio, 22050).is_err());
    }
}
