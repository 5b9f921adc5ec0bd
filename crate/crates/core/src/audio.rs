//! WAV container helpers: header probing, excerpting, mono mixdown and
//! resampling.

use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::manifest::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioInfo {
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub channels: u16,
    pub frames: u64,
}

/// Reads only the WAV header.
pub fn probe_wav(path: &Path) -> Result<AudioInfo> {
    let reader = WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_rate == 0 || spec.channels == 0 {
        return Err(Error::Audio(format!("{}: degenerate header", path.display())));
    }
    let frames = reader.duration() as u64;
    Ok(AudioInfo {
        duration_s: frames as f64 / spec.sample_rate as f64,
        sample_rate_hz: spec.sample_rate,
        channels: spec.channels,
        frames,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Int(Vec<i32>),
    Float(Vec<f32>),
}

fn frame_at(seconds: f64, sample_rate: u32) -> u64 {
    (seconds.max(0.0) * sample_rate as f64).round() as u64
}

/// Interleaved samples of `[start_s, end_s)`, clamped to the file.
pub fn read_excerpt(path: &Path, start_s: f64, end_s: f64) -> Result<(WavSpec, Samples)> {
    let mut reader = WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let total = reader.duration() as u64;
    let first = frame_at(start_s, spec.sample_rate).min(total);
    let last = frame_at(end_s, spec.sample_rate).clamp(first, total);
    reader
        .seek(first as u32)
        .map_err(|e| Error::io(path, e))?;
    let n = ((last - first) * spec.channels as u64) as usize;
    let samples = match spec.sample_format {
        SampleFormat::Int => Samples::Int(
            reader
                .samples::<i32>()
                .take(n)
                .collect::<std::result::Result<_, _>>()?,
        ),
        SampleFormat::Float => Samples::Float(
            reader
                .samples::<f32>()
                .take(n)
                .collect::<std::result::Result<_, _>>()?,
        ),
    };
    Ok((spec, samples))
}

pub fn encode_wav(spec: WavSpec, samples: &Samples) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = WavWriter::new(&mut cursor, spec)?;
        match samples {
            Samples::Int(v) => match spec.bits_per_sample {
                8 => v.iter().try_for_each(|s| w.write_sample(*s as i8))?,
                16 => v.iter().try_for_each(|s| w.write_sample(*s as i16))?,
                _ => v.iter().try_for_each(|s| w.write_sample(*s))?,
            },
            Samples::Float(v) => v.iter().try_for_each(|s| w.write_sample(*s))?,
        }
        w.finalize()?;
    }
    Ok(cursor.into_inner())
}

/// Copies `[start_s, end_s)` of `src` to `dest` with the source format.
pub fn write_excerpt(src: &Path, start_s: f64, end_s: f64, dest: &Path) -> Result<()> {
    let (spec, samples) = read_excerpt(src, start_s, end_s)?;
    write_atomic(dest, &encode_wav(spec, &samples)?)
}

/// Whole file as mono samples in [-1, 1].
pub fn read_mono(path: &Path) -> Result<(u32, Vec<f32>)> {
    let (spec, samples) = read_excerpt(path, 0.0, f64::INFINITY)?;
    let ch = spec.channels as usize;
    let scale = match spec.sample_format {
        SampleFormat::Int => 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32,
        SampleFormat::Float => 1.0,
    };
    let interleaved: Vec<f32> = match samples {
        Samples::Int(v) => v.into_iter().map(|s| s as f32 * scale).collect(),
        Samples::Float(v) => v,
    };
    let mono = interleaved
        .chunks(ch)
        .map(|frame| frame.iter().sum::<f32>() / ch as f32)
        .collect();
    Ok((spec.sample_rate, mono))
}

/// Linear-interpolation resampling.
pub fn resample_linear(samples: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if from_hz == to_hz || samples.is_empty() {
        return samples.to_vec();
    }
    let out_len = (samples.len() as u64 * to_hz as u64 / from_hz as u64) as usize;
    let step = from_hz as f64 / to_hz as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let idx = pos.floor() as usize;
            let frac = (pos - idx as f64) as f32;
            let a = samples[idx.min(samples.len() - 1)];
            let b = samples[(idx + 1).min(samples.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// 16-bit PCM mono WAV bytes.
pub fn encode_mono_i16(sample_rate: u32, samples: &[f32]) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let ints = samples
        .iter()
        .map(|s| (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i32)
        .collect();
    encode_wav(spec, &Samples::Int(ints))
}

/// A 16-bit mono sine tone; used for fixtures.
pub fn write_tone(path: &Path, sample_rate: u32, duration_s: f64, freq_hz: f32) -> Result<()> {
    let n = (duration_s * sample_rate as f64).round() as usize;
    let samples: Vec<f32> = (0..n)
        .map(|i| 0.3 * (2.0 * std::f32::consts::PI * freq_hz * i as f32 / sample_rate as f32).sin())
        .collect();
    write_atomic(path, &encode_mono_i16(sample_rate, &samples)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_reports_known_durations() {
        let dir = tempfile::tempdir().unwrap();
        for secs in [3.0, 5.0] {
            let p = dir.path().join(format!("{secs}.wav"));
            write_tone(&p, 8_000, secs, 440.0).unwrap();
            let info = probe_wav(&p).unwrap();
            assert!((info.duration_s - secs).abs() < 0.01);
            assert_eq!(info.sample_rate_hz, 8_000);
            assert_eq!(info.channels, 1);
            assert_eq!(info.frames, (secs * 8_000.0) as u64);
        }
    }

    #[test]
    fn excerpt_duration() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.wav");
        let out = dir.path().join("out.wav");
        write_tone(&src, 16_000, 12.0, 220.0).unwrap();
        write_excerpt(&src, 2.0, 7.0, &out).unwrap();
        assert!((probe_wav(&out).unwrap().duration_s - 5.0).abs() < 0.02);
        // clamped past end
        write_excerpt(&src, 10.0, 20.0, &out).unwrap();
        assert!((probe_wav(&out).unwrap().duration_s - 2.0).abs() < 0.02);
    }

    #[test]
    fn stereo_mixdown_and_resample() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8_000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let samples: Vec<i32> = (0..800).flat_map(|_| [16_384, 0]).collect();
        write_atomic(&p, &encode_wav(spec, &Samples::Int(samples)).unwrap()).unwrap();
        let (sr, mono) = read_mono(&p).unwrap();
        assert_eq!(sr, 8_000);
        assert_eq!(mono.len(), 800);
        assert!((mono[0] - 0.25).abs() < 1e-6);
        let up = resample_linear(&mono, 8_000, 16_000);
        assert_eq!(up.len(), 1_600);
    }

    #[test]
    fn non_wav_fails_probe() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mp3");
        std::fs::write(&p, b"ID3 not a wav").unwrap();
        assert!(probe_wav(&p).is_err());
    }
}
