use super::AudioBuffer;
use crate::error::{invalid, Result};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use std::path::Path;

/// Reads a mono WAV file (16-bit PCM or 32-bit float). When
/// `expected_rate` is given, any other rate is an error; there is no
/// resampling.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return invalid(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        ));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return invalid(format!(
                "{}: sample rate {} Hz, expected {rate} Hz (resampling is not supported)",
                path.display(),
                spec.sample_rate
            ));
        }
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return invalid(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bits",
                path.display()
            ))
        }
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes 32-bit float mono WAV.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &audio.samples {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let audio = AudioBuffer::new(vec![0.0, 0.25, -0.125, 0.999], 16_000).unwrap();
        write_wav(&path, &audio).unwrap();
        assert_eq!(read_wav(&path, Some(16_000)).unwrap(), audio);
    }

    #[test]
    fn pcm16_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&path, Some(16_000)).is_err());
        let a = read_wav(&path, None).unwrap();
        assert_eq!(a.samples, vec![0.5]);
    }
}
