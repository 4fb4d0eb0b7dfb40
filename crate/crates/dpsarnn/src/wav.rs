//! Mono 16 kHz WAV files, PCM 16-bit or IEEE float 32-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use dpsarnn_core::audio::{AudioBuffer, Role, SAMPLE_RATE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Codec {
    Pcm16,
    Float32,
}

#[derive(Debug, thiserror::Error)]
pub enum WavError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed WAV header: {0}")]
    Malformed(String),
    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),
    #[error("unsupported channel count {0}, only mono is accepted")]
    UnsupportedChannels(u16),
    #[error("unsupported sample rate {0} Hz, only 16000 Hz is accepted")]
    UnsupportedRate(u32),
    #[error("WAV file contains no samples")]
    Empty,
}

fn map_hound(path: &Path, e: hound::Error) -> WavError {
    match e {
        // The reader reports short reads as a custom error.
        hound::Error::IoError(source)
            if source.kind() == std::io::ErrorKind::UnexpectedEof || source.to_string().contains("enough bytes") =>
        {
            WavError::Malformed("file ends inside a header or sample".into())
        }
        hound::Error::IoError(source) => WavError::Io { path: path.display().to_string(), source },
        hound::Error::FormatError(m) => WavError::Malformed(m.to_string()),
        hound::Error::Unsupported => WavError::UnsupportedCodec("format not handled by the reader".into()),
        other => WavError::Malformed(other.to_string()),
    }
}

/// Converts an int16 code to a sample in `[-1, 1)`.
pub fn pcm16_to_sample(code: i16) -> f64 {
    code as f64 / 32768.0
}

/// Scales by 32768, rounds and clamps to the int16 range.
pub fn sample_to_pcm16(v: f64) -> i16 {
    let v = if v.is_nan() { 0.0 } else { v };
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<(AudioBuffer, Codec), WavError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| WavError::Io { path: path.display().to_string(), source })?;
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let codec = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => Codec::Pcm16,
        (hound::SampleFormat::Float, 32) => Codec::Float32,
        (fmt, bits) => return Err(WavError::UnsupportedCodec(format!("{fmt:?} {bits}-bit"))),
    };
    if spec.channels != 1 {
        return Err(WavError::UnsupportedChannels(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(WavError::UnsupportedRate(spec.sample_rate));
    }
    let samples: Vec<f64> = match codec {
        Codec::Pcm16 => reader.into_samples::<i16>().map(|s| s.map(pcm16_to_sample)).collect::<Result<_, _>>(),
        Codec::Float32 => reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>(),
    }
    .map_err(|e| map_hound(path, e))?;
    if samples.is_empty() {
        return Err(WavError::Empty);
    }
    let buf = AudioBuffer::new(samples, SAMPLE_RATE, Role::Mixture).map_err(|_| WavError::Empty)?;
    Ok((buf, codec))
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], codec: Codec) -> Result<(), WavError> {
    let path = path.as_ref();
    let io = |source| WavError::Io { path: path.display().to_string(), source };
    let (bits, fmt) = match codec {
        Codec::Pcm16 => (16, hound::SampleFormat::Int),
        Codec::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec { channels: 1, sample_rate: SAMPLE_RATE, bits_per_sample: bits, sample_format: fmt };
    let file = File::create(path).map_err(io)?;
    let mut w = hound::WavWriter::new(BufWriter::new(file), spec).map_err(|e| map_hound(path, e))?;
    for &v in samples {
        match codec {
            Codec::Pcm16 => w.write_sample(sample_to_pcm16(v)),
            Codec::Float32 => w.write_sample(v as f32),
        }
        .map_err(|e| map_hound(path, e))?;
    }
    w.finalize().map_err(|e| map_hound(path, e))
}
