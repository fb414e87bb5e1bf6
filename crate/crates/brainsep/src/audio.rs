//! PCM WAV files (16-bit integer or 32-bit float, mono).

use std::path::Path;

use brainsep_core::dataio::Waveform;
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PcmFormat {
    Int16,
    #[default]
    Float32,
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Parse { path: path.to_path_buf(), line: 0, message: other.to_string() },
    }
}

/// Writes `wave` as mono PCM. 16-bit output clips to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, format: PcmFormat) -> Result<()> {
    let path = path.as_ref();
    let rate = wave.rate_hz().round();
    if (rate - wave.rate_hz()).abs() > 1e-9 || rate < 1.0 || rate > u32::MAX as f64 {
        return Err(Error::Data(format!("sample rate {} Hz cannot be stored in a WAV header", wave.rate_hz())));
    }
    let (bits, sample_format) = match format {
        PcmFormat::Int16 => (16, SampleFormat::Int),
        PcmFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec { channels: 1, sample_rate: rate as u32, bits_per_sample: bits, sample_format };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &x in wave.samples() {
        let r = match format {
            PcmFormat::Int16 => w.write_sample((x.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16),
            PcmFormat::Float32 => w.write_sample(x as f32),
        };
        r.map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

/// Reads a mono WAV file; 16-bit samples are scaled to [-1, 1].
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut r = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::Data(format!("{}: expected mono audio, found {} channels", path.display(), spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => r
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => {
            r.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(|e| wav_err(path, e))?
        }
        (f, b) => return Err(Error::Data(format!("{}: unsupported sample format {f:?} with {b} bits", path.display()))),
    };
    Ok(Waveform::new(samples, spec.sample_rate as f64)?)
}
