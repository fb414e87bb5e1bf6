//! EEG matrix files: a text header line `channels,time,rate` followed by
//! `channels × time` little-endian 32-bit floats in row-major order.

use std::fs;
use std::path::Path;

use brainsep_core::tensor::Tensor;

use crate::error::{Error, Result};

/// EEG samples and their sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct EegMatrix {
    pub data: Tensor,
    pub rate_hz: f64,
}

pub fn encode_eeg(m: &EegMatrix) -> Vec<u8> {
    let mut out = format!("{},{},{}\n", m.data.rows(), m.data.cols(), m.rate_hz).into_bytes();
    out.reserve(4 * m.data.len());
    for &v in m.data.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_eeg(bytes: &[u8], origin: &Path) -> Result<EegMatrix> {
    let bad = |message: String| Error::Parse { path: origin.to_path_buf(), line: 1, message };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text".into()))?;
    let fields: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let [c, t, r] = fields.as_slice() else {
        return Err(bad(format!("expected channels,time,rate, found {header:?}")));
    };
    let channels: usize = c.parse().map_err(|_| bad(format!("invalid channel count {c:?}")))?;
    let time: usize = t.parse().map_err(|_| bad(format!("invalid sample count {t:?}")))?;
    let rate_hz: f64 = r.parse().map_err(|_| bad(format!("invalid rate {r:?}")))?;
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(bad(format!("rate must be positive, found {rate_hz}")));
    }
    let body = &bytes[nl + 1..];
    let expected = channels.checked_mul(time).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad("header overflows".into()))?;
    if body.len() != expected {
        return Err(Error::Data(format!(
            "{}: header announces {expected} data bytes, found {}",
            origin.display(),
            body.len()
        )));
    }
    let values: Vec<f64> = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite EEG sample", origin.display())));
    }
    Ok(EegMatrix { data: Tensor::from_vec(channels, time, values), rate_hz })
}

pub fn write_eeg(path: impl AsRef<Path>, m: &EegMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_eeg(m)).map_err(|e| Error::io(path, e))
}

pub fn read_eeg(path: impl AsRef<Path>) -> Result<EegMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_eeg(&bytes, path)
}
