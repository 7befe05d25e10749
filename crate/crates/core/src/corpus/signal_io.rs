//! Binary signal container.
//!
//! Layout (little-endian): magic `ECG1`, `u32` num_leads, `u32` num_samples,
//! `u32` sampling_rate_hz, then `num_leads * num_samples` `f32` values,
//! lead-major.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{MerlError, Result};

pub const SIGNAL_MAGIC: &[u8; 4] = b"ECG1";
const HEADER_LEN: usize = 16;
const DEFAULT_CSV_RATE_HZ: u32 = 500;

pub fn write_signal(path: &Path, signal: &Array2<f32>, sampling_rate_hz: u32) -> Result<()> {
    let (leads, samples) = signal.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * leads * samples);
    buf.extend_from_slice(SIGNAL_MAGIC);
    buf.extend_from_slice(&(leads as u32).to_le_bytes());
    buf.extend_from_slice(&(samples as u32).to_le_bytes());
    buf.extend_from_slice(&sampling_rate_hz.to_le_bytes());
    for v in signal.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| MerlError::io(path, e))?;
    f.write_all(&buf).map_err(|e| MerlError::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> MerlError {
    MerlError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Reads a signal file, dispatching on extension: `.csv` uses the text
/// fallback, anything else the binary container.
pub fn read_signal(path: &Path) -> Result<(Array2<f32>, u32)> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return read_signal_csv(path);
    }
    let bytes = fs::read(path).map_err(|e| MerlError::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != SIGNAL_MAGIC {
        return Err(parse_err(path, 0, "missing ECG1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (leads, samples, rate) = (word(1) as usize, word(2) as usize, word(3));
    let expected = HEADER_LEN + 4 * leads * samples;
    if bytes.len() != expected {
        return Err(parse_err(
            path,
            0,
            format!("payload is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let signal = Array2::from_shape_vec((leads, samples), values)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok((signal, rate))
}

/// Text fallback: one lead per row, comma-separated. An optional first line
/// `# sampling_rate_hz=<n>` sets the rate (default 500 Hz). `nan`/`inf` are
/// accepted so defective recordings can be expressed.
pub fn read_signal_csv(path: &Path) -> Result<(Array2<f32>, u32)> {
    let file = fs::File::open(path).map_err(|e| MerlError::io(path, e))?;
    let mut rate = DEFAULT_CSV_RATE_HZ;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MerlError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some(v) = meta.trim().strip_prefix("sampling_rate_hz=") {
                rate = v
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(path, n + 1, format!("bad sampling rate {v:?}")))?;
            }
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f32>()
                    .map_err(|_| parse_err(path, n + 1, format!("bad sample {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    path,
                    n + 1,
                    format!("lead has {} samples, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "no leads"));
    }
    let samples = rows[0].len();
    let signal = Array2::from_shape_vec((rows.len(), samples), rows.concat())
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok((signal, rate))
}
