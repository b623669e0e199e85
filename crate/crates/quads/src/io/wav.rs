//! Minimal PCM16 mono WAV reading and writing.
//!
//! Exactly one encoding is supported: RIFF/WAVE, format tag 1 (PCM),
//! one channel, 16 bits per sample. Samples map to floats by `v / 32768`,
//! so the most negative PCM value is exactly -1.0.

use std::fs;
use std::path::Path;

use super::{io_err, IoError};

/// Reads a PCM16 mono WAV file; returns samples in `[-1, 1)` and the
/// sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32), IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let field_err = |field: &'static str, value: String| IoError::WavField {
        path: path.to_path_buf(),
        field,
        value,
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(field_err("riff_header", "not a RIFF/WAVE file".into()));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(field_err("chunk_size", format!("{size} overruns the file")));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(field_err("fmt_chunk", format!("{} bytes", body.len())));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| field_err("fmt_chunk", "missing".into()))?;
    if format != 1 {
        return Err(field_err("audio_format", format!("{format} (only PCM=1)")));
    }
    if channels != 1 {
        return Err(field_err("channels", format!("{channels} (only mono)")));
    }
    if bits != 16 {
        return Err(field_err("bits_per_sample", format!("{bits} (only 16)")));
    }
    let data = data.ok_or_else(|| field_err("data_chunk", "missing".into()))?;
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f32 / 32768.0)
        .collect();
    Ok((samples, rate))
}

/// Writes a PCM16 mono WAV file. Samples are scaled by 32768, rounded and
/// clamped to the i16 range.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<(), IoError> {
    let pcm: Vec<i16> = samples.iter().map(|&s| quantize_i16(s)).collect();
    write_wav_pcm(path, &pcm, sample_rate)
}

pub fn quantize_i16(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav_pcm(path: &Path, pcm: &[i16], sample_rate: u32) -> Result<(), IoError> {
    let data_len = (pcm.len() * 2) as u32;
    let mut buf = Vec::with_capacity(44 + data_len as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    buf.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &v in pcm {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}
