//! Minimal WAV I/O for the one format the engine accepts: PCM16, mono, 16 kHz.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Convert one PCM16 sample to the [-1, 1) float range used everywhere else.
pub fn pcm16_to_f32(s: i16) -> f32 {
    f32::from(s) / 32768.0
}

/// Quantize a float sample to PCM16, clamping out-of-range values.
pub fn f32_to_pcm16(x: f32) -> i16 {
    (x.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// Write a canonical 44-byte-header PCM16 mono WAV file.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + data_len as usize);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        bytes.extend_from_slice(&f32_to_pcm16(s).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a PCM16 mono WAV file, returning samples in [-1, 1) and the sample rate.
///
/// Multi-channel, compressed, or non-16-bit files are rejected rather than
/// converted; resampling is out of scope.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|msg| Error::Data(format!("{}: {}", path.display(), msg)))
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<(Vec<f32>, u32), String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + len;
        if body_end > bytes.len() {
            return Err(format!("chunk {:?} overruns file", String::from_utf8_lossy(id)));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err("fmt chunk too short".into());
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
        // Chunks are word-aligned.
        pos = body_end + (len & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or("missing fmt chunk")?;
    let data = data.ok_or("missing data chunk")?;
    if format != 1 {
        return Err(format!("unsupported audio format {format} (want PCM)"));
    }
    if channels != 1 {
        return Err(format!("unsupported channel count {channels} (want mono)"));
    }
    if bits != 16 {
        return Err(format!("unsupported bit depth {bits} (want 16)"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| pcm16_to_f32(i16::from_le_bytes([c[0], c[1]])))
        .collect();
    Ok((samples, rate))
}

/// Decode raw PCM16 little-endian bytes (e.g. from standard input).
pub fn pcm16_bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(2)
        .map(|c| pcm16_to_f32(i16::from_le_bytes([c[0], c[1]])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f32> = (0..1600).map(|i| (i as f32 / 200.0).sin() * 0.5).collect();
        write_wav(&path, &samples, 16_000).unwrap();
        let (back, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 16_000);
        assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32000.0, "quantization error too large");
        }
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f32> = vec![0.0; 100];
        write_wav(&path, &samples, 16_000).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[22] = 2; // channel count
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(read_wav(&path).is_err());
    }
}
