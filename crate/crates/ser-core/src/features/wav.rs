//! Minimal PCM WAV reader/writer.
//!
//! Reads 16-bit signed PCM, mono or first channel of multichannel, skipping
//! unknown RIFF chunks. Samples are normalized by 1/32768.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, SerError, WavError};

#[derive(Debug)]
pub struct WavData {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> std::result::Result<&'a [u8], WavError> {
    if *pos + n > buf.len() {
        return Err(WavError::UnexpectedEof);
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn u16_le(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Parse a WAV byte buffer into normalized samples.
pub fn parse_wav(bytes: &[u8]) -> std::result::Result<WavData, WavError> {
    let mut pos = 0usize;
    if take(bytes, &mut pos, 4)? != b"RIFF" {
        return Err(WavError::BadRiffHeader);
    }
    let _riff_size = u32_le(take(bytes, &mut pos, 4)?);
    if take(bytes, &mut pos, 4)? != b"WAVE" {
        return Err(WavError::NotWave);
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = take(bytes, &mut pos, 4)?.to_owned();
        let size = u32_le(take(bytes, &mut pos, 4)?) as usize;
        let body = take(bytes, &mut pos, size)?;
        match id.as_slice() {
            b"fmt " => {
                if size < 16 {
                    return Err(WavError::MissingFmt);
                }
                fmt = Some((
                    u16_le(&body[0..2]),
                    u16_le(&body[2..4]),
                    u32_le(&body[4..8]),
                    u16_le(&body[14..16]),
                ));
            }
            b"data" => data = Some(body),
            _ => {} // LIST, fact, etc.
        }
        // Chunks are word-aligned.
        if size % 2 == 1 && pos < bytes.len() {
            pos += 1;
        }
    }

    let (format, channels, rate, bits) = fmt.ok_or(WavError::MissingFmt)?;
    if format != 1 || bits != 16 {
        return Err(WavError::UnsupportedCodec { format, bits });
    }
    let data = data.ok_or(WavError::MissingData)?;
    if data.is_empty() {
        return Err(WavError::EmptyAudio);
    }
    let channels = channels.max(1) as usize;
    let frame_bytes = channels * 2;
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(WavError::EmptyAudio);
    }
    let mut samples = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let off = f * frame_bytes; // first channel only
        let v = i16::from_le_bytes([data[off], data[off + 1]]);
        samples.push(v as f64 / 32768.0);
    }
    Ok(WavData {
        samples,
        sample_rate: rate,
    })
}

/// Load a WAV file, requiring a 16 kHz rate (files at other rates are
/// rejected rather than resampled).
pub fn load_wav(path: &Path) -> Result<WavData> {
    let bytes = std::fs::read(path)
        .map_err(|e| SerError::Data(format!("cannot read {}: {e}", path.display())))?;
    let wav = parse_wav(&bytes)?;
    if wav.sample_rate != 16000 {
        return Err(WavError::BadSampleRate(wav.sample_rate).into());
    }
    Ok(wav)
}

/// Write mono 16-bit PCM. Input samples are clamped to [-1, 1] and rounded
/// to the nearest quantization level.
pub fn write_wav_mono16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let mut pcm = Vec::with_capacity(samples.len() * 2);
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        pcm.extend_from_slice(&v.to_le_bytes());
    }
    let data_len = pcm.len() as u32;
    let byte_rate = sample_rate * 2;
    let mut out = Vec::with_capacity(44 + pcm.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.extend_from_slice(&pcm);

    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}
