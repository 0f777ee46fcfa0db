//! Binary feature cache: one file per split, little-endian, with a content
//! hash tying the cache to its manifest and extraction parameters.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{FeatureSet, MfccConfig, SegmentConfig, UtteranceMeta};
use crate::error::{Result, SerError};

const MAGIC: &[u8; 8] = b"SERFEAT\0";
const VERSION: u8 = 1;

/// Content hash over the manifest bytes, the split name/seed, and every
/// parameter that changes the extracted features.
pub fn cache_hash(
    manifest_bytes: &[u8],
    split: &str,
    seed: u64,
    mfcc: &MfccConfig,
    seg: &SegmentConfig,
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(manifest_bytes);
    h.update(split.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(serde_json::to_vec(mfcc).expect("mfcc config serializes"));
    h.update(serde_json::to_vec(seg).expect("segment config serializes"));
    h.finalize().into()
}

pub fn write_cache(path: &Path, set: &FeatureSet, hash: &[u8; 32]) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(hash);
    out.extend_from_slice(&(set.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&(set.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(set.utterances.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.n_segments() as u32).to_le_bytes());
    for u in &set.utterances {
        let id = u.utterance_id.as_bytes();
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(u.label as u32).to_le_bytes());
        out.extend_from_slice(&(u.seg_count as u32).to_le_bytes());
    }
    for &v in &set.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SerError::Parse {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_cache(path: &Path) -> Result<(FeatureSet, [u8; 32])> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(SerError::Parse {
            offset: 0,
            detail: "bad feature-cache magic".into(),
        });
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(SerError::Parse {
            offset: 8,
            detail: format!("unsupported cache version {version} (expected {VERSION})"),
        });
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(c.take(32, "hash")?);
    let n_mels = c.u32("n_mels")? as usize;
    let n_frames = c.u32("n_frames")? as usize;
    let n_utt = c.u32("utterance count")? as usize;
    let n_seg = c.u32("segment count")? as usize;
    let mut utterances = Vec::with_capacity(n_utt);
    let mut seg_cursor = 0usize;
    for _ in 0..n_utt {
        let id_len = c.u16("utterance id length")? as usize;
        let id = String::from_utf8(c.take(id_len, "utterance id")?.to_vec()).map_err(|e| {
            SerError::Parse {
                offset: c.pos as u64,
                detail: format!("utterance id not utf-8: {e}"),
            }
        })?;
        let label = c.u32("label")? as usize;
        let seg_count = c.u32("segment count")? as usize;
        utterances.push(UtteranceMeta {
            utterance_id: id,
            label,
            seg_start: seg_cursor,
            seg_count,
        });
        seg_cursor += seg_count;
    }
    if seg_cursor != n_seg {
        return Err(SerError::Parse {
            offset: c.pos as u64,
            detail: format!("segment counts disagree: header {n_seg}, utterances {seg_cursor}"),
        });
    }
    let total = n_seg * n_mels * n_frames;
    let mut features = Vec::with_capacity(total);
    for _ in 0..total {
        features.push(c.f64("feature payload")?);
    }
    Ok((
        FeatureSet {
            n_mels,
            n_frames,
            features,
            utterances,
        },
        hash,
    ))
}
