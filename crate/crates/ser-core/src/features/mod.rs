//! WAV ingestion, fixed-length segmentation with loop filling, MFCC
//! extraction, and per-coefficient standardization.

pub mod cache;
pub mod manifest;
pub mod mfcc;
pub mod wav;

pub use mfcc::{MfccConfig, MfccExtractor};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};

/// A labeled recording at 16 kHz.
pub struct Utterance {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: usize,
    pub speaker_id: String,
    pub utterance_id: String,
}

impl Utterance {
    pub fn load(path: &Path, label: usize, speaker_id: &str, utterance_id: &str) -> Result<Self> {
        let wav = wav::load_wav(path)?;
        Ok(Utterance {
            samples: wav.samples,
            sample_rate: wav.sample_rate,
            label,
            speaker_id: speaker_id.to_string(),
            utterance_id: utterance_id.to_string(),
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Segmentation window and hop, in seconds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SegmentConfig {
    pub win_s: f64,
    pub hop_s: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        // 1.8 s windows with 1.6 s overlap.
        SegmentConfig {
            win_s: 1.8,
            hop_s: 0.2,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.win_s > self.hop_s && self.hop_s > 0.0) {
            return Err(SerError::Config(format!(
                "segmentation requires win_s > hop_s > 0, got {} / {}",
                self.win_s, self.hop_s
            )));
        }
        Ok(())
    }
}

/// Cut an utterance into fixed-length windows. Utterances at least one
/// window long yield `floor((len - win) / hop) + 1` windows starting at
/// multiples of the hop; shorter ones are tiled cyclically (loop filling)
/// into exactly one window.
pub fn segment_samples(
    samples: &[f64],
    sample_rate: u32,
    cfg: &SegmentConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(SerError::Data("cannot segment an empty utterance".into()));
    }
    let win = (cfg.win_s * sample_rate as f64).round() as usize;
    let hop = (cfg.hop_s * sample_rate as f64).round() as usize;
    if samples.len() >= win {
        let count = (samples.len() - win) / hop + 1;
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            out.push(samples[i * hop..i * hop + win].to_vec());
        }
        Ok(out)
    } else {
        let mut w = Vec::with_capacity(win);
        for i in 0..win {
            w.push(samples[i % samples.len()]);
        }
        Ok(vec![w])
    }
}

/// Per-coefficient standardization statistics, computed on the training
/// split only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Mean and std per coefficient over every frame of every segment.
    pub fn compute(features: &[f64], n_mels: usize, n_frames: usize) -> Result<NormStats> {
        if features.is_empty() {
            return Err(SerError::Data(
                "normalization statistics requested on an empty split".into(),
            ));
        }
        let seg_len = n_mels * n_frames;
        debug_assert_eq!(features.len() % seg_len, 0);
        let n_seg = features.len() / seg_len;
        let count = (n_seg * n_frames) as f64;
        let mut mean = vec![0.0; n_mels];
        let mut sq = vec![0.0; n_mels];
        for s in 0..n_seg {
            for c in 0..n_mels {
                let row = &features[s * seg_len + c * n_frames..s * seg_len + (c + 1) * n_frames];
                for &v in row {
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let mut std = vec![0.0; n_mels];
        for c in 0..n_mels {
            mean[c] /= count;
            let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt().max(STD_FLOOR);
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, features: &mut [f64], n_mels: usize, n_frames: usize) {
        let seg_len = n_mels * n_frames;
        for seg in features.chunks_mut(seg_len) {
            for c in 0..n_mels {
                let (m, s) = (self.mean[c], self.std[c]);
                for v in seg[c * n_frames..(c + 1) * n_frames].iter_mut() {
                    *v = (*v - m) / s;
                }
            }
        }
    }

    pub fn denormalize(&self, features: &mut [f64], n_mels: usize, n_frames: usize) {
        let seg_len = n_mels * n_frames;
        for seg in features.chunks_mut(seg_len) {
            for c in 0..n_mels {
                let (m, s) = (self.mean[c], self.std[c]);
                for v in seg[c * n_frames..(c + 1) * n_frames].iter_mut() {
                    *v = *v * s + m;
                }
            }
        }
    }
}

/// Utterance-level bookkeeping inside a [`FeatureSet`]: which contiguous
/// run of segments belongs to which recording.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceMeta {
    pub utterance_id: String,
    pub label: usize,
    pub seg_start: usize,
    pub seg_count: usize,
}

/// Extracted MFCC segments for one dataset split, in a stable utterance
/// order. Raw (unnormalized) coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub n_mels: usize,
    pub n_frames: usize,
    /// `[n_segments, n_mels, n_frames]`, row-major.
    pub features: Vec<f64>,
    pub utterances: Vec<UtteranceMeta>,
}

impl FeatureSet {
    pub fn n_segments(&self) -> usize {
        if self.n_mels * self.n_frames == 0 {
            0
        } else {
            self.features.len() / (self.n_mels * self.n_frames)
        }
    }

    /// Per-segment label, inherited from the parent utterance.
    pub fn segment_labels(&self) -> Vec<usize> {
        let mut labels = vec![0usize; self.n_segments()];
        for u in &self.utterances {
            for s in u.seg_start..u.seg_start + u.seg_count {
                labels[s] = u.label;
            }
        }
        labels
    }

    pub fn segment(&self, idx: usize) -> &[f64] {
        let len = self.n_mels * self.n_frames;
        &self.features[idx * len..(idx + 1) * len]
    }
}

/// Extract features for a list of manifest entries. Utterances are processed
/// in a stable sort order (by utterance id) so the result is independent of
/// `threads`.
pub fn extract_features(
    entries: &[manifest::ManifestEntry],
    mfcc_cfg: &MfccConfig,
    seg_cfg: &SegmentConfig,
    threads: usize,
) -> Result<FeatureSet> {
    seg_cfg.validate()?;
    let mut sorted: Vec<&manifest::ManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));

    let extractor = MfccExtractor::new(mfcc_cfg.clone())?;
    let win_len = (seg_cfg.win_s * mfcc_cfg.sample_rate as f64).round() as usize;
    let n_frames = mfcc_cfg.n_frames(win_len)?;
    let n_mels = mfcc_cfg.n_mels;

    type UttResult = Result<(Vec<f64>, usize)>; // features, segment count
    let one = |entry: &manifest::ManifestEntry| -> UttResult {
        let utt = Utterance::load(&entry.path, entry.label, &entry.speaker, &entry.utterance_id)
            .map_err(|e| SerError::Data(format!("{}: {e}", entry.path.display())))?;
        let windows = segment_samples(&utt.samples, utt.sample_rate, seg_cfg)?;
        let mut feats = Vec::with_capacity(windows.len() * n_mels * n_frames);
        for w in &windows {
            let (m, frames) = extractor.extract(w)?;
            debug_assert_eq!(frames, n_frames);
            feats.extend_from_slice(&m);
        }
        Ok((feats, windows.len()))
    };

    let results: Vec<UttResult> = if threads <= 1 {
        sorted.iter().map(|e| one(e)).collect()
    } else {
        // Contiguous chunks per worker, merged back in index order.
        let mut slots: Vec<Option<UttResult>> = (0..sorted.len()).map(|_| None).collect();
        let chunk = sorted.len().div_ceil(threads).max(1);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (w, chunk_entries) in sorted.chunks(chunk).enumerate() {
                let one_ref = &one;
                handles.push((
                    w * chunk,
                    scope.spawn(move || {
                        chunk_entries.iter().map(|e| one_ref(e)).collect::<Vec<_>>()
                    }),
                ));
            }
            for (base, h) in handles {
                for (i, r) in h.join().expect("worker panicked").into_iter().enumerate() {
                    slots[base + i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("slot filled")).collect()
    };

    let mut features = Vec::new();
    let mut utterances = Vec::new();
    let mut seg_cursor = 0usize;
    for (entry, result) in sorted.iter().zip(results) {
        let (feats, count) = result?;
        features.extend_from_slice(&feats);
        utterances.push(UtteranceMeta {
            utterance_id: entry.utterance_id.clone(),
            label: entry.label,
            seg_start: seg_cursor,
            seg_count: count,
        });
        seg_cursor += count;
    }
    Ok(FeatureSet {
        n_mels,
        n_frames,
        features,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_count_three_seconds() {
        let samples = vec![0.1; 48000]; // 3.0 s at 16 kHz
        let windows = segment_samples(&samples, 16000, &SegmentConfig::default()).unwrap();
        assert_eq!(windows.len(), 7); // floor((3.0 - 1.8) / 0.2) + 1
        for w in &windows {
            assert_eq!(w.len(), 28800);
        }
    }

    #[test]
    fn segment_boundary_exactly_one_window() {
        let samples = vec![0.5; 28800]; // exactly 1.8 s
        let windows = segment_samples(&samples, 16000, &SegmentConfig::default()).unwrap();
        assert_eq!(windows.len(), 1);
    }

    #[test]
    fn loop_fill_index_arithmetic() {
        // 1.0 s utterance tiles to one 1.8 s window with w[i] = u[i % 16000].
        let samples: Vec<f64> = (0..16000).map(|i| (i as f64 * 1e-3).sin()).collect();
        let windows = segment_samples(&samples, 16000, &SegmentConfig::default()).unwrap();
        assert_eq!(windows.len(), 1);
        let w = &windows[0];
        assert_eq!(w.len(), 28800);
        for (i, &v) in w.iter().enumerate() {
            assert_eq!(v, samples[i % 16000], "index {i}");
        }
    }

    #[test]
    fn loop_fill_is_periodic_with_source_length() {
        let samples: Vec<f64> = (0..5000).map(|i| (i as f64).cos()).collect();
        let windows = segment_samples(&samples, 16000, &SegmentConfig::default()).unwrap();
        let w = &windows[0];
        for i in 0..w.len() - 5000 {
            assert_eq!(w[i], w[i + 5000]);
        }
    }

    #[test]
    fn segment_rejects_empty() {
        assert!(segment_samples(&[], 16000, &SegmentConfig::default()).is_err());
    }

    #[test]
    fn segment_count_formula_sweep() {
        let cfg = SegmentConfig::default();
        for tenths in 1..=100 {
            let dur_s = tenths as f64 / 10.0;
            let n = (dur_s * 16000.0).round() as usize;
            let samples = vec![0.0; n];
            let windows = segment_samples(&samples, 16000, &cfg).unwrap();
            let expect = if n >= 28800 { (n - 28800) / 3200 + 1 } else { 1 };
            assert_eq!(windows.len(), expect, "duration {dur_s}");
        }
    }

    #[test]
    fn normalization_zero_mean_and_roundtrip() {
        let n_mels = 3;
        let n_frames = 4;
        let mut features: Vec<f64> = (0..2 * n_mels * n_frames)
            .map(|i| (i as f64 * 0.7).sin() * 3.0 + i as f64 * 0.01)
            .collect();
        let original = features.clone();
        let stats = NormStats::compute(&features, n_mels, n_frames).unwrap();
        stats.normalize(&mut features, n_mels, n_frames);
        // Per-coefficient mean ~ 0 on the split the stats came from.
        for c in 0..n_mels {
            let mut m = 0.0;
            for s in 0..2 {
                for t in 0..n_frames {
                    m += features[s * n_mels * n_frames + c * n_frames + t];
                }
            }
            m /= (2 * n_frames) as f64;
            assert!(m.abs() < 1e-6, "coef {c} mean {m}");
        }
        stats.denormalize(&mut features, n_mels, n_frames);
        for (a, b) in features.iter().zip(&original) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_coefficient_normalizes_to_zero() {
        let n_mels = 2;
        let n_frames = 3;
        // Coefficient 0 constant, coefficient 1 varying.
        let mut features = vec![5.0, 5.0, 5.0, 1.0, 2.0, 3.0];
        let stats = NormStats::compute(&features, n_mels, n_frames).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        stats.normalize(&mut features, n_mels, n_frames);
        assert!(features[..3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stats_on_empty_split_error() {
        assert!(NormStats::compute(&[], 3, 4).is_err());
    }
}
