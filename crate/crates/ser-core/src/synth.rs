//! Synthetic dataset generator: band-limited noise with class-dependent
//! spectral tilt.
//!
//! Each class colors white noise through a one-pole filter whose pole sets
//! the spectral slope (strong low-pass through strong high-pass), a cue the
//! MFCC front end separates cleanly. Useful for smoke training, chance-level
//! baselines, and demos without licensed corpora.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::features::manifest::{write_manifest, ManifestEntry};
use crate::features::wav::write_wav_mono16;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub utterances_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            utterances_per_class: 8,
            duration_s: 1.8,
            sample_rate: 16000,
            seed: 7,
        }
    }
}

/// One-pole filter pole per class, evenly spaced from strong low-pass
/// (+0.9) to strong high-pass (-0.9).
pub fn class_pole(class: usize, num_classes: usize) -> f64 {
    if num_classes <= 1 {
        return 0.0;
    }
    0.9 - 1.8 * class as f64 / (num_classes - 1) as f64
}

fn tilted_noise<R: Rng>(rng: &mut R, n: usize, pole: f64) -> Vec<f64> {
    let drive = (1.0 - pole * pole).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut prev = 0.0f64;
    let mut peak = 0.0f64;
    for _ in 0..n {
        let w: f64 = StandardNormal.sample(rng);
        let v = pole * prev + drive * w;
        prev = v;
        peak = peak.max(v.abs());
        out.push(v);
    }
    // Remove DC and leave headroom.
    let mean: f64 = out.iter().sum::<f64>() / n as f64;
    let scale = 0.6 / (peak - mean.abs()).max(1e-6);
    for v in out.iter_mut() {
        *v = (*v - mean) * scale;
    }
    out
}

/// Generate WAV files and a manifest under `dir`; returns the manifest
/// path. Deterministic for a fixed spec.
pub fn generate_dataset(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = (spec.duration_s * spec.sample_rate as f64).round() as usize;
    let mut entries = Vec::new();
    for class in 0..spec.num_classes {
        let pole = class_pole(class, spec.num_classes);
        for u in 0..spec.utterances_per_class {
            let samples = tilted_noise(&mut rng, n, pole);
            let name = format!("c{class}_u{u:03}.wav");
            write_wav_mono16(&dir.join(&name), &samples, spec.sample_rate)?;
            entries.push(ManifestEntry {
                path: PathBuf::from(&name),
                label: class,
                speaker: format!("synth{}", u % 4),
                utterance_id: format!("c{class}_u{u:03}"),
            });
        }
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
