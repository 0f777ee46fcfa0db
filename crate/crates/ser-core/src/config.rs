//! Run configuration (TOML) and ablation presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};
use crate::features::{MfccConfig, SegmentConfig};
use crate::lct::LlcMode;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Everything needed to rebuild the pipeline from a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunRecipe {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mfcc: MfccConfig,
    pub segment: SegmentConfig,
    pub metrics_acc_as_precision: bool,
}

/// Declarative run configuration, read from TOML.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mfcc: MfccConfig,
    pub segment: SegmentConfig,
    pub metrics_acc_as_precision: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::from("manifest.csv"),
            cache_dir: None,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mfcc: MfccConfig::default(),
            segment: SegmentConfig::default(),
            metrics_acc_as_precision: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SerError::Data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| SerError::Data(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Model config with the feature-derived input geometry filled in.
    pub fn resolved_model(&self) -> Result<ModelConfig> {
        let win_len = (self.segment.win_s * self.mfcc.sample_rate as f64).round() as usize;
        let n_frames = self.mfcc.n_frames(win_len)?;
        let mut model = self.model.clone();
        model.n_mels = self.mfcc.n_mels;
        model.n_frames = n_frames;
        model.validate()?;
        Ok(model)
    }

    pub fn recipe(&self) -> Result<RunRecipe> {
        Ok(RunRecipe {
            model: self.resolved_model()?,
            train: self.train.clone(),
            mfcc: self.mfcc.clone(),
            segment: self.segment.clone(),
            metrics_acc_as_precision: self.metrics_acc_as_precision,
        })
    }

    /// Cache directory resolution: explicit config > `SER_CACHE_DIR`
    /// environment variable > `<out_dir>/cache`.
    pub fn effective_cache_dir(&self) -> PathBuf {
        if let Some(dir) = &self.cache_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var("SER_CACHE_DIR") {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        self.out_dir.join("cache")
    }
}

/// Ablation presets (each alters exactly the switches of its experiment
/// row) plus the `tiny` scale preset for CPU-sized smoke runs.
pub const ABLATION_PRESETS: &[&str] = &[
    "wo_tsa",
    "wo_lstm_attention",
    "wo_lct",
    "w_conv_lct",
    "wo_ca",
    "wo_se",
];

pub fn apply_preset(model: &mut ModelConfig, name: &str) -> Result<()> {
    match name {
        "full" => {}
        "wo_tsa" => model.tsa.enabled = false,
        "wo_lstm_attention" => model.tsa.timing_enabled = false,
        "wo_lct" => model.lct.num_blocks = 0,
        "w_conv_lct" => model.lct.llc_mode = LlcMode::Conv3x3,
        "wo_ca" => model.lct.ca_enabled = false,
        "wo_se" => model.lct.se_enabled = false,
        "tiny" => {
            *model = crate::model::tiny_config(model.num_classes, model.n_mels, model.n_frames);
        }
        other => {
            return Err(SerError::Config(format!(
                "unknown preset `{other}` (expected one of full, tiny, {})",
                ABLATION_PRESETS.join(", ")
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_partial_parse() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);

        // Partial config: only a manifest path.
        let partial: RunConfig = toml::from_str("manifest = \"x.csv\"").unwrap();
        assert_eq!(partial.manifest, PathBuf::from("x.csv"));
        assert_eq!(partial.train, TrainConfig::default());
    }

    #[test]
    fn presets_touch_only_their_switches() {
        let base = ModelConfig::default();
        for &name in ABLATION_PRESETS {
            let mut m = base.clone();
            apply_preset(&mut m, name).unwrap();
            let mut diffs = Vec::new();
            if m.tsa.enabled != base.tsa.enabled {
                diffs.push("tsa.enabled");
            }
            if m.tsa.timing_enabled != base.tsa.timing_enabled {
                diffs.push("tsa.timing_enabled");
            }
            if m.lct.num_blocks != base.lct.num_blocks {
                diffs.push("lct.num_blocks");
            }
            if m.lct.llc_mode != base.lct.llc_mode {
                diffs.push("lct.llc_mode");
            }
            if m.lct.ca_enabled != base.lct.ca_enabled {
                diffs.push("lct.ca_enabled");
            }
            if m.lct.se_enabled != base.lct.se_enabled {
                diffs.push("lct.se_enabled");
            }
            assert_eq!(diffs.len(), 1, "preset {name} changed {diffs:?}");
            // Everything else identical.
            assert_eq!(m.cnn_stem, base.cnn_stem);
            assert_eq!(m.trunk_channels, base.trunk_channels);
            assert_eq!(m.num_classes, base.num_classes);
        }
        let mut bad = base.clone();
        assert!(apply_preset(&mut bad, "nope").is_err());
    }

    #[test]
    fn resolved_model_fills_frame_geometry() {
        let cfg = RunConfig::default();
        let model = cfg.resolved_model().unwrap();
        assert_eq!(model.n_mels, 26);
        // 1.8 s in 25 ms / 10 ms framing.
        assert_eq!(model.n_frames, 178);
    }

    #[test]
    fn cache_dir_resolution_order() {
        let mut cfg = RunConfig::default();
        cfg.out_dir = PathBuf::from("/tmp/run");
        cfg.cache_dir = Some(PathBuf::from("/explicit"));
        assert_eq!(cfg.effective_cache_dir(), PathBuf::from("/explicit"));
        cfg.cache_dir = None;
        // Without the env var set, fall back to out_dir/cache.
        if std::env::var("SER_CACHE_DIR").is_err() {
            assert_eq!(cfg.effective_cache_dir(), PathBuf::from("/tmp/run/cache"));
        }
    }
}
