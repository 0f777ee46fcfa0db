//! Command implementations behind the `ser` binary.
//!
//! Each command is an ordinary function returning `Result`, so integration
//! tests can drive them in-process; `main` only parses arguments and maps
//! errors to exit codes (0 ok, 1 usage, 2 data, 3 numeric abort).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ser_core::checkpoint::Checkpoint;
use ser_core::config::{apply_preset, RunConfig, RunRecipe};
use ser_core::error::{Result, SerError};
use ser_core::features::cache::{cache_hash, read_cache, write_cache};
use ser_core::features::manifest::{read_manifest, split_80_20, write_manifest, ManifestEntry};
use ser_core::features::{extract_features, FeatureSet, NormStats};
use ser_core::model::SerModel;
use ser_core::synth::{generate_dataset, SynthSpec};
use ser_core::training::{evaluate_with_convention, train_epoch, Adam, AdamConfig, MetricsReport, PreparedData};

/// Element type used for training and inference from the CLI.
pub type TrainElem = f32;

#[derive(Debug, Clone, Serialize)]
pub struct SplitSummary {
    pub split: String,
    pub utterances: usize,
    pub segments: usize,
    pub segments_per_class: BTreeMap<usize, usize>,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeatureSummary {
    pub splits: Vec<SplitSummary>,
    pub total_segments: usize,
}

fn split_summary(name: &str, set: &FeatureSet, cache_hit: bool) -> SplitSummary {
    let mut per_class = BTreeMap::new();
    for u in &set.utterances {
        *per_class.entry(u.label).or_insert(0) += u.seg_count;
    }
    SplitSummary {
        split: name.to_string(),
        utterances: set.utterances.len(),
        segments: set.n_segments(),
        segments_per_class: per_class,
        cache_hit,
    }
}

/// Extract (or reuse) the per-split feature caches for a manifest.
/// Returns the train and test sets plus cache-hit flags.
pub fn ensure_features(
    cfg: &RunConfig,
    manifest_path: &Path,
    seed: u64,
    threads: usize,
) -> Result<(FeatureSet, FeatureSet, FeatureSummary)> {
    let manifest_bytes = std::fs::read(manifest_path)
        .map_err(|e| SerError::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let entries = read_manifest(manifest_path, cfg.model.num_classes)?;
    let (train_entries, test_entries) = split_80_20(&entries, seed);

    let cache_dir = cfg.effective_cache_dir();
    std::fs::create_dir_all(&cache_dir)?;

    let load_split = |name: &str, split: &[ManifestEntry]| -> Result<(FeatureSet, bool)> {
        let hash = cache_hash(&manifest_bytes, name, seed, &cfg.mfcc, &cfg.segment);
        let cache_path = cache_dir.join(format!("{name}.features"));
        if cache_path.exists() {
            if let Ok((set, stored)) = read_cache(&cache_path) {
                if stored == hash {
                    return Ok((set, true));
                }
            }
        }
        if split.is_empty() {
            return Err(SerError::Data(format!(
                "split `{name}` is empty; need more utterances"
            )));
        }
        let set = extract_features(split, &cfg.mfcc, &cfg.segment, threads)?;
        write_cache(&cache_path, &set, &hash)?;
        write_manifest(&cache_dir.join(format!("{name}_manifest.csv")), split)?;
        Ok((set, false))
    };

    let (train_set, train_hit) = load_split("train", &train_entries)?;
    let (test_set, test_hit) = load_split("test", &test_entries)?;
    let summary = FeatureSummary {
        total_segments: train_set.n_segments() + test_set.n_segments(),
        splits: vec![
            split_summary("train", &train_set, train_hit),
            split_summary("test", &test_set, test_hit),
        ],
    };
    Ok((train_set, test_set, summary))
}

/// `ser features`: build per-split caches and a summary report.
pub fn cmd_features(
    cfg: &RunConfig,
    manifest: &Path,
    out_dir: &Path,
    seed: u64,
    threads: usize,
) -> Result<FeatureSummary> {
    std::fs::create_dir_all(out_dir)?;
    let (_, _, summary) = ensure_features(cfg, manifest, seed, threads)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(out_dir.join("features_summary.json"), &json)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLogLine {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub lambda_mean: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub val_wa: f64,
    pub val_ua: f64,
}

pub struct TrainOutcome {
    pub best_ua: f64,
    pub final_ua: f64,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub log_path: PathBuf,
    pub epochs_run: usize,
}

/// `ser train`: run (or resume) the full loop, emitting a JSONL log,
/// per-epoch held-out metrics, and best/last checkpoints.
pub fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    threads: usize,
) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let recipe = cfg.recipe()?;
    let seed = cfg.train.seed;

    let (train_set, test_set, _) = ensure_features(cfg, &cfg.manifest, seed, threads)?;

    // Model, optimizer, RNG, and normalization stats: fresh or restored.
    let (model, mut adam, mut rng, stats, start_epoch, mut best_ua, recipe) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<TrainElem>::load(path)?;
            let model = ckpt.build_model()?;
            let adam = ckpt.build_optimizer(&model)?.ok_or_else(|| {
                SerError::Data("checkpoint has no optimizer state; cannot resume".into())
            })?;
            let stats = ckpt.norm_stats.clone().ok_or_else(|| {
                SerError::Data("checkpoint has no normalization stats".into())
            })?;
            let rng = ckpt.build_rng();
            let recipe = ckpt.recipe.clone();
            (model, adam, rng, stats, ckpt.epoch as usize, ckpt.best_ua, recipe)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = SerModel::<TrainElem>::new(&mut rng, &recipe.model)?;
            let params = model.parameters()?;
            let adam = Adam::new(
                AdamConfig {
                    weight_decay: recipe.train.weight_decay,
                    ..AdamConfig::default()
                },
                &params,
            );
            let stats = NormStats::compute(&train_set.features, train_set.n_mels, train_set.n_frames)?;
            (model, adam, rng, stats, 0usize, -1.0f64, recipe)
        }
    };

    let train_data = PreparedData::<TrainElem>::new(&train_set, &stats, recipe.model.num_classes)?;

    let log_path = out_dir.join("training_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    let mut final_ua = 0.0;
    let mut epochs_run = 0usize;
    for epoch in start_epoch..recipe.train.epochs {
        let stats_epoch = match train_epoch(&model, &mut adam, &train_data, &recipe.train, epoch, &mut rng) {
            Ok(s) => s,
            Err(e @ SerError::NonFiniteLoss { .. }) => {
                // Save a diagnostics snapshot before aborting.
                let diag = Checkpoint::capture(
                    &recipe, &model, Some(&stats), Some(&adam), &rng, epoch as u32, best_ua,
                )?;
                diag.save(&out_dir.join("diagnostics.ckpt"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let (report, _) = evaluate_with_convention(
            &model,
            &test_set,
            &stats,
            recipe.model.num_classes,
            recipe.train.batch_size,
            recipe.metrics_acc_as_precision,
        )?;
        final_ua = report.ua;
        let line = EpochLogLine {
            epoch,
            loss: stats_epoch.loss,
            lr: stats_epoch.lr,
            lambda_mean: stats_epoch.lambda_mean,
            lambda_min: stats_epoch.lambda_min,
            lambda_max: stats_epoch.lambda_max,
            val_wa: report.wa,
            val_ua: report.ua,
        };
        writeln!(log, "{}", serde_json::to_string(&line).expect("log line serializes"))?;

        let snapshot = Checkpoint::capture(
            &recipe,
            &model,
            Some(&stats),
            Some(&adam),
            &rng,
            (epoch + 1) as u32,
            best_ua.max(report.ua),
        )?;
        if report.ua > best_ua {
            best_ua = report.ua;
            snapshot.save(&best_path)?;
        }
        snapshot.save(&last_path)?;
        epochs_run += 1;
    }
    Ok(TrainOutcome {
        best_ua,
        final_ua,
        best_path,
        last_path,
        log_path,
        epochs_run,
    })
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub metrics_json: PathBuf,
    pub metrics_csv: PathBuf,
    pub confusion_csv: PathBuf,
}

/// `ser eval`: score a manifest with a checkpoint, writing metrics files.
pub fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    out_dir: &Path,
    threads: usize,
) -> Result<EvalOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let ckpt = Checkpoint::<TrainElem>::load(checkpoint)?;
    let model = ckpt.build_model()?;
    let stats = ckpt
        .norm_stats
        .clone()
        .ok_or_else(|| SerError::Data("checkpoint has no normalization stats".into()))?;
    let recipe = &ckpt.recipe;

    // Label range check doubles as the class-count mismatch guard.
    let entries = read_manifest(manifest, recipe.model.num_classes).map_err(|e| {
        SerError::Data(format!(
            "manifest does not match the checkpoint's {}-class model: {e}",
            recipe.model.num_classes
        ))
    })?;
    let set = extract_features(&entries, &recipe.mfcc, &recipe.segment, threads)?;
    let (report, _) = evaluate_with_convention(
        &model,
        &set,
        &stats,
        recipe.model.num_classes,
        recipe.train.batch_size,
        recipe.metrics_acc_as_precision,
    )?;

    let metrics_json = out_dir.join("metrics.json");
    let metrics_csv = out_dir.join("metrics.csv");
    let confusion_csv = out_dir.join("confusion.csv");
    std::fs::write(
        &metrics_json,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    std::fs::write(&metrics_csv, report.metrics_csv())?;
    std::fs::write(&confusion_csv, report.confusion_csv())?;
    Ok(EvalOutcome {
        report,
        metrics_json,
        metrics_csv,
        confusion_csv,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub total: usize,
    pub modules: Vec<(String, usize)>,
}

/// Group parameter records by module path: `stem`, `tsa`, `lct.blockN`,
/// `head`.
fn breakdown_from_records(records: &[(String, usize)]) -> InspectReport {
    let mut order: Vec<String> = Vec::new();
    let mut totals: BTreeMap<String, usize> = BTreeMap::new();
    for (name, numel) in records {
        let mut parts = name.split('.');
        let first = parts.next().unwrap_or("");
        let group = if first == "lct" {
            format!("{first}.{}", parts.next().unwrap_or(""))
        } else {
            first.to_string()
        };
        if !totals.contains_key(&group) {
            order.push(group.clone());
        }
        *totals.entry(group).or_insert(0) += numel;
    }
    InspectReport {
        total: records.iter().map(|(_, n)| n).sum(),
        modules: order.into_iter().map(|g| (g.clone(), totals[&g])).collect(),
    }
}

/// `ser inspect` on a checkpoint: counts come straight from the file.
pub fn cmd_inspect_checkpoint(path: &Path) -> Result<InspectReport> {
    let ckpt = Checkpoint::<TrainElem>::load(path)?;
    let records: Vec<(String, usize)> = ckpt
        .params
        .iter()
        .map(|(name, dims, _)| (name.clone(), dims.iter().product()))
        .collect();
    Ok(breakdown_from_records(&records))
}

/// `ser inspect` on a config (optionally with a preset applied).
pub fn cmd_inspect_config(cfg: &RunConfig, preset: Option<&str>) -> Result<InspectReport> {
    let mut model_cfg = cfg.resolved_model()?;
    if let Some(p) = preset {
        apply_preset(&mut model_cfg, p)?;
        model_cfg.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = SerModel::<TrainElem>::new(&mut rng, &model_cfg)?;
    let records: Vec<(String, usize)> = model
        .parameters()?
        .iter()
        .map(|p| (p.name().to_string(), p.numel()))
        .collect();
    Ok(breakdown_from_records(&records))
}

pub fn write_inspect_json(report: &InspectReport, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("parameters.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(report).expect("report serializes"),
    )?;
    Ok(path)
}

/// `ser synth`: write a synthetic demo dataset, returning its manifest.
pub fn cmd_synth(out_dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    generate_dataset(out_dir, spec)
}

/// Exit-code mapping: 1 usage, 2 data, 3 numeric abort.
pub fn exit_code_for(err: &SerError) -> i32 {
    match err {
        SerError::NonFiniteLoss { .. } => 3,
        SerError::Config(_) => 1,
        _ => 2,
    }
}

/// Build a `RunRecipe` for tests that bypass the TOML layer.
pub fn recipe_of(cfg: &RunConfig) -> Result<RunRecipe> {
    cfg.recipe()
}
