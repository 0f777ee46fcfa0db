use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ser_cli::*;
use ser_core::config::RunConfig;
use ser_core::error::Result;
use ser_core::synth::SynthSpec;

#[derive(Parser)]
#[command(
    name = "ser",
    about = "Speech emotion recognition: feature extraction, training, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for feature extraction (results are
    /// worker-count-invariant).
    #[arg(long, default_value_t = 1)]
    device_threads: usize,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract MFCC feature caches for the train/test splits of a manifest.
    Features {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest CSV (path,label,speaker,utterance_id).
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a model, writing checkpoints and a JSONL log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Ablation or scale preset.
        #[arg(long)]
        preset: Option<String>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print the per-module parameter breakdown of a checkpoint or config.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Generate a synthetic tilt-coded noise dataset for demos and smoke
    /// tests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        utterances_per_class: usize,
        #[arg(long, default_value_t = 1.8)]
        duration_s: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_toml_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Features { common, manifest } => {
            let cfg = load_config(&common)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let summary = cmd_features(&cfg, &manifest, &out, cfg.train.seed, common.device_threads)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary"));
        }
        Command::Train {
            common,
            preset,
            resume,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = &preset {
                ser_core::config::apply_preset(&mut cfg.model, p)?;
            }
            let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let outcome = cmd_train(&cfg, &out, resume.as_deref(), common.device_threads)?;
            println!(
                "trained {} epochs; best UA {:.4}; checkpoints at {} / {}",
                outcome.epochs_run,
                outcome.best_ua,
                outcome.best_path.display(),
                outcome.last_path.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
        } => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let outcome = cmd_eval(&checkpoint, &manifest, &out, common.device_threads)?;
            println!(
                "WA {:.4} UA {:.4} (reports at {})",
                outcome.report.wa,
                outcome.report.ua,
                outcome.metrics_json.display()
            );
        }
        Command::Inspect {
            common,
            checkpoint,
            preset,
        } => {
            let report = match &checkpoint {
                Some(path) => cmd_inspect_checkpoint(path)?,
                None => {
                    let cfg = load_config(&common)?;
                    cmd_inspect_config(&cfg, preset.as_deref())?
                }
            };
            for (module, count) in &report.modules {
                println!("{module:<16} {count:>12}");
            }
            println!("{:<16} {:>12}", "total", report.total);
            if let Some(out) = &common.out {
                let path = write_inspect_json(&report, out)?;
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Synth {
            out,
            classes,
            utterances_per_class,
            duration_s,
            seed,
        } => {
            let manifest = cmd_synth(
                &out,
                &SynthSpec {
                    num_classes: classes,
                    utterances_per_class,
                    duration_s,
                    sample_rate: 16000,
                    seed,
                },
            )?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's help/version paths are successes; everything else is a
            // usage error (exit 1).
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
