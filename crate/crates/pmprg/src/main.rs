use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use pmprg::config::load_config;
use pmprg::harness::infer::{evaluate_cmd, export_attention, generate_cmd, run_ablation};
use pmprg::harness::stage1::{extract_features_cmd, split, synth, train_stage1};
use pmprg::harness::stage2::train_stage2;
use pmprg::harness::Paths;

/// Multi-scale pathology report generation pipeline.
#[derive(Parser, Debug)]
#[command(name = "pmprg", version, about, disable_help_subcommand = true)]
struct Cli {
    /// JSON config file; omit for the built-in desk profile.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the config's random seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic slide corpus and ground-truth reports.
    Synth,
    /// Partition patients into train/validation/test splits.
    Split,
    /// Train the region and slide encoders by self-distillation.
    TrainStage1,
    /// Re-extract region features with the trained region encoder.
    ExtractFeatures,
    /// Train the organ/tag heads and the conditional report generator.
    TrainStage2,
    /// Decode reports for the test split.
    Generate,
    /// Score generated reports against ground truth.
    Evaluate,
    /// Run input-conditioning ablations (s1, s2, s3; default all).
    Ablate {
        /// Variants to run.
        #[arg(value_name = "VARIANT")]
        variants: Vec<String>,
    },
    /// Export tag-to-region attention maps for the test split.
    ExportAttention,
}

fn run(cli: Cli) -> pmprg::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let paths = Paths::new(&cli.out);
    match cli.cmd {
        Cmd::Synth => synth(&cfg, &paths),
        Cmd::Split => split(&cfg, &paths),
        Cmd::TrainStage1 => train_stage1(&cfg, &paths),
        Cmd::ExtractFeatures => extract_features_cmd(&cfg, &paths),
        Cmd::TrainStage2 => train_stage2(&cfg, &paths),
        Cmd::Generate => generate_cmd(&cfg, &paths),
        Cmd::Evaluate => evaluate_cmd(&cfg, &paths).map(|_| ()),
        Cmd::Ablate { variants } => run_ablation(&cfg, &paths, &variants).map(|_| ()),
        Cmd::ExportAttention => export_attention(&cfg, &paths),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
