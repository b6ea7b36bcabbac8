use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dupnet::harness::{self, ExperimentConfig};

/// Adversarial point-cloud experiments: data, training, attacks, defenses, reports.
#[derive(Debug, Parser)]
#[command(name = "dupnet", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(short, long, global = true, default_value = "experiment.json")]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Override evaluation.test_limit.
    #[arg(long, global = true)]
    test_limit: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenerateData,
    /// Train the classifier.
    Train,
    /// Train the learned upsampler on synthetic patches.
    TrainUpsampler,
    /// Attack the evaluated test clouds.
    Attack {
        /// Run only this attack.
        #[arg(long)]
        attack: Option<String>,
    },
    /// Write defended clouds for one defense.
    Defend {
        #[arg(long)]
        defense: String,
        /// Attacked set to defend; clean test clouds when omitted.
        #[arg(long)]
        attack: Option<String>,
    },
    /// Build the attack x defense accuracy grid.
    Evaluate,
    /// Compare removal ratios of SOR and size-matched random sampling.
    RatioStudy,
    /// Render report.json as a Markdown table.
    Report,
}

fn run(cli: Cli) -> dupnet::Result<()> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    if let Some(l) = cli.test_limit {
        cfg.evaluation.test_limit = Some(l);
    }
    cfg.validate()?;
    match cli.command {
        Command::GenerateData => {
            let m = harness::cmd_generate_data(&cfg)?;
            println!("{} clouds in {}", m.entries.len(), cfg.dataset.dir.display());
        }
        Command::Train => {
            let rows = harness::cmd_train(&cfg)?;
            if let Some(last) = rows.last() {
                println!(
                    "epoch {}: train accuracy {:.4}, test accuracy {}",
                    last.epoch,
                    last.train_accuracy,
                    last.test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
        }
        Command::TrainUpsampler => {
            let rows = harness::cmd_train_upsampler(&cfg)?;
            if let Some(last) = rows.last() {
                println!(
                    "epoch {}: train reconstruction {:.5}, validation {}",
                    last.epoch,
                    last.train_reconstruction,
                    last.validation_reconstruction.map_or("n/a".into(), |v| format!("{v:.5}"))
                );
            }
        }
        Command::Attack { attack } => {
            for s in harness::cmd_attack(&cfg, attack.as_deref())? {
                println!(
                    "{}: {}/{} successful ({} skipped, {} errors)",
                    s.attack.name,
                    s.successes,
                    s.count - s.skipped,
                    s.skipped,
                    s.errors
                );
            }
        }
        Command::Defend { defense, attack } => {
            let n = harness::cmd_defend(&cfg, attack.as_deref(), &defense)?;
            println!("defended {n} clouds");
        }
        Command::Evaluate => {
            let report = harness::cmd_evaluate(&cfg)?;
            print!("{}", harness::render_report(&report));
        }
        Command::RatioStudy => {
            let (_, s) = harness::cmd_ratio_study(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Report => print!("{}", harness::cmd_report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
