use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use xcdiff_cli::commands::{ablate, diff, geometry, repro, steer, synth, train};
use xcdiff_cli::config::RunConfig;
use xcdiff_cli::run::Run;

#[derive(Debug, Parser)]
#[command(
    name = "xcdiff",
    version,
    about = "Crosscoder model diffing on planted and recorded activations"
)]
struct Cli {
    /// JSON run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Disable anything not fixed by config and seed (network annotation).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "xcdiff-out")]
    out: PathBuf,
    /// Omit the generation timestamp from reports.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plant a world and write its activation shards.
    Synth,
    /// Train a crosscoder on the shards.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decoder-norm diff and per-feature statistics.
    Diff {
        /// Exchange the two model sides before diffing.
        #[arg(long)]
        swap_sides: bool,
    },
    /// Zero-ablate distilled-specific features and measure target logits.
    Ablate {
        /// Comma-separated percentages, e.g. `1,5,20`.
        #[arg(long, value_delimiter = ',')]
        top_percent: Option<Vec<f64>>,
    },
    /// Greedy generation with a decoder vector added to the residual.
    Steer {
        #[arg(long)]
        feature: Option<usize>,
        /// Comma-separated steering strengths.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alpha: Option<Vec<f64>>,
    },
    /// Parallelogram loss of function-class pairs after PCA.
    Geometry {
        /// Comma-separated PCA dimensions.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
    },
    /// synth, train, diff, ablate, steer and geometry in sequence.
    ReproDesk,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train { .. } => "train",
            Command::Diff { .. } => "diff",
            Command::Ablate { .. } => "ablate",
            Command::Steer { .. } => "steer",
            Command::Geometry { .. } => "geometry",
            Command::ReproDesk => "repro-desk",
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .resolve(cli.seed);
    let run = Run::new(config, cli.out, cli.deterministic, !cli.no_timestamp);
    std::fs::create_dir_all(&run.out)?;
    match cli.command {
        Command::Synth => {
            let r = synth::synth(&run)?;
            println!("wrote {} tokens in {} shards", r.n_tokens, r.shards.len());
        }
        Command::Train { resume } => {
            let r = train::train(&run, resume.as_deref())?;
            match (&r.last, &r.recovery) {
                (Some(m), Some(rec)) => println!(
                    "trained {} steps, loss {:.4}, recovered {:.1}% of planted features",
                    r.steps,
                    m.total_loss,
                    100.0 * rec.recovered_fraction
                ),
                _ => println!("trained {} steps", r.steps),
            }
        }
        Command::Diff { swap_sides } => {
            let r = diff::diff(&run, swap_sides)?;
            println!(
                "{} features, mean nrn {:.3}, trimodal {}",
                r.diff.n_features, r.diff.mean_nrn, r.diff.modality.trimodal
            );
        }
        Command::Ablate { top_percent } => {
            let r = ablate::ablate(&run, top_percent)?;
            println!("{} ablation rows, {} categories skipped", r.rows.len(), r.skipped.len());
        }
        Command::Steer { feature, alpha } => {
            let r = steer::steer(&run, feature, alpha)?;
            println!("steered feature {} at {} strengths", r.feature, r.transcripts.len());
        }
        Command::Geometry { dims } => {
            let r = geometry::geometry(&run, dims)?;
            println!("{} classes over {} dims", r.n_classes, r.geometry.results.len());
        }
        Command::ReproDesk => {
            let r = repro::repro_desk(&run)?;
            println!("repro-desk: {} stages", r.stages.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error in {stage}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
