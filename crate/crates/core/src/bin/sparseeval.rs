use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparseeval::cli;
use sparseeval::config::PipelineConfig;
use sparseeval::error::Error;
use sparseeval::matrix::Encoding;

/// Benchmark compression: select anchor items from a model-item score matrix
/// and estimate full-benchmark scores from anchor scores alone.
#[derive(Parser)]
#[command(name = "sparseeval", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the anchor budget.
    #[arg(long)]
    k: Option<usize>,
    /// Override the refinement round count.
    #[arg(long)]
    rounds: Option<usize>,
    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Refine with the linear proxy instead of the MLP proxy.
    #[arg(long)]
    linear_proxy: bool,
    /// Skip refinement entirely (keep the initial anchors).
    #[arg(long)]
    skip_refinement: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig, Error> {
        let mut config = PipelineConfig::from_path(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(k) = self.k {
            config.k = k;
        }
        if let Some(rounds) = self.rounds {
            config.rounds = rounds;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if self.linear_proxy {
            config.linear_proxy = true;
        }
        if self.skip_refinement {
            config.skip_refinement = true;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Similarity matrices, spectral clustering and sparsity statistics.
    Analyze(ConfigArgs),
    /// Full pipeline: init, refinement, final training, test evaluation.
    Run(ConfigArgs),
    /// Score new models from an anchor-only scores CSV.
    Estimate {
        /// predictor.json from a previous run.
        #[arg(long, value_name = "PATH")]
        predictor: PathBuf,
        /// anchors.json from the same run.
        #[arg(long, value_name = "PATH")]
        anchors: PathBuf,
        /// CSV with model_id plus one column per anchor item id.
        #[arg(long, value_name = "PATH")]
        scores: PathBuf,
        /// Cell encoding of the scores CSV.
        #[arg(long, value_enum, default_value = "zero-one")]
        encoding: EncodingArg,
        /// Output CSV path.
        #[arg(long, value_name = "PATH", default_value = "estimates.csv")]
        out: PathBuf,
    },
    /// Merge run reports into one comparison table.
    Report {
        /// report.json files to merge.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output CSV path.
        #[arg(long, value_name = "PATH", default_value = "comparison.csv")]
        out: PathBuf,
    },
    /// Emit the configured synthetic matrix as a {0,1} CSV.
    Synth {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long, value_name = "PATH", default_value = "synthetic.csv")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EncodingArg {
    ZeroOne,
    PlusMinus,
}

impl From<EncodingArg> for Encoding {
    fn from(value: EncodingArg) -> Self {
        match value {
            EncodingArg::ZeroOne => Encoding::ZeroOne,
            EncodingArg::PlusMinus => Encoding::PlusMinus,
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Analyze(args) => {
            let config = args.load()?;
            let paths = cli::cmd_analyze(&config)?;
            for path in paths {
                println!("{}", path.display());
            }
        }
        Command::Run(args) => {
            let config = args.load()?;
            let paths = cli::cmd_run(&config)?;
            for path in paths {
                println!("{}", path.display());
            }
        }
        Command::Estimate {
            predictor,
            anchors,
            scores,
            encoding,
            out,
        } => {
            let path = cli::cmd_estimate(&predictor, &anchors, &scores, encoding.into(), &out)?;
            println!("{}", path.display());
        }
        Command::Report { reports, out } => {
            let path = cli::cmd_report(&reports, &out)?;
            println!("{}", path.display());
        }
        Command::Synth { config, out } => {
            let config = PipelineConfig::from_path(&config)?;
            let path = cli::cmd_synth(&config, &out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    cli::init_thread_cap();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
