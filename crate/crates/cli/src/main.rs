use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Train, evaluate, sample from and verify masked autoencoder density models.
#[derive(Debug, Parser)]
#[command(name = "made", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a key=value run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the mean test NLL and its 95% confidence half-width.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Split name (train, valid, test) or a path to a split file.
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of sampled masks to average for unlimited-policy models.
        #[arg(long)]
        masks: Option<usize>,
        /// Dataset directory; defaults to $MADE_DATA_DIR.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Draw samples by ancestral sampling.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path; a `.pgm` suffix writes a 28x28 image grid.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the autoregressive property of every mask set.
    Verify {
        #[arg(long, conflicts_with_all = ["config", "dump"])]
        model: Option<PathBuf>,
        #[arg(long, conflicts_with = "dump")]
        config: Option<PathBuf>,
        /// Plain-text mask dump(s) to check instead of generated masks.
        #[arg(long, num_args = 1..)]
        dump: Vec<PathBuf>,
        /// Number of masks to generate and check.
        #[arg(long)]
        masks: Option<usize>,
        /// Also write every checked mask set as a text dump to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences on a fresh net.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sum p(x) over every binary vector (D <= 20).
    Normcheck {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Limit on the number of model masks to check.
        #[arg(long)]
        masks: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => commands::train(&config),
        Command::Eval {
            model,
            split,
            masks,
            data_dir,
        } => commands::eval(&model, &split, masks, data_dir),
        Command::Sample {
            model,
            n,
            seed,
            out,
        } => commands::sample(&model, n, seed, &out),
        Command::Verify {
            model,
            config,
            dump,
            masks,
            out,
        } => commands::verify(model, config, dump, masks, out),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::Normcheck { model, seed, masks } => commands::normcheck(model, seed, masks),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
