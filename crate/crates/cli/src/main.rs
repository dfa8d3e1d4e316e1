use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vpmap_cli::{Command, Invocation};

#[derive(Parser)]
#[command(name = "vpmap", version, about = "Variance-partitioning space-time disease mapping")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for chains or replicates.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Fit the model to a dataset.
    Fit(Common),
    /// Run the simulation-recovery study.
    Simulate(Common),
    /// Check the distance approximation for the mixing-parameter prior.
    VerifyPrior(Common),
    /// Report generalized variances of a structure matrix.
    Scale(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VPMAP_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (cmd, args) = match cli.command {
        Sub::Fit(a) => (Command::Fit, a),
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::VerifyPrior(a) => (Command::VerifyPrior, a),
        Sub::Scale(a) => (Command::Scale, a),
    };
    let result = Invocation::load(&args.config)
        .map(|inv| inv.with_overrides(args.seed, args.jobs, args.out))
        .and_then(|inv| inv.run(cmd));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vpmap {}: {e}", cmd.name());
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
