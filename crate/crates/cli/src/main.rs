//! `calopt`: command-line pipeline for calibration-optimal basis selection
//! and history matching of high-dimensional computer-model output.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pipeline::RunArgs;

#[derive(Parser)]
#[command(
    name = "calopt",
    version,
    about = "Calibration-optimal basis selection, GP emulation and history matching",
    long_about = "Pipeline commands around weighted-norm basis rotation for computer models \
with spatial output: generate the built-in test model, compute SVD or rotated bases, fit \
per-coefficient Gaussian-process emulators, and run chained history-matching waves.\n\n\
Exit codes: 0 success; 2 terminal case (the observations cannot be reconstructed within \
the stated bound, or a wave ruled out the whole input space); 3 infeasible variance \
constraint; 1 any other failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the command's primary random seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the built-in spatial test model: design, ensemble, observations and covariances.
    ToyGen(CommonArgs),
    /// Compute an SVD or rotated basis from an ensemble, with a VarMSE table.
    Basis(CommonArgs),
    /// Fit per-coefficient GP emulators over a basis and save the bundle.
    Emulate(CommonArgs),
    /// Run one history-matching wave from a saved emulator bundle.
    Hm(CommonArgs),
    /// All-in-one wave: design, simulate, rotate, emulate, history match.
    Wave(CommonArgs),
    /// 1-D iterative calibration demo trajectory (well- or mis-specified).
    TerminalDemo(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, runner): (&CommonArgs, fn(&RunArgs) -> anyhow::Result<u8>) = match &cli.command {
        Command::ToyGen(a) => (a, pipeline::cmd_toy_gen),
        Command::Basis(a) => (a, pipeline::cmd_basis),
        Command::Emulate(a) => (a, pipeline::cmd_emulate),
        Command::Hm(a) => (a, pipeline::cmd_hm),
        Command::Wave(a) => (a, pipeline::cmd_wave),
        Command::TerminalDemo(a) => (a, pipeline::cmd_terminal_demo),
    };
    let run_args = RunArgs {
        config: args.config.clone(),
        seed: args.seed,
        out: args.out.clone(),
    };
    match runner(&run_args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
