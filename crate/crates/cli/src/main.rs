use std::path::PathBuf;

use clap::{Parser, Subcommand};
use fallball_cli::{execute, Mode, Overrides};

/// Exact event-driven simulation of falling balls and their linearized dynamics.
#[derive(Parser, Debug)]
#[command(name = "fallball", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Record the collision log of one orbit
    Simulate,
    /// Estimate the Lyapunov spectrum of the collision map
    Lyapunov,
    /// Track the quadratic form Q along boundary directions
    Cone,
    /// Compute neutral subspaces of orbit segments
    Neutral,
    /// Lyapunov spectra over a grid of mass profiles
    Sweep,
    /// Evolve a state with particles resting on the floor
    DegenerateDemo,
}

fn main() {
    let cli = Cli::parse();
    let mode = match cli.command {
        Command::Simulate => Mode::Simulate,
        Command::Lyapunov => Mode::Lyapunov,
        Command::Cone => Mode::Cone,
        Command::Neutral => Mode::Neutral,
        Command::Sweep => Mode::Sweep,
        Command::DegenerateDemo => Mode::DegenerateDemo,
    };
    std::process::exit(execute(mode, cli.config.as_deref(), &cli.overrides));
}
