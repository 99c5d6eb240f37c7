//! Command-line harness around `nucdiff-core`: synthetic generation, the
//! RPCA baseline, nuclear diffusion sampling, metrics and motion sweeps.
//!
//! Every command writes into an output directory and finishes with a
//! `manifest.json` holding the resolved configuration and SHA-256 digests of
//! its inputs and outputs. Failures map onto stable exit codes: 2 usage,
//! 3 non-convergence, 4 input format, 5 numerical failure.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod model_spec;
pub mod plot;

pub use error::{CliError, Result};

use args::{Cli, Command};
use manifest::RunManifest;

pub fn run(cli: &Cli) -> Result<RunManifest> {
    match &cli.command {
        Command::Synth(a) => commands::synth::run(a),
        Command::Rpca(a) => commands::rpca::run(a),
        Command::Nucdiff(a) => commands::nucdiff::run(a),
        Command::Metrics(a) => commands::metrics::run(a),
        Command::Sweep(a) => commands::sweep::run(a),
    }
}
