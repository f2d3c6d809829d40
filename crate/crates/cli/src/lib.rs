//! Command-line driver for the falling-balls simulator.
//!
//! Every run reads a TOML config, applies command-line overrides, writes its
//! artifacts into one output directory and finishes with `manifest.json`,
//! which is written on failure as well.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

use std::path::Path;
use std::time::Instant;

use fallball::Error;

pub use config::{ExperimentConfig, Mode, Overrides};
pub use error::CliError;

use output::{Manifest, RunDir};

/// Runs one subcommand end to end and returns the process exit code.
pub fn execute(mode: Mode, config_path: Option<&Path>, overrides: &Overrides) -> i32 {
    let start = Instant::now();
    let loaded = match config_path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    };
    let mut cfg = match loaded {
        Ok(c) => c,
        Err(e) => {
            let dir = overrides.out.clone().unwrap_or_else(|| config::OutputConfig::default().dir);
            return finish(mode, None, &dir, None, Err(e), start);
        }
    };
    cfg.apply(overrides);
    let checked = match cfg.mode {
        Some(m) if m != mode => Err(CliError::Config(format!(
            "field `mode`: config is for `{}` but the subcommand is `{}`",
            m.name(),
            mode.name()
        ))),
        _ => cfg.validate(mode),
    };
    cfg.mode = Some(mode);
    let dir = cfg.output.dir.clone();
    if let Err(e) = checked {
        return finish(mode, Some(cfg), &dir, None, Err(e), start);
    }
    let mut out = match RunDir::create(&dir) {
        Ok(o) => o,
        Err(e) => return finish(mode, Some(cfg), &dir, None, Err(e), start),
    };
    let result = run::run_mode(mode, &cfg, &mut out);
    finish(mode, Some(cfg), &dir, Some(out), result, start)
}

fn finish(
    mode: Mode,
    cfg: Option<ExperimentConfig>,
    dir: &Path,
    out: Option<RunDir>,
    result: Result<(), CliError>,
    start: Instant,
) -> i32 {
    let (mut diagnostics, outputs) = match &out {
        Some(o) => (o.diagnostics.clone(), o.digests()),
        None => Default::default(),
    };
    let (code, error) = match &result {
        Ok(()) => (error::EXIT_OK, None),
        Err(e) => (e.exit_code(), Some(e.to_string())),
    };
    if let Err(CliError::Run(e)) = &result {
        match e {
            Error::AccumulationGuard(report) => {
                diagnostics.insert("guard".into(), serde_json::to_value(report).unwrap_or_default());
            }
            Error::Singularity { t, first, second, separation } => {
                diagnostics.insert(
                    "singularity".into(),
                    serde_json::json!({ "t": t, "first": first, "second": second, "separation": separation }),
                );
            }
            _ => {}
        }
    }
    let manifest = Manifest {
        tool: "fallball",
        version: env!("CARGO_PKG_VERSION"),
        mode: mode.name().to_string(),
        status: error::status_name(code).to_string(),
        exit_code: code,
        error: error.clone(),
        config: cfg,
        diagnostics,
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if let Some(msg) = &error {
        eprintln!("fallball {}: {msg}", mode.name());
    }
    match manifest.write(dir) {
        Ok(()) => code,
        Err(e) => {
            eprintln!("fallball: cannot write manifest: {e}");
            error::EXIT_RUNTIME
        }
    }
}
