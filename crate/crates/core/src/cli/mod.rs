//! Command-line runner: `pretrain`, `train --mode {on|semi|off|sde}`,
//! `entropy-study`, `sweep` and `eval`, all sharing `--config`, `--seed` and
//! `--out`.
//!
//! Exit codes: 0 success, 2 invalid config or arguments, 3 missing or
//! unreadable artifact, 4 numeric failure, 1 anything else (I/O).

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    cmd_entropy_study, cmd_eval, cmd_pretrain, cmd_sweep, cmd_train, entropy_study, EntropyStudy, ModelEval,
    PivotStudy, TrainMode, TrainOutcome,
};
pub use config::ExperimentConfig;

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "arcopo",
    version,
    about = "Contrastive policy optimization for a toy chunked generator"
)]
pub struct Cli {
    /// TOML config; unset keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the reference generator.
    Pretrain,
    /// Train an adapter on top of the reference.
    Train {
        #[arg(long, value_enum)]
        mode: TrainMode,
    },
    /// Noise-substitution study on the reference.
    EntropyStudy,
    /// Merge-scale sweep over the trained semi and on-policy adapters.
    Sweep,
    /// Evaluate the reference and every trained adapter.
    Eval,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnsupportedOperation(_) => EXIT_CONFIG,
        Error::NotFound(_) | Error::Format(_) => EXIT_MISSING,
        Error::NumericFailure(_) => EXIT_NUMERIC,
        Error::Io(_) => EXIT_OTHER,
    }
}

pub fn resolve_config(cli: &Cli) -> crate::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::NotFound(m) => Error::Config(format!("{m} does not exist")),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> crate::Result<String> {
    let cfg = resolve_config(cli)?;
    Ok(match &cli.command {
        Command::Pretrain => {
            let o = cmd_pretrain(&cfg)?;
            format!("pretrained: denoising mse {:.4} -> {:.4}", o.initial_mse, o.final_mse)
        }
        Command::Train { mode } => {
            let o = cmd_train(&cfg, *mode)?;
            format!(
                "trained {}: in-domain {:.4}, held-out {:.4}, displacement {:.4}",
                mode.name(),
                o.report.in_domain,
                o.report.held_out,
                o.displacement
            )
        }
        Command::EntropyStudy => {
            let s = cmd_entropy_study(&cfg)?;
            let ratios: Vec<String> = s
                .pivots
                .iter()
                .map(|p| match p.dominance_ratio {
                    Some(r) => format!("chunk {}: {r:.3}", p.pivot),
                    None => format!("chunk {}: -", p.pivot),
                })
                .collect();
            format!("init/solver divergence ratio {}", ratios.join(", "))
        }
        Command::Sweep => {
            let r = cmd_sweep(&cfg)?;
            format!("selected scale {} (improved: {})", r.selected_scale, r.improved)
        }
        Command::Eval => cmd_eval(&cfg)?
            .iter()
            .map(|m| {
                format!(
                    "{}: in-domain {:.4}, held-out {:.4}",
                    m.model, m.report.in_domain, m.report.held_out
                )
            })
            .collect::<Vec<_>>()
            .join("\n"),
    })
}

/// Parse `args` (program name first), run the command and return the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            println!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
