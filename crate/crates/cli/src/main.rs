//! `cortexmorph` command-line interface.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cortexmorph::metrics::RSquaredKind;

use commands::{Inputs, PhantomArgs, PhantomKindArg};
use config::{Overrides, PipelineConfig};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "cortexmorph",
    version,
    about = "Cortical thickness by diffeomorphic registration"
)]
struct Cli {
    /// TOML pipeline config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = runtime default).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Smoothness weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort (MVOL volumes plus manifest.csv).
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        subjects: usize,
        /// Grid size as `N` or `X,Y,Z`.
        #[arg(long, default_value = "32,8,8", value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, value_enum, default_value_t = Kind::Slab)]
        kind: Kind,
        /// Baseline cortical thickness (mm).
        #[arg(long, default_value_t = 3.0)]
        thickness: f64,
        /// WM extent of subject 0 (slab depth or inner shell radius, voxels).
        #[arg(long, default_value_t = 11.0)]
        wm_extent: f64,
        /// Comma-separated induced atrophy levels (mm), or `reference`.
        #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0", value_parser = parse_levels)]
        levels: Levels,
    },
    /// Iterative registration of one pair or a whole manifest.
    Register {
        #[command(flatten)]
        inputs: InputArgs,
        /// Output directory (single pair) or results CSV (manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the amortized regressor on a manifest cohort.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Held-out manifest for validation loss and agreement-based selection.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-pass thickness with a trained checkpoint.
    Thickness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Agreement and sensitivity statistics over result tables.
    Eval {
        #[arg(long)]
        results: PathBuf,
        /// Second result table for ICC; defaults to the ground truth column.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = R2Mode::Ols)]
        r2_mode: R2Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall-clock comparison of iterative and amortized registration.
    Bench {
        /// Edge length of the cubic test volume.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InputArgs {
    #[arg(long, requires = "wmgm", conflicts_with = "manifest")]
    wm: Option<PathBuf>,
    #[arg(long, requires = "wm")]
    wmgm: Option<PathBuf>,
    #[arg(long, requires = "wm")]
    labels: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Slab,
    Shell,
}

#[derive(Clone, Copy, ValueEnum)]
enum R2Mode {
    Ols,
    Identity,
}

#[derive(Clone)]
struct Levels(Vec<f64>);

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err("expected N or X,Y,Z".into()),
    }
}

fn parse_levels(s: &str) -> Result<Levels, String> {
    if s == "reference" {
        return Ok(Levels(cortexmorph::phantom::reference_atrophy_levels()));
    }
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(Levels)
}

impl InputArgs {
    fn resolve(self, cfg: &PipelineConfig) -> CliResult<Inputs> {
        match (
            self.wm,
            self.wmgm,
            self.manifest.or_else(|| cfg.paths.manifest.clone()),
        ) {
            (Some(wm), Some(wmgm), _) => Ok(Inputs::Pair {
                wm,
                wmgm,
                labels: self.labels,
            }),
            (None, None, Some(m)) => Ok(Inputs::Manifest(m)),
            _ => Err(CliError::Input(
                "give --wm and --wmgm, or --manifest".into(),
            )),
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let overrides = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        lambda: cli.lambda,
        max_iters: cli.max_iters,
        epochs: cli.epochs,
    };
    let cfg = PipelineConfig::load(cli.config.as_deref(), overrides)?;
    if cfg.threads > 0 {
        cortexmorph::par::configure_threads(cfg.threads).map_err(CliError::Config)?;
    }
    match cli.command {
        Command::Phantom {
            out,
            subjects,
            dims,
            kind,
            thickness,
            wm_extent,
            levels,
        } => commands::phantom(
            &cfg,
            &PhantomArgs {
                out,
                subjects,
                dims,
                kind: match kind {
                    Kind::Slab => PhantomKindArg::Slab,
                    Kind::Shell => PhantomKindArg::Shell,
                },
                thickness,
                wm_extent,
                levels: levels.0,
            },
        ),
        Command::Register { inputs, out } => {
            let inputs = inputs.resolve(&cfg)?;
            commands::register(&cfg, &inputs, out.as_deref())
        }
        Command::Train {
            manifest,
            validation,
            out,
        } => {
            let manifest = manifest
                .or_else(|| cfg.paths.manifest.clone())
                .ok_or_else(|| CliError::Input("train needs --manifest".into()))?;
            commands::train(&cfg, &manifest, validation.as_deref(), out.as_deref())
        }
        Command::Thickness {
            checkpoint,
            inputs,
            out,
        } => {
            let inputs = inputs.resolve(&cfg)?;
            commands::thickness(&cfg, &checkpoint, &inputs, out.as_deref())
        }
        Command::Eval {
            results,
            reference,
            r2_mode,
            out,
        } => {
            let mode = match r2_mode {
                R2Mode::Ols => RSquaredKind::Ols,
                R2Mode::Identity => RSquaredKind::IdentityLine,
            };
            commands::eval(&results, reference.as_deref(), mode, out.as_deref())
        }
        Command::Bench {
            size,
            checkpoint,
            out,
        } => commands::bench(&cfg, size, checkpoint.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn dims_and_levels_parse() {
        assert_eq!(parse_dims("16").unwrap(), [16; 3]);
        assert_eq!(parse_dims("32,8,8").unwrap(), [32, 8, 8]);
        assert_eq!(parse_dims("32x8x4").unwrap(), [32, 8, 4]);
        assert!(parse_dims("3,4").is_err());
        assert_eq!(parse_levels("0.1, 0.5").unwrap().0, vec![0.1, 0.5]);
        assert_eq!(parse_levels("reference").unwrap().0.len(), 19);
    }
}
