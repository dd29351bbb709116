use std::path::PathBuf;
use std::process::ExitCode;

use binormal::cli_io::{self, Format, OutputOptions, RunConfig, RunManifest, Task};
use binormal::self_similar::ProfileConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "binormal", version, about = "Polygonal vortex filaments under the binormal flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Format {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct WithConfig {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Polyline specification to Dirac coefficients.
    Design {
        /// Polyline specification (TOML with [[corners]] entries).
        #[arg(long)]
        spec: PathBuf,
        /// Cached (a, phi) table from `selfsimilar`.
        #[arg(long)]
        phi_table: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Integrate the coefficient system.
    Evolve(WithConfig),
    /// Reconstruct curves at the configured times.
    Reconstruct(WithConfig),
    /// Self-similar profiles and the phi table.
    Selfsimilar {
        /// Amplitudes, comma separated.
        #[arg(long, value_delimiter = ',', required_unless_present = "config")]
        a: Vec<f64>,
        #[arg(long, default_value_t = 200.0)]
        x_max: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rational-time scan of the evolved field.
    Talbot(WithConfig),
    /// Invariant checks reachable from the configuration.
    Verify(WithConfig),
    /// Every task listed in the configuration.
    Run(WithConfig),
}

fn options(common: &Common, cfg: Option<&RunConfig>) -> OutputOptions {
    let default = RunConfig::default();
    cli_io::output_options(cfg.unwrap_or(&default), common.out.as_deref(), common.format.map(Into::into), common.quiet)
}

fn with_config(w: &WithConfig, task: Option<Task>) -> binormal::Result<(RunManifest, bool)> {
    let cfg = RunConfig::load(&w.config)?;
    let opts = options(&w.common, Some(&cfg));
    Ok((cli_io::run(&cfg, task, &opts)?, opts.quiet))
}

fn dispatch(cli: &Cli) -> binormal::Result<(RunManifest, bool)> {
    match &cli.command {
        Command::Design { spec, phi_table, common } => {
            let opts = options(common, None);
            Ok((cli_io::cmd_design(spec, phi_table.as_deref(), &opts)?, opts.quiet))
        }
        Command::Evolve(w) => with_config(w, Some(Task::Evolve)),
        Command::Reconstruct(w) => with_config(w, Some(Task::Reconstruct)),
        Command::Talbot(w) => with_config(w, Some(Task::Talbot)),
        Command::Verify(w) => with_config(w, Some(Task::Verify)),
        Command::Run(w) => with_config(w, None),
        Command::Selfsimilar { a, x_max, config, common } => match config {
            Some(path) => {
                let cfg = RunConfig::load(path)?;
                let opts = options(common, Some(&cfg));
                Ok((cli_io::run(&cfg, Some(Task::Selfsimilar), &opts)?, opts.quiet))
            }
            None => {
                let opts = options(common, None);
                Ok((cli_io::cmd_selfsimilar(a, *x_max, &ProfileConfig::default(), &opts)?, opts.quiet))
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok((manifest, quiet)) => {
            if !quiet {
                for f in &manifest.files {
                    println!("{}  {}", f.sha256, f.path);
                }
                for w in &manifest.warnings {
                    eprintln!("warning: {w}");
                }
            }
            for e in &manifest.errors {
                eprintln!("error in {}: {}", e.task, e.message);
            }
            ExitCode::from(manifest.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
