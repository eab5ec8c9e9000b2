use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nvstrain_cli::commands;
use nvstrain_cli::CliError;

/// Wide-field NV strain imaging: simulate ODMR stacks, fit them and map strain.
#[derive(Parser)]
#[command(name = "nvstrain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic image stack from a scenario config.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit every pixel of a stack and write the fit table.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a fit table into strain, precision and sensitivity maps.
    Map {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-orientation contrast maps of a high-field stack.
    Classify {
        #[arg(long = "in")]
        input: PathBuf,
        /// Lab-frame field in gauss, as `Bx,By,Bz`.
        #[arg(long, value_parser = parse_field, allow_hyphen_values = true)]
        field: [f64; 3],
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate, then fit and map (low field) or classify (high field).
    Pipeline {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_field(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok([x, y, z]),
        _ => Err("expected three finite components Bx,By,Bz".into()),
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    Ok(match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config, &out)?.to_string(),
        Command::Fit { input, config, out } => {
            commands::fit(&input, config.as_deref(), &out)?.to_string()
        }
        Command::Map { input, config, out } => {
            commands::map(&input, config.as_deref(), &out)?.to_string()
        }
        Command::Classify {
            input,
            field,
            config,
            out,
        } => commands::classify(&input, field, config.as_deref(), &out)?.to_string(),
        Command::Pipeline { config, out } => {
            commands::pipeline(&config, out.as_deref())?.to_string()
        }
    })
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NVSTRAIN_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "NVSTRAIN_THREADS: expected a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("NVSTRAIN_THREADS: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("nvstrain: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
