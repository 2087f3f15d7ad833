use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use qkam_cli::config::RunConfig;
use qkam_cli::pipeline::{run, Command};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Reduce,
    Iterate,
    Spectrum,
    Compare,
    Measure,
    Scar,
    Gamma,
}

/// Resonant normal forms, spectrum prediction and spectral diagnostics.
#[derive(Parser, Debug)]
#[command(name = "qkam", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `run.output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Thread count recorded in the manifest.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Reduce => Command::Reduce,
        Cmd::Iterate => Command::Iterate,
        Cmd::Spectrum => Command::Spectrum,
        Cmd::Compare => Command::Compare,
        Cmd::Measure => Command::Measure,
        Cmd::Scar => Command::Scar,
        Cmd::Gamma => Command::Gamma,
    };
    let (mut cfg, text) = match RunConfig::load(&cli.config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.run.threads = t.max(1);
    }
    let out = cli.out.or_else(|| cfg.run.output.as_ref().map(|o| cfg.resolve(o))).unwrap_or_else(|| PathBuf::from("out"));
    match run(command, &cfg, &text, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
