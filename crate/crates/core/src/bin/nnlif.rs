use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};

use nnlif::cli::{apply_override, config_from_doc, exit_code, parse_doc, preset, run_scenario, Command};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    Simulate,
    Steady,
    Jump,
    Entropy,
    FbCheck,
    Poincare,
    Sweep,
}

/// Time-dilated NNLIF solver.
#[derive(Debug, Parser)]
#[command(name = "nnlif", version)]
struct Args {
    #[arg(value_enum)]
    command: Sub,
    /// TOML configuration file (dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in base configuration: fig-eternal or fig-jump.
    #[arg(long)]
    preset: Option<String>,
    /// Override a key, e.g. `--set params.b=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn command(sub: Sub) -> Command {
    match sub {
        Sub::Simulate => Command::Simulate,
        Sub::Steady => Command::Steady,
        Sub::Jump => Command::Jump,
        Sub::Entropy => Command::Entropy,
        Sub::FbCheck => Command::FbCheck,
        Sub::Poincare => Command::Poincare,
        Sub::Sweep => Command::Sweep,
    }
}

fn run(args: &Args) -> anyhow::Result<()> {
    let mut doc = match &args.preset {
        Some(name) => preset(name)?,
        None => Default::default(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        doc.extend(parse_doc(&text)?);
    }
    for s in &args.set {
        apply_override(&mut doc, s)?;
    }
    let cfg = config_from_doc(&doc)?;
    let files = run_scenario(&cfg, command(args.command), args.out.as_deref())?;
    eprintln!("wrote {} files", files.len() + 1);
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<nnlif::Error>().map(exit_code).unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
