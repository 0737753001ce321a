//! `secos`: build splits, pseudo labels, train, evaluate and report on the
//! synthetic benchmark.

mod commands;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use secos_core::experiment::{expand_preset, preset, ExperimentConfig};

use commands::Run;

#[derive(Parser, Debug)]
#[command(name = "secos", version, about = "Open-world semi-supervised classification with semantic-capture pseudo labels")]
struct Cli {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Named sweep or ablation; every run gets its own directory under
    /// `<out>/runs/`.
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, env = "SECOS_OUT", default_value = "secos-out")]
    out: PathBuf,

    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Build the synthetic manifest and the labeled/unlabeled/test split.
    Split,
    /// Select the global novel pseudo-labeled set from teacher confidences.
    PseudoGlobal,
    /// Dump batch recapture thresholds and candidate sets for the first epoch.
    PseudoBatch,
    /// Train the adapters and projector.
    Train,
    /// Evaluate the trained checkpoint on the test set.
    Eval,
    /// Aggregate evaluation reports and training logs into tables and plots.
    Report,
    /// Every stage in order, then the report.
    Run,
    /// Print the resolved configuration as TOML.
    Config,
    /// List the available presets.
    Presets,
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn runs(cli: &Cli, base: &ExperimentConfig) -> Result<Vec<Run>> {
    let Some(name) = &cli.preset else {
        return Ok(vec![Run { name: None, value: None, dir: cli.out.clone(), config: base.clone() }]);
    };
    let p = preset(name)?;
    let configs = expand_preset(base, &p)?;
    Ok(p.runs
        .iter()
        .map(|r| Run {
            name: Some(r.name.clone()),
            value: Some(r.value.clone()),
            dir: cli.out.join("runs").join(&r.name),
            config: configs[&r.name].clone(),
        })
        .collect())
}

fn execute(cli: &Cli) -> Result<()> {
    if cli.command == Command::Presets {
        for p in secos_core::experiment::presets() {
            let values: Vec<&str> = p.runs.iter().map(|r| r.value.as_str()).collect();
            println!("{:<14} {} = {}", p.name, p.axis, values.join(", "));
        }
        return Ok(());
    }
    let base = base_config(cli)?;
    let runs = runs(cli, &base)?;
    for run in &runs {
        match cli.command {
            Command::Split => commands::split(run)?,
            Command::PseudoGlobal => commands::pseudo_global(run)?,
            Command::PseudoBatch => commands::pseudo_batch(run)?,
            Command::Train => commands::train(run)?,
            Command::Eval => commands::eval(run)?,
            Command::Config => print!("{}", run.config.to_toml()?),
            Command::Run => {
                commands::split(run)?;
                commands::pseudo_global(run)?;
                commands::pseudo_batch(run)?;
                commands::train(run)?;
                commands::eval(run)?;
            }
            Command::Report | Command::Presets => {}
        }
    }
    if matches!(cli.command, Command::Report | Command::Run) {
        let p = cli.preset.as_deref().map(preset).transpose()?;
        report::write(&cli.out, p.as_ref(), &runs)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
