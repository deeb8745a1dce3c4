//! `multiport`: runs configured experiments and writes their artifacts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multiport::harness::{self, Command, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(
    name = "multiport",
    version,
    about = "Multi-port MIMO experiment runner"
)]
struct Cli {
    /// JSON config; defaults apply to every absent field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the number of Monte Carlo realizations.
    #[arg(long, global = true)]
    realizations: Option<usize>,
    /// Directory for CSV files, checkpoints and manifests.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Dotted field override, e.g. `--set scenario.n_mu=10`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Dump DMA channel realizations.
    SynthChannel,
    /// Tune DMA element loads and report SE.
    TuneDma,
    /// Train PGD-Net and write its checkpoint.
    TrainPgd,
    /// Compare PGD-Net against line-searched fixed-step PGD.
    EvalPgd,
    /// Train one AO-Net per configured depth.
    TrainAo,
    /// Compare equal power, WMMSE and AO-Net.
    EvalPower,
    /// SE against elements per waveguide for each design model.
    Sweep,
    /// Multiply-count estimates.
    Complexity,
    /// SE and energy efficiency of FD, FC hybrid and DMA.
    EeReport,
    /// Check the config and print every diagnostic.
    Validate,
}

impl Cmd {
    fn experiment(self) -> Option<Command> {
        Some(match self {
            Cmd::SynthChannel => Command::SynthChannel,
            Cmd::TuneDma => Command::TuneDma,
            Cmd::TrainPgd => Command::TrainPgd,
            Cmd::EvalPgd => Command::EvalPgd,
            Cmd::TrainAo => Command::TrainAo,
            Cmd::EvalPower => Command::EvalPower,
            Cmd::Sweep => Command::Sweep,
            Cmd::Complexity => Command::Complexity,
            Cmd::EeReport => Command::EeReport,
            Cmd::Validate => return None,
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: &Cli) -> Result<(), String> {
    let source = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => "{\"seed\": 1}".to_string(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(r) = cli.realizations {
        overrides.push(format!("realizations={r}"));
    }
    if let Some(d) = &cli.out_dir {
        overrides.push(format!(
            "out_dir={}",
            serde_json::Value::from(d.to_string_lossy())
        ));
    }
    let (cfg, diags) = ExperimentConfig::parse(&source, &overrides).map_err(|e| e.to_string())?;
    let origin = cli
        .config
        .as_ref()
        .map_or("<defaults>".into(), |p| p.display().to_string());
    if !diags.is_empty() {
        let lines: Vec<String> = diags.iter().map(|d| format!("{origin}: {d}")).collect();
        return Err(format!("invalid configuration\n{}", lines.join("\n")));
    }
    let Some(command) = cli.command.experiment() else {
        println!("{origin}: ok");
        return Ok(());
    };
    let report = harness::run(command, &cfg).map_err(|e| e.to_string())?;
    for line in &report.summary {
        println!("{line}");
    }
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
