use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loopmem::scenario::{run, write_report, Command, Figure, Scenario, ScenarioError};
use serde_json::json;

/// Loop-and-switch quantum memory simulator.
#[derive(Debug, Parser)]
#[command(name = "loopmem", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Storage outcomes for every input state and N in the scenario range.
    Simulate(Common),
    /// Decay-vs-N scan and exponential fit.
    Decay(Common),
    /// Malus scan and visibility fit.
    Malus(Common),
    /// Tomography scan, MLE reconstruction and Monte Carlo error bars.
    Tomo(Common),
    /// Loss-budget projection.
    Budget(Common),
    /// Bundled figure pipelines.
    Reproduce {
        #[arg(value_parser = ["fig2c", "fig3", "fig4"])]
        figure: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Built-in preset: paper-short, paper-long or paper-improved.
    #[arg(long)]
    preset: Option<String>,
    /// RNG seed; overrides the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "LOOPMEM_OUT")]
    out: Option<PathBuf>,
}

fn execute(command: Command, common: Common) -> Result<serde_json::Value, ScenarioError> {
    let mut scenario = match (&common.scenario, &common.preset) {
        (Some(path), preset) => Scenario::load(path, preset.as_deref())?,
        (None, Some(preset)) => Scenario::preset(preset)?,
        (None, None) => return Err(ScenarioError::Invalid("pass --scenario or --preset".into())),
    };
    if let Some(seed) = common.seed {
        scenario.seed = Some(seed);
    }
    let out = common
        .out
        .or_else(|| scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("loopmem-out"));
    let report = run(&scenario, command)?;
    let files = write_report(&out, &report)?;
    Ok(json!({
        "command": report.command,
        "output_dir": out,
        "files": files,
        "summary": report.summary,
    }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    let (command, common) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Decay(c) => (Command::Decay, c),
        Cmd::Malus(c) => (Command::Malus, c),
        Cmd::Tomo(c) => (Command::Tomo, c),
        Cmd::Budget(c) => (Command::Budget, c),
        Cmd::Reproduce { figure, common } => {
            let figure: Figure = figure.parse().expect("validated by clap");
            (Command::Reproduce(figure), common)
        }
    };
    match execute(command, common) {
        Ok(v) => {
            let _ = writeln!(
                std::io::stdout().lock(),
                "{}",
                serde_json::to_string_pretty(&v).expect("json")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
