//! `toolplane-harness` CLI: run a JSON scenario file against a control
//! plane. By default an embedded server is started for the run; pass
//! `--addr` (plus `--data-dir`, for audit cross-checks) to target a server
//! that is already running.
//!
//! Exit codes: 0 scenario passed, 1 scenario failed or harness breakdown,
//! 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use toolplane_harness::{run_embedded, run_scenario, ScenarioSpec, ServerUnderTest};

#[derive(Parser)]
#[command(name = "toolplane-harness", version, about = "Scenario runner for toolplane")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and print the report as JSON
    Run {
        /// Path to the scenario JSON document
        file: PathBuf,
        /// Target a running server (host:port or URL) instead of embedding one
        #[arg(long, requires = "data_dir")]
        addr: Option<String>,
        /// The server's data directory (embedded runs create one when omitted)
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            file,
            addr,
            data_dir,
        } => {
            let spec = match ScenarioSpec::load(&file) {
                Ok(spec) => spec,
                Err(err) => {
                    eprintln!("error: {err}");
                    return ExitCode::from(2);
                }
            };
            let result = match addr {
                Some(addr) => {
                    let base_url = if addr.starts_with("http") {
                        addr
                    } else {
                        format!("http://{addr}")
                    };
                    let audit_log = data_dir
                        .expect("clap enforces --data-dir with --addr")
                        .join("audit.jsonl");
                    run_scenario(&spec, &ServerUnderTest { base_url, audit_log }).await
                }
                None => run_embedded(&spec, None, data_dir.as_deref()).await,
            };
            match result {
                Ok(report) => {
                    println!("{}", serde_json::to_string_pretty(&report).unwrap());
                    if report.pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
