//! Runs scenario scripts against an in-process CAP and prints JSON reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use ztf_harness::scenario::{run_scenario, Scenario};

#[derive(Parser)]
#[command(name = "ztf-scenario", about = "Run federation scenario scripts")]
struct Args {
    /// Scenario JSON files.
    #[arg(required = true)]
    scenarios: Vec<PathBuf>,
    /// Pretty-print the reports.
    #[arg(long)]
    pretty: bool,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    let mut ok = true;
    for path in &args.scenarios {
        let result = match Scenario::load(path) {
            Ok(s) => run_scenario(&s).await,
            Err(e) => Err(e),
        };
        match result {
            Ok(report) => {
                ok &= report.passed;
                let text = if args.pretty {
                    serde_json::to_string_pretty(&report)
                } else {
                    serde_json::to_string(&report)
                };
                println!("{}", text.expect("report serializes"));
            }
            Err(e) => {
                ok = false;
                eprintln!("{}: {e}", path.display());
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
