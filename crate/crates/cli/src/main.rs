use std::process::ExitCode;

use clap::Parser;
use gridloc_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
