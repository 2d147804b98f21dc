mod commands;
mod config;
mod plot;

use std::process::ExitCode;

use clap::Parser;

use config::{Cli, RunConfig};

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CR3BP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("CR3BP_THREADS must be a positive integer, got {v:?}"))?;
        anyhow::ensure!(n > 0, "CR3BP_THREADS must be a positive integer, got {v:?}");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = init_threads()
        .and_then(|_| Ok(RunConfig::from_cli(cli)?))
        .and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(o) => {
            for l in &o.lines {
                println!("{l}");
            }
            if o.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
