use std::process::ExitCode;

use clap::Parser;
use triage_cli::{apply_overrides, base_config, run_batch, server, Cli, Command};
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = format!("{e:#}"), "command failed");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = base_config(cli)?;
    apply_overrides(&mut cfg, &cli.command);
    cfg.validate().map_err(anyhow::Error::msg)?;
    if let Command::Serve(_) = cli.command {
        let rt = tokio::runtime::Runtime::new()?;
        return rt.block_on(server::serve(cfg));
    }
    let out = run_batch(&cfg, &cli.command)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
