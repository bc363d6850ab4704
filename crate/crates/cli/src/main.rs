use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use contest_ite::pipeline::Artifacts;
use contest_ite_cli::{run, serve_address, server, Cli, Command};
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Serve { address } => serve_main(&cli, address.as_deref()),
        _ => run(&cli, &mut std::io::stdout().lock()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn serve_main(cli: &Cli, address: Option<&str>) -> anyhow::Result<()> {
    let address = serve_address(cli, address)?;
    let art = Arc::new(Artifacts::load(&cli.out)?);
    tokio::runtime::Runtime::new()?.block_on(server::serve(art, &address))
}
