use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use inpaint_service::{AppState, ServiceConfig};

/// Inpainting session service.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// TOML configuration file; environment variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().init();
    let args = Args::parse();
    let config = match ServiceConfig::load(args.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let state = match AppState::open(config.clone()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let listener = match tokio::net::TcpListener::bind(&config.listen).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("cannot listen on {}: {e}", config.listen);
            return ExitCode::from(1);
        }
    };
    tracing::info!("listening on {}", config.listen);
    let server = inpaint_service::serve(listener, state);
    tokio::select! {
        r = server => if let Err(e) = r {
            eprintln!("{e}");
            return ExitCode::from(1);
        },
        _ = tokio::signal::ctrl_c() => {}
    }
    ExitCode::SUCCESS
}
