use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use radm_cli::commands::{self, AblateArgs, EvalArgs, GenerateArgs, SynthArgs, TrainArgs};
use radm_cli::server::{router, AppState, Dataset, LoadedModel};
use radm_core::checkpoint::load_checkpoint;

/// Poster layout generation with a relation-aware diffusion model.
#[derive(Debug, Parser)]
#[command(name = "radm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic poster dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Generate a layout for one background.
    Generate(GenerateArgs),
    /// Score layouts against a dataset.
    Eval(EvalArgs),
    /// Train and score module ablations.
    Ablate(AblateArgs),
    /// Serve the HTTP API and UI.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "RADM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "RADM_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "RADM_DATASET_DIR")]
    data: Option<PathBuf>,
    /// Directory with the UI bundle.
    #[arg(long, env = "RADM_STATIC_DIR")]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn serve(a: &ServeArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => {
            let c = load_checkpoint(p, None).with_context(|| format!("loading {}", p.display()))?;
            Some(Arc::new(LoadedModel::new(c)?))
        }
        None => {
            log::warn!("no checkpoint given; /api/generate will answer 503");
            None
        }
    };
    let dataset = match &a.data {
        Some(d) => Some(Arc::new(Dataset::open(d).with_context(|| format!("opening {}", d.display()))?)),
        None => None,
    };
    let app = router(AppState { model, dataset }, a.static_dir.as_deref());
    let addr = format!("{}:{}", a.host, a.port);
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(async move {
            let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
            log::info!("listening on {addr}");
            eprintln!("listening on http://{addr}");
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
            Ok(())
        })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
