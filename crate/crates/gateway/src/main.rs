use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ops_agent::app::{App, BuildOptions, SessionOptions};
use ops_agent::config::{ApprovalModeName, Config};
use ops_agent::sessions::{SessionEvent, SessionRecord, SessionStatus};
use ops_core::react::{render_transcript, ScriptedModel, StepEvent};
use ops_core::tools::run_procedure;

#[derive(Parser)]
#[command(
    name = "ops-agent",
    version,
    about = "Operations assistant for the simulated accelerator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP/SSE service and the control-protocol server.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario fixture to use instead of the configured model.
        #[arg(long)]
        stub: Option<PathBuf>,
    },
    /// Run one task and print the final answer.
    Ask {
        task: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stub: Option<PathBuf>,
        /// Print thoughts, tool calls and observations as well.
        #[arg(long)]
        show_cot: bool,
        /// Execute machine writes without waiting for an operator.
        #[arg(long)]
        auto_approve: bool,
        /// Use this UTC time (seconds) as "now" instead of the system clock.
        #[arg(long)]
        fixed_epoch: Option<i64>,
        /// Write the full transcript as JSON.
        #[arg(long)]
        transcript_out: Option<PathBuf>,
    },
    /// Execute a procedure document against the simulator.
    RunProcedure {
        file: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fixed_epoch: Option<i64>,
    },
    /// Print a stored transcript or session record.
    Replay {
        file: PathBuf,
        #[arg(long)]
        show_cot: bool,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn print_events(events: &[StepEvent], show_cot: bool) {
    for e in events {
        if show_cot || !e.is_chain_of_thought() {
            print!("{}", render_transcript(std::slice::from_ref(e)));
        }
    }
}

fn ask(
    task: &str,
    config: Option<&Path>,
    stub: Option<PathBuf>,
    show_cot: bool,
    auto_approve: bool,
    fixed_epoch: Option<i64>,
    transcript_out: Option<&Path>,
) -> anyhow::Result<bool> {
    let mut config = load_config(config)?;
    // nobody can approve from a one-shot run, so writes either go through
    // directly or are left pending
    config.approval.mode = ApprovalModeName::Deferred;
    if fixed_epoch.is_some() {
        config.fixed_epoch = fixed_epoch;
    }
    let app = App::build(
        config,
        BuildOptions {
            persistent: false,
            stub,
            model: None,
        },
    )?;
    let id = app.create_session(
        task,
        &SessionOptions {
            show_cot,
            auto_approve,
            limits: None,
        },
    );
    let sub = app.sessions.subscribe(&id).expect("session just created");
    let mut rx = sub.live.expect("fresh session is live");
    let worker = {
        let (app, id) = (app.clone(), id.clone());
        std::thread::spawn(move || app.run_session(&id))
    };
    // print while the session runs
    while let Ok(n) = rx.blocking_recv() {
        match n.event {
            SessionEvent::Step { event } => print_events(&[event], show_cot),
            SessionEvent::ApprovalRequested { write } if show_cot => {
                eprintln!("[approval requested: {} {}]", write.id, write.describe())
            }
            SessionEvent::Done { .. } => break,
            _ => {}
        }
    }
    let status = worker.join().expect("session thread");
    let record = app.sessions.get(&id).expect("session exists");
    if let Some(out) = transcript_out {
        let json = serde_json::to_string_pretty(&record.transcript)?;
        std::fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    match status {
        SessionStatus::Failed(why) => {
            eprintln!("error: session failed: {why}");
            Ok(false)
        }
        _ => Ok(true),
    }
}

fn replay(file: &Path, show_cot: bool) -> anyhow::Result<()> {
    let text =
        std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let events: Vec<StepEvent> = match serde_json::from_str::<Vec<StepEvent>>(&text) {
        Ok(v) => v,
        Err(_) => {
            serde_json::from_str::<SessionRecord>(&text)
                .with_context(|| {
                    format!(
                        "{} is neither a transcript nor a session record",
                        file.display()
                    )
                })?
                .transcript
        }
    };
    print_events(&events, show_cot);
    Ok(())
}

fn procedure(file: &Path, config: Option<&Path>, fixed_epoch: Option<i64>) -> anyhow::Result<bool> {
    let mut config = load_config(config)?;
    if fixed_epoch.is_some() {
        config.fixed_epoch = fixed_epoch;
    }
    // the procedure runner never consults a model
    let model = Arc::new(ScriptedModel::new(vec![]));
    let app = App::build(
        config,
        BuildOptions {
            persistent: false,
            stub: None,
            model: Some(model),
        },
    )?;
    let doc =
        std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    match run_procedure(&app.env, &doc) {
        Ok(text) => {
            println!("{text}");
            for e in app
                .env
                .logbook
                .entries()
                .iter()
                .filter(|e| e.tags.iter().any(|t| t == "procedure"))
            {
                println!("logbook #{}: {}\n{}", e.id, e.title, e.body);
            }
            Ok(true)
        }
        Err(text) => {
            println!("{text}");
            Ok(false)
        }
    }
}

async fn serve(config: Option<&Path>, stub: Option<PathBuf>) -> anyhow::Result<()> {
    let config = load_config(config)?;
    let app = App::build(
        config,
        BuildOptions {
            persistent: true,
            stub,
            model: None,
        },
    )?;
    app.start_ticker();
    if let Some(addr) = &app.config.control_listen {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!("control protocol on {addr}");
        let machine = app.env.machine.clone();
        tokio::spawn(async move {
            if let Err(e) = ops_agent::control::serve(listener, machine).await {
                tracing::error!("control server stopped: {e}");
            }
        });
    }
    let addr = app.config.listen.clone();
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    tracing::info!("http on {addr}");
    axum::serve(listener, ops_agent::http::router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config, stub } => tokio::runtime::Runtime::new()
            .context("starting runtime")
            .and_then(|rt| rt.block_on(serve(config.as_deref(), stub)))
            .map(|()| true),
        Command::Ask {
            task,
            config,
            stub,
            show_cot,
            auto_approve,
            fixed_epoch,
            transcript_out,
        } => ask(
            &task,
            config.as_deref(),
            stub,
            show_cot,
            auto_approve,
            fixed_epoch,
            transcript_out.as_deref(),
        ),
        Command::RunProcedure {
            file,
            config,
            fixed_epoch,
        } => procedure(&file, config.as_deref(), fixed_epoch),
        Command::Replay { file, show_cot } => replay(&file, show_cot).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
