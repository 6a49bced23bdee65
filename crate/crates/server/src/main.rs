use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use learnlog_core::auth::IdentityVerifier;
use learnlog_core::loadgen::{self, LoadgenParams};
use learnlog_core::{ActivityConfig, ActivityRegistry, EventStore, LogService, Timestamp};
use learnlog_server::app::build_state;
use learnlog_server::config::ServiceConfig;
use learnlog_server::http::router;
use learnlog_server::loadgen_http::drive_http;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "learnlog", version, about = "Learning-analytics logging service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write one activity's sessions and events to an export stream.
    Export {
        /// Journal file of the file-backed store.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        activity: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load an export stream into a (new or existing) journal.
    Import {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Generate a deterministic synthetic workload.
    Loadgen(LoadgenArgs),
    /// Issue a viewer bearer token for the identity stub.
    IssueToken {
        #[arg(long, env = "LEARNLOG_IDENTITY_SECRET")]
        secret: String,
        #[arg(long)]
        principal: String,
        #[arg(long, default_value_t = 24)]
        ttl_hours: i64,
    },
}

#[derive(Args)]
struct LoadgenArgs {
    #[arg(long, default_value_t = 156)]
    users: usize,
    #[arg(long, default_value_t = 965)]
    sessions: usize,
    #[arg(long, default_value_t = 24_655)]
    events: usize,
    #[arg(long, default_value_t = 11)]
    help_requests: usize,
    #[arg(long, default_value_t = 0)]
    opt_out_sessions: usize,
    #[arg(long, default_value_t = 2012)]
    seed: u64,
    /// Comma-separated success probabilities per exercise position.
    #[arg(long, value_delimiter = ',')]
    success_rates: Option<Vec<f64>>,
    /// `direct-store`, or the base URL of a running server.
    #[arg(long, default_value = "direct-store")]
    target: String,
    /// Directory of activity XML files (signing keys, exercises).
    #[arg(long)]
    config_dir: PathBuf,
    /// Activity to load; optional when the directory holds exactly one.
    #[arg(long)]
    activity: Option<String>,
    /// Journal for `direct-store`; in-memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write an export stream after a `direct-store` run.
    #[arg(long)]
    export: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("LEARNLOG_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve { config } => serve(config),
        Command::Export { data, activity, out } => {
            let store = EventStore::open(&data).with_context(|| format!("opening {}", data.display()))?;
            let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            let summary = store.export_all(&activity, &mut w)?;
            w.flush()?;
            println!("exported {} sessions, {} events", summary.sessions, summary.events);
            Ok(())
        }
        Command::Import { data, input } => {
            let store = EventStore::open(&data).with_context(|| format!("opening {}", data.display()))?;
            let mut r = BufReader::new(File::open(&input).with_context(|| format!("opening {}", input.display()))?);
            let summary = store.import(&mut r)?;
            println!("imported {} sessions, {} events", summary.sessions, summary.events);
            Ok(())
        }
        Command::Loadgen(args) => run_loadgen(args),
        Command::IssueToken {
            secret,
            principal,
            ttl_hours,
        } => {
            let expires = Timestamp::now().saturating_add_millis(ttl_hours * 3_600_000);
            println!("{}", IdentityVerifier::new(secret).issue(&principal, expires));
            Ok(())
        }
    }
}

fn serve(config: PathBuf) -> anyhow::Result<()> {
    let cfg = ServiceConfig::load(&config)?;
    let state = Arc::new(build_state(&cfg)?);
    tracing::info!(
        listen = %cfg.listen,
        activities = state.service.activities().len(),
        durable = state.service.store().is_durable(),
        "starting"
    );
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })
}

fn pick_activity(registry: &ActivityRegistry, wanted: Option<&str>) -> anyhow::Result<Arc<ActivityConfig>> {
    match wanted {
        Some(id) => registry.get(id).cloned().with_context(|| format!("no activity {id:?}")),
        None if registry.len() == 1 => Ok(registry.iter().next().expect("one").clone()),
        None => bail!("--activity is required when several activities are configured"),
    }
}

fn run_loadgen(args: LoadgenArgs) -> anyhow::Result<()> {
    let registry = ActivityRegistry::load_dir(&args.config_dir)?;
    let cfg = pick_activity(&registry, args.activity.as_deref())?;
    let mut params = LoadgenParams {
        users: args.users,
        sessions: args.sessions,
        events: args.events,
        help_requests: args.help_requests,
        opt_out_sessions: args.opt_out_sessions,
        seed: args.seed,
        ..LoadgenParams::default()
    };
    if let Some(rates) = args.success_rates {
        params.success_rates = rates;
    }
    let plan = loadgen::plan(&params, &cfg)?;
    let started = Instant::now();
    let summary = if args.target == "direct-store" {
        let store = Arc::new(match &args.data {
            Some(p) => EventStore::open(p)?,
            None => EventStore::in_memory(),
        });
        let service =
            LogService::new(registry.clone(), store.clone()).with_rng(ChaCha20Rng::seed_from_u64(params.id_seed()));
        let summary = loadgen::drive(&plan, &service)?;
        if let Some(out) = &args.export {
            let mut w = BufWriter::new(File::create(out)?);
            store.export_all(&cfg.activity_id, &mut w)?;
            w.flush()?;
        }
        summary
    } else {
        if args.data.is_some() || args.export.is_some() {
            bail!("--data and --export only apply to --target direct-store");
        }
        drive_http(&plan, &cfg, &args.target)?
    };
    let report = serde_json::json!({
        "summary": summary,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
