use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use aor::{DetectorSpec, MllmSpec, RunOptions};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aor", version, about = "Object-anchored assistant sessions over recorded scenes")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a session headlessly, or serve it to a viewer with --serve.
    Run(RunArgs),
    /// Fold an event log into the final session state.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Write the state here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scene directory and print a summary.
    Validate {
        #[arg(long)]
        scene: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scene: PathBuf,
    /// scripted | http:<url>
    #[arg(long, default_value = "scripted")]
    detector: DetectorSpec,
    /// mock | mock:fixed:<text> | mock:fail:<msg> | mock:rules:<file> | replay:<store> | live:<url>
    #[arg(long, default_value = "mock")]
    mllm: MllmSpec,
    /// Serve the viewer protocol on this address instead of running headlessly.
    #[arg(long)]
    serve: Option<SocketAddr>,
    /// Record every reply into this replay store.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    dedup_radius: Option<f64>,
    #[arg(long)]
    min_confidence: Option<f64>,
    /// JSON-lines command trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Root for state/ and outbox/.
    #[arg(long, default_value = ".")]
    data_dir: PathBuf,
    #[arg(long, default_value = "1")]
    session_id: String,
    #[arg(long)]
    detect_every: Option<usize>,
    #[arg(long)]
    cadence_ms: Option<u64>,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        let mut o = RunOptions::new(&self.scene, self.mllm.clone());
        o.detector = self.detector.clone();
        o.record = self.record.clone();
        o.trace = self.trace.clone();
        o.data_dir = self.data_dir.clone();
        o.session_id = self.session_id.clone();
        if let Some(r) = self.dedup_radius {
            o.dedup_radius = r;
        }
        if let Some(c) = self.min_confidence {
            o.min_confidence = c;
        }
        if let Some(k) = self.detect_every {
            o.detect_every = k;
        }
        if let Some(c) = self.cadence_ms {
            o.cadence_ms = c;
        }
        o
    }
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let opts = args.options();
    match args.serve {
        None => {
            let s = aor::run(&opts)?;
            println!(
                "{} events, {} proxies, {} errors; log {}; state {}",
                s.events,
                s.proxies,
                s.errors,
                s.events_path.display(),
                s.state_path.display()
            );
        }
        Some(addr) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let handle = aor::server::start(opts.clone(), addr).await?;
                println!("serving on http://{}/ (websocket at /ws); ctrl-c to stop", handle.addr);
                tokio::signal::ctrl_c().await?;
                let state = handle.shutdown().await?;
                println!("{} events; log {}", state.last_seq, opts.events_path().display());
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(args) => run(args),
        Cmd::Replay { log, out } => aor::replay_file(&log).and_then(|state| {
            let text = aor::state_json(&state);
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display())),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }),
        Cmd::Validate { scene } => aor_core::scene::load_scene(&scene)
            .map(|s| {
                println!(
                    "{}: {} frames at {}x{}, {}",
                    s.name,
                    s.frame_count(),
                    s.intrinsics.width,
                    s.intrinsics.height,
                    match &s.ground_truth {
                        Some(gt) => format!("{} ground-truth detections", gt.values().map(Vec::len).sum::<usize>()),
                        None => "no ground truth".into(),
                    }
                );
            })
            .map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
