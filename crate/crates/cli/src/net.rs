use std::io::Write;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::Args;
use log::warn;
use slip_core::checkpoint::{CharlieBundle, DavidBundle};
use slip_core::protocol::{Party, SecurityMode};
use slip_transport::{david_request_inference, CharlieService, EndpointConfig};

use crate::io::{read_input, require_files, write_json, OutputFile};

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: String,
    #[arg(long)]
    pub charlie: PathBuf,
    /// Exit after this many sessions; serve forever when absent.
    #[arg(long)]
    pub sessions: Option<usize>,
    /// Inference ids whose pads are drawn when a session opens.
    #[arg(long, default_value_t = 1)]
    pub budget: u64,
    /// Refuse an inference id more than this many ids past the drawn pads.
    #[arg(long, default_value_t = 64)]
    pub max_replenish: u64,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
    /// Send activations unmasked. Leaks the hidden weights; for attack demos only.
    #[arg(long)]
    pub insecure: bool,
}

pub fn serve(a: &ServeArgs, seed: u64) -> Result<()> {
    require_files([&a.charlie])?;
    let bundle = CharlieBundle::load(&a.charlie).with_context(|| format!("loading {}", a.charlie.display()))?;
    let mut config = EndpointConfig::for_topology(Party::Charlie, a.bind.clone(), &bundle.topology);
    config.session_timeout = Duration::from_secs(a.timeout_secs);
    let mode = if a.insecure {
        warn!("serving in insecure mode: activations cross the wire in the clear");
        SecurityMode::Insecure
    } else {
        SecurityMode::Secure
    };
    let mut service = CharlieService::new(bundle, seed, mode, config);
    service.budget = a.budget;
    service.max_replenish = a.max_replenish;
    let listener = TcpListener::bind(&a.bind).with_context(|| format!("binding {}", a.bind))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    let reports = Arc::new(service).serve_tcp(listener, a.sessions)?;
    for r in &reports {
        let line = serde_json::json!({
            "session_id": r.session_id,
            "completed": r.completed,
            "aborted": r.aborted,
            "error": r.error.as_ref().map(|e| e.to_string()),
            "charlie_online_macs": r.counters().macs,
        });
        println!("{line}");
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub connect: String,
    #[arg(long)]
    pub david: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Session id; derived from the seed when absent. Charlie refuses reuse.
    #[arg(long)]
    pub session: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub inference_id: u64,
    /// Save the frames exchanged during the inference.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
}

pub fn infer(a: &InferArgs, seed: u64) -> Result<()> {
    require_files([&a.david, &a.input])?;
    let bundle = DavidBundle::load(&a.david).with_context(|| format!("loading {}", a.david.display()))?;
    let x = read_input(&a.input)?;
    let mut config = EndpointConfig::for_topology(Party::David, a.connect.clone(), &bundle.topology);
    config.session_timeout = Duration::from_secs(a.timeout_secs);
    let session = a.session.unwrap_or(seed);
    let run = david_request_inference(&config, &bundle, session, a.inference_id, &x)?;
    if let Some(p) = &a.transcript {
        run.file.save(p)?;
    }
    write_json(&a.out, &OutputFile::new(&run.output, x.rows(), &bundle.ring)?)
}
