mod attack;
mod cost;
mod io;
mod model_cmds;
mod net;

use std::io::Write;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::io::Usage;

#[derive(Debug, Parser)]
#[command(
    name = "slip",
    version,
    about = "Hybrid inference with the sensitive weight components kept on a trusted host"
)]
struct Cli {
    /// Seed for every random draw. Presets fall back to a fixed seed, network roles to OS entropy.
    #[arg(long, global = true, env = "SLIP_SEED")]
    seed: Option<u64>,
    /// Append a JSON error line to stderr on failure.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a random toy model checkpoint.
    Gen(model_cmds::GenArgs),
    /// Split a model into Charlie and David bundles.
    Decompose(model_cmds::DecomposeArgs),
    /// Singular values of one layer as CSV.
    Spectrum(model_cmds::SpectrumArgs),
    /// Hold the hidden components and answer sessions over TCP.
    ServeCharlie(net::ServeArgs),
    /// Run one inference against a Charlie server.
    Infer(net::InferArgs),
    /// Run the quantized reference forward pass in one process.
    InferLocal(model_cmds::InferLocalArgs),
    /// Run an attack and write its report.
    Attack(attack::AttackArgs),
    /// Latency model for a split deployment.
    Cost(cost::CostArgs),
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let entropy = || cli.seed.unwrap_or_else(rand::random);
    match &cli.command {
        Command::Gen(a) => model_cmds::gen(a, cli.seed),
        Command::Decompose(a) => model_cmds::decompose(a),
        Command::Spectrum(a) => model_cmds::spectrum(a),
        Command::ServeCharlie(a) => net::serve(a, entropy()),
        Command::Infer(a) => net::infer(a, entropy()),
        Command::InferLocal(a) => model_cmds::infer_local(a),
        Command::Attack(a) => attack::attack(a, entropy()),
        Command::Cost(a) => cost::cost(a),
    }
}

fn trailer(msg: &str, code: u8) {
    let _ = writeln!(std::io::stderr(), "{}", serde_json::json!({ "error": msg, "exit_code": code }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let json_flag = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            _ => {
                let _ = e.print();
                if json_flag {
                    trailer(&e.kind().to_string(), 1);
                }
                return ExitCode::from(1);
            }
        },
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.downcast_ref::<Usage>().is_some() { 1 } else { 2 };
            let msg = format!("{e:#}");
            eprintln!("error: {msg}");
            if cli.json {
                trailer(&msg, code);
            }
            ExitCode::from(code)
        }
    }
}
