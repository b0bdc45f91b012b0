use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rmpc_core::catalog;
use rmpc_core::experiment::{run_experiment, system_seed, write_outputs, ExperimentConfig};
use rmpc_core::netmpc::{CentralNode, LocalNode, TcpLink, DEFAULT_PORT};
use rmpc_core::simulator::{aggregate, default_max_steps, rollout_with, RolloutMetrics, SamplingMode, StateSampler};
use rmpc_core::strategies::{Strategy, StrategyOptions};

#[derive(Parser)]
#[command(name = "rmpc", version, about = "Regional MPC: reuse affine feedback laws, solve QPs on demand")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config and write CSV and markdown tables.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Roll out one strategy on one system and print the summary table.
    Run {
        #[arg(long)]
        system: String,
        #[arg(long, default_value = "basic")]
        strategy: Strategy,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        starts: usize,
        #[arg(long, default_value_t = 10)]
        limit: usize,
        /// Route every solve through an in-process central node.
        #[arg(long)]
        networked: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Serve QP requests for one system over TCP.
    NetCentral {
        #[arg(long)]
        system: String,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "0.0.0.0")]
        bind: String,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Close the loop locally, asking a central node over TCP when no law applies.
    NetLocal {
        #[arg(long, default_value = "127.0.0.1")]
        addr: String,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long)]
        system: String,
        #[arg(long, default_value = "basic")]
        strategy: Strategy,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        starts: usize,
        #[arg(long, default_value_t = 10)]
        limit: usize,
        /// Quantize measurements and inputs with this many bits (0 = off).
        #[arg(long, default_value_t = 0)]
        quantize_bits: u32,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bench { config, output } => {
            let mut cfg = ExperimentConfig::from_json(&std::fs::read_to_string(&config)?)?;
            if output.is_some() {
                cfg.output = output;
            }
            let out = run_experiment(&cfg)?;
            print!("{}", out.table.to_markdown());
        }
        Command::Run { system, strategy, seed, starts, limit, networked, output } => {
            let cfg = ExperimentConfig {
                systems: vec![system],
                strategies: vec![strategy],
                n_starts: starts,
                seed,
                networked,
                options: StrategyOptions { limit },
                ..ExperimentConfig::default()
            };
            let out = run_experiment(&cfg)?;
            if let Some(dir) = output {
                write_outputs(&dir, &out.records, &out.table)?;
            }
            print!("{}", out.table.to_markdown());
        }
        Command::NetCentral { system, port, bind, limit } => {
            let sys = catalog::load_system(&system)?;
            let listener = TcpListener::bind((bind.as_str(), port))?;
            log::info!("{}: serving q = {} on {}", sys.name, sys.qp.q(), listener.local_addr()?);
            Arc::new(CentralNode::new(Arc::new(sys.qp), StrategyOptions { limit })).serve_tcp(listener)?;
        }
        Command::NetLocal { addr, port, system, strategy, seed, starts, limit, quantize_bits } => {
            let sys = catalog::load_system(&system)?;
            let qp = Arc::new(sys.qp.clone());
            let mut sampler = StateSampler::new(&sys.qp, sys.box_constraints(), system_seed(seed, &sys.name), SamplingMode::Auto)?;
            let max_steps = default_max_steps(&sys.spec);
            let mut metrics = Vec::new();
            for j in 0..starts {
                let x0 = sampler.next_state(&sys.qp)?;
                let link = TcpLink::connect((addr.as_str(), port))?;
                let mut node = LocalNode::new(&sys.spec, Arc::clone(&qp), strategy, StrategyOptions { limit }, link);
                if quantize_bits > 0 {
                    node = node.with_quantization(sys.box_constraints(), quantize_bits);
                }
                let tr = rollout_with(&sys.spec, &mut node, &x0, 1e-3, max_steps)?;
                let m = RolloutMetrics::from_trajectory(&tr, sys.qp.q());
                println!(
                    "start {j}: steps {} requests {} payload {} B (up {} B, down {} B)",
                    m.n_steps, node.stats.requests, node.stats.payload_bytes, node.stats.bytes_up, node.stats.bytes_down
                );
                metrics.push(m);
            }
            if let Some(s) = aggregate(&metrics) {
                println!(
                    "{} {strategy}: mean requests {:.3}, mean data {:.3} B, reusability {}",
                    sys.name,
                    s.requests,
                    s.payload_bytes,
                    s.reusability.map_or("n/a".into(), |r| format!("{:.1} %", 100.0 * r))
                );
            }
        }
    }
    Ok(())
}
