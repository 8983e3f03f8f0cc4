//! `nettop` command-line front end.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "nettop", version, about = "Dynamic network topology identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bs,
    BsIterEm,
    Glasso,
    Kglasso,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random stable network and simulate node data.
    Generate {
        #[arg(long = "L", visible_alias = "nodes", default_value_t = 6)]
        nodes: usize,
        #[arg(long = "N", visible_alias = "samples", default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0.5)]
        edge_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for system.json, data.csv and manifest.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Estimate the topology of measured node data.
    Identify {
        /// Data CSV with one column per node.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Bs)]
        method: Method,
        #[arg(long, default_value_t = 20)]
        order: usize,
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        /// One value, a comma list, or `start:stop:step`. Several values
        /// select delta by cross-validation.
        #[arg(long, default_value = "0:2000:10")]
        delta_grid: String,
        /// Kernel shapes for kglasso; several values are cross-validated.
        #[arg(long, default_value = "0.1:0.9:0.1")]
        beta_grid: String,
        /// Seed of the initial noise level of the EM runs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file whose fields override the flags above.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for topology.json, traces.jsonl and timing.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a Monte-Carlo benchmark from an experiment file or a named preset.
    Benchmark {
        /// Experiment JSON; its fields take precedence over flags.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        spec: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Master seed (presets only).
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Trial count override (presets only).
        #[arg(long)]
        trials: Option<usize>,
        /// Worker threads; defaults to NETTOP_THREADS, then all cores.
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory for results.csv and metadata.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the full-graph EM trace and the search trace of one node.
    TraceDump {
        #[arg(long)]
        data: PathBuf,
        /// Target node, 0-based.
        #[arg(long)]
        node: usize,
        #[arg(long, default_value_t = 20)]
        order: usize,
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        #[arg(long, value_enum, default_value_t = Method::Bs)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for em_trace.csv and search_trace.jsonl.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// List the benchmark presets.
    Presets,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            nodes,
            samples,
            edge_prob,
            seed,
            out,
        } => commands::generate(nodes, samples, edge_prob, seed, &out),
        Command::Identify {
            data,
            method,
            order,
            tau,
            delta_grid,
            beta_grid,
            seed,
            config,
            out,
        } => {
            let args = commands::IdentifyArgs {
                method,
                order,
                tau,
                delta_grid: commands::parse_grid(&delta_grid)?,
                beta_grid: commands::parse_grid(&beta_grid)?,
                seed,
            };
            commands::identify(&data, args, config.as_deref(), &out)
        }
        Command::Benchmark {
            spec,
            preset,
            seed,
            trials,
            threads,
            out,
        } => commands::benchmark(spec.as_deref(), preset.as_deref(), seed, trials, threads, out.as_deref()),
        Command::TraceDump {
            data,
            node,
            order,
            tau,
            method,
            seed,
            out,
        } => commands::trace_dump(&data, node, order, tau, method, seed, &out),
        Command::Presets => {
            for name in nettop::eval::PRESETS {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
