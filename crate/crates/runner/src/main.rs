use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nas_core::decode::{CellDecode, DecodeOptions, PathDecode};
use nas_runner::commands::*;
use nas_runner::config::RunConfig;

/// Differentiable and evolutionary architecture search for segmentation networks.
#[derive(Parser)]
#[command(name = "nas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a supernet and save its architecture parameters and entropy trace.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the config's output_dir.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Decode the searched architecture into a genotype and DOT graphs.
    Decode {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_parser = parse_cell)]
        cell: Option<CellDecode>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_parser = parse_paths)]
        paths: Option<PathDecode>,
    },
    /// Train the decoded network from scratch and evaluate it on the test split.
    Retrain {
        #[arg(long)]
        run: PathBuf,
        /// Genotype file to train instead of the decoded one.
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Retrain randomly sampled cells with the same budget as the searched one.
    RandomBaseline {
        #[arg(long, required_unless_present = "run")]
        config: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Number of samples; defaults to the config's random_samples.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Evolutionary search with a pool of training workers.
    Evolve {
        #[arg(long, required_unless_present = "run")]
        config: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Continue from the run's history, replaying finished generations.
        #[arg(long)]
        resume: bool,
        /// Stop after this generation is written (simulates an interruption).
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Summarize a run directory as markdown.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn parse_cell(s: &str) -> Result<CellDecode, String> {
    match s {
        "argmax" => Ok(CellDecode::Argmax),
        "topk" => Ok(CellDecode::Topk),
        "normalized" => Ok(CellDecode::Normalized),
        _ => Err(format!("unknown cell decoder `{s}` (argmax, topk, normalized)")),
    }
}

fn parse_paths(s: &str) -> Result<PathDecode, String> {
    match s {
        "full" => Ok(PathDecode::Full),
        "viterbi" => Ok(PathDecode::Viterbi),
        "multipath" => Ok(PathDecode::Multipath),
        _ => Err(format!("unknown path decoder `{s}` (full, viterbi, multipath)")),
    }
}

fn load(config: Option<&PathBuf>, run: Option<&PathBuf>) -> Result<PathBuf> {
    let cfg = config.map(|p| RunConfig::load(p)).transpose()?;
    let (dir, _) = open_run(cfg.as_ref(), run.map(|p| p.as_path()))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    use serde_json::json;
    Ok(match cli.command {
        Command::Search { config, run } => {
            let cfg = RunConfig::load(&config)?;
            let (dir, s) = cmd_search(&cfg, run.as_deref())?;
            json!({"command": "search", "run": dir, "summary": s})
        }
        Command::Decode { run, cell, k, paths } => {
            let m = nas_runner::formats::RunManifest::load(&run)?;
            let d = m.config.decode.options();
            let opts = DecodeOptions {
                cell: cell.unwrap_or(d.cell),
                k: k.unwrap_or(d.k),
                paths: paths.unwrap_or(d.paths),
                path_cap: d.path_cap,
            };
            let g = cmd_decode(&run, Some(opts))?;
            json!({"command": "decode", "run": run, "edges": g.normal.edges.len(), "parameter_free": g.is_parameter_free()})
        }
        Command::Retrain { run, genotype } => {
            let s = cmd_retrain(&run, genotype.as_deref())?;
            json!({"command": "retrain", "run": run, "summary": s})
        }
        Command::RandomBaseline { config, run, n } => {
            let dir = load(config.as_ref(), run.as_ref())?;
            let m = nas_runner::formats::RunManifest::load(&dir)?;
            let r = cmd_random_baseline(&dir, n.unwrap_or(m.config.random_samples))?;
            json!({"command": "random-baseline", "run": dir, "report": r})
        }
        Command::Evolve { config, run, resume, stop_after } => {
            let dir = load(config.as_ref(), run.as_ref())?;
            let s = cmd_evolve(&dir, resume, stop_after)?;
            json!({"command": "evolve", "run": dir, "records": s.records, "best_fitness": s.best_fitness, "completed": s.completed})
        }
        Command::Report { run } => {
            let text = cmd_report(&run)?;
            print!("{text}");
            json!({"command": "report", "run": run})
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml().context("serializing the default config")?);
            return Ok(serde_json::Value::Null);
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            eprintln!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({"error": chain.join(": "), "ok": false}));
            ExitCode::FAILURE
        }
    }
}
