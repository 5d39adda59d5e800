//! Operator CLI for the coarse-to-fine CWE detection pipeline.
//!
//! Exit codes: 0 success, 2 configuration/validation failure, 3
//! provider/transport failure.

mod commands;
mod config;
mod error;
mod store;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::evolve::Stage;
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "cwe-scout", version, about = "Coarse-to-fine CWE detection with retrieval-grounded agents and evolved prompts")]
struct Cli {
    /// Run configuration document (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Providers configuration document (TOML)
    #[arg(long, global = true)]
    providers: Option<PathBuf>,

    /// Overrides the seed from the run configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for batch work
    #[arg(long, global = true, default_value_t = 4)]
    parallelism: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist the knowledge base from the training split
    BuildKb {
        /// Overwrite an existing store
        #[arg(long)]
        force: bool,
    },
    /// Evolve the router and detector prompts
    Evolve {
        /// Which stage to run: 1 (router), 2 (detectors), or all
        #[arg(long, default_value = "all")]
        stage: Stage,
    },
    /// Detect vulnerabilities in an input file of code samples
    Detect {
        /// Line-delimited input records {"id", "code"[, "label"]}
        #[arg(long)]
        input: PathBuf,
        /// Overrides pipeline.k from the run configuration
        #[arg(long)]
        k: Option<usize>,
        /// Call agents with empty evidence (retrieval ablation)
        #[arg(long)]
        no_retrieval: bool,
        /// One flat prompt over all types, no routing (agents ablation)
        #[arg(long)]
        no_agents: bool,
        /// Bypass evolved prompts with plain-text prompts from a directory
        #[arg(long)]
        manual_prompts: Option<PathBuf>,
    },
    /// Score report files against gold labels
    Evaluate {
        /// reports.jsonl produced by `detect`
        #[arg(long)]
        reports: PathBuf,
        /// Gold dataset (line-delimited records with labels)
        #[arg(long)]
        golds: PathBuf,
        /// Tolerated number of gold samples without a report
        #[arg(long, default_value_t = 0)]
        allow_missing: usize,
        /// Evaluate over every taxonomy label, not just gold-present ones
        #[arg(long)]
        full_universe: bool,
        /// Gold-count boundary for the few-shot tail
        #[arg(long, default_value_t = 500)]
        tail_boundary: usize,
        /// F1 threshold for tail coverage
        #[arg(long, default_value_t = 0.1)]
        coverage_threshold: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::config("missing --config <path>"))?;
    if !config_path.is_file() {
        return Err(CliError::config(format!(
            "run config not found at {}",
            config_path.display()
        )));
    }
    let config = RunConfig::load(config_path, cli.seed)?;
    let providers = cli.providers.as_deref();

    match &cli.command {
        Command::BuildKb { force } => commands::build_kb::run(&config, providers, *force),
        Command::Evolve { stage } => commands::evolve::run(&config, providers, *stage),
        Command::Detect {
            input,
            k,
            no_retrieval,
            no_agents,
            manual_prompts,
        } => commands::detect::run(
            &config,
            providers,
            &commands::detect::DetectArgs {
                input,
                k: *k,
                no_retrieval: *no_retrieval,
                no_agents: *no_agents,
                manual_prompts: manual_prompts.as_deref(),
                parallelism: cli.parallelism.max(1),
            },
        ),
        Command::Evaluate {
            reports,
            golds,
            allow_missing,
            full_universe,
            tail_boundary,
            coverage_threshold,
        } => commands::evaluate::run(
            &config,
            &commands::evaluate::EvaluateArgs {
                reports,
                golds,
                allow_missing: *allow_missing,
                full_universe: *full_universe,
                tail_boundary: *tail_boundary,
                coverage_threshold: *coverage_threshold,
            },
        ),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
