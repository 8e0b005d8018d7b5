use std::path::PathBuf;
use std::process::ExitCode;

use activelab_core::oracle::{BenchmarkId, Difficulty};
use activelab_core::proposer::{ProposerConfig, ProposerKind};
use activelab_harness::manifest::{self, default_sweep};
use activelab_harness::runner::{run_benchmark, save_merged, RunConfig};
use activelab_harness::{report, HarnessError, Method};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "activelab", version, about = "Run mechanism-discovery benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a task manifest (one JSON object per line).
    Manifest {
        #[arg(long)]
        benchmark: String,
        /// Tiers to include; all when omitted.
        #[arg(long, value_delimiter = ',')]
        tiers: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// JSON array of laws for the equation-plugin benchmark.
        #[arg(long)]
        plugins: Option<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Run methods over a manifest and merge rows into the results table.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Run methods over a manifest at several budgets.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Budget grid; the benchmark default when omitted.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
    },
    /// Aggregate a results directory into report tables.
    Report {
        #[arg(long, short)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, short)]
    manifest: PathBuf,
    #[arg(long = "method", value_enum, required = true)]
    methods: Vec<Method>,
    #[arg(long, short)]
    output: PathBuf,
    /// Replace the manifest seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Chat-completion endpoint for autoscilab-remote.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model_small: Option<String>,
    #[arg(long)]
    model_large: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "ACTIVELAB_API_KEY")]
    api_key_env: String,
    /// Ask the remote model to judge symbolic equivalence.
    #[arg(long)]
    judge: bool,
}

impl RunArgs {
    fn proposer(&self) -> ProposerConfig {
        let mut p = ProposerConfig {
            api_key_env: self.api_key_env.clone(),
            endpoint: self.endpoint.clone(),
            ..ProposerConfig::default()
        };
        if self.methods.iter().any(|m| m.is_remote()) || self.judge {
            p.kind = ProposerKind::RemoteChat;
        }
        if let Some(m) = &self.model_small {
            p.model_small = m.clone();
        }
        if let Some(m) = &self.model_large {
            p.model_large = m.clone();
        }
        p
    }

    fn execute(&self, budgets: &[Option<usize>]) -> Result<(), HarnessError> {
        let manifests = manifest::read_manifest(&self.manifest)?;
        let proposer = self.proposer();
        let mut rows = Vec::new();
        for &method in &self.methods {
            for &budget in budgets {
                let cfg = RunConfig {
                    method,
                    manifests: manifests.clone(),
                    out_dir: self.output.clone(),
                    seeds: self.seeds.clone(),
                    budget,
                    noise: self.noise,
                    proposer: proposer.clone(),
                    workers: self.workers,
                    judge: self.judge,
                };
                let r = run_benchmark(&cfg)?;
                let failed = r.iter().filter(|r| r.status == activelab_harness::results::Status::Failed).count();
                eprintln!("{method}: {} tasks, {failed} failed", r.len());
                rows.extend(r);
            }
        }
        save_merged(&rows, &self.output)?;
        Ok(())
    }
}

fn parse_tiers(tiers: &[String]) -> Result<Vec<Difficulty>, HarnessError> {
    if tiers.is_empty() {
        return Ok(Difficulty::ALL.to_vec());
    }
    tiers
        .iter()
        .map(|t| t.parse().map_err(HarnessError::Config))
        .collect()
}

fn main_inner(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Manifest {
            benchmark,
            tiers,
            seeds,
            budget,
            noise,
            plugins,
            output,
        } => {
            let benchmark: BenchmarkId = benchmark.parse()?;
            let plugins = match plugins {
                Some(p) => manifest::read_plugins(&p)?,
                None => Vec::new(),
            };
            let ms = manifest::generate_manifest(benchmark, &parse_tiers(&tiers)?, &seeds, budget, noise, &plugins)?;
            std::fs::write(&output, manifest::to_jsonl(&ms))?;
            eprintln!("wrote {} tasks to {}", ms.len(), output.display());
        }
        Command::Run { run, budget } => run.execute(&[budget])?,
        Command::Sweep { run, budgets } => {
            let grid = if budgets.is_empty() {
                let ms = manifest::read_manifest(&run.manifest)?;
                let b = ms.first().map_or(BenchmarkId::Chem, |m| m.benchmark);
                default_sweep(b)
            } else {
                budgets
            };
            let grid: Vec<Option<usize>> = grid.into_iter().map(Some).collect();
            run.execute(&grid)?;
        }
        Command::Report { dir } => print!("{}", report::report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
