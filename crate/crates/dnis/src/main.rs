//! Experiment runner: train / prune / eval / sweep over reproducible JSON
//! configs.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dnis::lfm::Architecture;
use dnis::report::{
    run_baseline, run_eval, run_prune, run_sweep, run_train, PruneMode, RunConfig, SplitName,
    SweepAxis,
};
use dnis::search::HyperOrder;

#[derive(Parser)]
#[command(name = "dnis", version, about = "Differentiable embedding-dimension search for latent factor recommenders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (searched by default; --baseline for comparison methods).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Comparison method instead of the searched run: grid|random|mde|dnis.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Merge + prune a checkpoint into a sparse mixed-dimension embedding.
    Prune {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint (or a pruned COO paired with it) on one split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        coo: Option<PathBuf>,
        /// train|val|test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// One run per axis value, aggregated into a table.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// k|l|cr|baseline
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// mf|fm|mlp|neumf|deepfm-lite
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Prune to a target compression rate.
    #[arg(long)]
    cr: Option<f64>,
    /// Prune by magnitude threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Hypergradient order: first|second.
    #[arg(long)]
    order: Option<String>,
}

impl CommonArgs {
    fn effective_config(&self) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&raw)
            .with_context(|| format!("parsing config {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.search.seed = seed;
        }
        if let Some(a) = &self.arch {
            cfg.arch = Architecture::from_str(a).map_err(|e| anyhow::anyhow!("{e}"))?;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(l) = self.blocks {
            cfg.blocks = Some(l);
        }
        match (self.epsilon, self.cr) {
            (Some(_), Some(_)) => bail!("--epsilon and --cr are mutually exclusive"),
            (Some(e), None) => cfg.prune = Some(PruneMode::Epsilon(e)),
            (None, Some(c)) => cfg.prune = Some(PruneMode::TargetCr(c)),
            (None, None) => {}
        }
        if let Some(o) = &self.order {
            cfg.search.order = match o.as_str() {
                "first" => HyperOrder::First,
                "second" => HyperOrder::Second,
                other => bail!("unknown order {other:?} (first|second)"),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { common, baseline } => {
            let cfg = common.effective_config()?;
            match baseline {
                None => {
                    let out = run_train(&cfg, &common.out)?;
                    println!("{}", out.report.text_row("dnis"));
                }
                Some(name) => {
                    let report = run_baseline(&cfg, &name, &common.out)?;
                    println!("{}", report.text_row(&name));
                }
            }
        }
        Cmd::Prune { common, checkpoint } => {
            let cfg = common.effective_config()?;
            let mode = cfg
                .prune
                .ok_or_else(|| anyhow::anyhow!("prune needs --epsilon or --cr (or a prune mode in the config)"))?;
            let out = run_prune(&cfg, &checkpoint, mode, &common.out)?;
            println!(
                "pruned: nnz={} cr={:.3} bytes={}",
                out.coo.nnz(),
                out.report.compression_rate,
                out.report.coo_bytes
            );
        }
        Cmd::Eval {
            common,
            checkpoint,
            coo,
            split,
        } => {
            let cfg = common.effective_config()?;
            let split = SplitName::from_str(&split).map_err(|e| anyhow::anyhow!(e))?;
            let report = run_eval(&cfg, &checkpoint, coo.as_deref(), split, &common.out)?;
            println!("{}", report.text_row("eval"));
        }
        Cmd::Sweep {
            common,
            axis,
            values,
        } => {
            let cfg = common.effective_config()?;
            let axis = SweepAxis::from_str(&axis).map_err(|e| anyhow::anyhow!(e))?;
            let rows = run_sweep(&cfg, axis, &values, &common.out)?;
            for row in &rows {
                println!("{}", row.report.text_row(&row.axis_value));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
