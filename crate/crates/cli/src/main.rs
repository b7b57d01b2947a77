//! `metaadapter`: command-line entry point for the few-shot engine.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "metaadapter", version, about = "Few-shot classification over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Layering and output flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Directory receiving `{subcommand}.json` / `{subcommand}.log`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Optional `key = value` settings file; keys are long flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting, repeatable; explicit flags still win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Flags shared by the evaluation subcommands.
#[derive(Args, Debug, Clone)]
pub struct EvalFlags {
    /// Task manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// base, novel, all, or both (base and novel); defaults to both when the
    /// task has a split and all otherwise.
    #[arg(long)]
    pub side: Option<String>,
    /// Evaluation-side shots per class.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Format printed to stdout: json, markdown or csv.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct AdapterFlags {
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub width_mult: Option<usize>,
    /// scalar, elementwise or disabled.
    #[arg(long)]
    pub gate: Option<String>,
    /// Replace attention by a plain mean over the shots.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_attention: Option<bool>,
    /// Project the attended values with a learned `D×D` matrix.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub value_projection: Option<bool>,
    #[arg(long, allow_negative_numbers = true)]
    pub gate_bias_init: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic task.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        queries_per_class: Option<usize>,
        #[arg(long)]
        spread: Option<f64>,
        #[arg(long)]
        base_fraction: Option<f64>,
        /// Seed of the class centers; `--seed` when absent.
        #[arg(long)]
        geometry_seed: Option<u64>,
        /// Where the task files go; `{out-dir}/task` by default.
        #[arg(long)]
        task_dir: Option<PathBuf>,
    },
    /// Split a task into base and novel classes by zero-shot accuracy.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        base_fraction: Option<f64>,
        /// Where the split task goes; `{out-dir}/split` by default.
        #[arg(long)]
        task_dir: Option<PathBuf>,
    },
    /// Evaluate the zero-shot cosine classifier.
    EvalZeroshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Grid-search the cache model on held-out base queries.
    SearchTip {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma list or `start:stop:step`.
        #[arg(long)]
        alphas: Option<String>,
        /// Comma list or `start:stop:step`.
        #[arg(long)]
        betas: Option<String>,
        /// Fraction of base training queries used for validation.
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Evaluate the cache model.
    EvalTip {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// A `search-tip.json` supplying alpha and beta.
        #[arg(long)]
        tip: Option<PathBuf>,
    },
    /// Train the adapter on the base classes.
    TrainMeta {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint directory; `{out-dir}/checkpoint` by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        adapter: AdapterFlags,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lr_min: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        beta1: Option<f64>,
        #[arg(long)]
        beta2: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// fixed or per_epoch.
        #[arg(long)]
        support_resample: Option<String>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Evaluate a trained adapter.
    EvalMeta {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Replace every learned gate by this constant.
        #[arg(long, allow_negative_numbers = true)]
        gate_override: Option<f64>,
    },
    /// Apply frozen artifacts from a source task to a target task.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        /// zeroshot, tip or meta.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        gate_override: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        tip: Option<PathBuf>,
        /// Source name in the report; taken from the artifacts when absent.
        #[arg(long)]
        source: Option<String>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// First seed of the suite.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Print container, manifest or checkpoint headers.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Split { .. } => "split",
            Command::EvalZeroshot { .. } => "eval-zeroshot",
            Command::SearchTip { .. } => "search-tip",
            Command::EvalTip { .. } => "eval-tip",
            Command::TrainMeta { .. } => "train-meta",
            Command::EvalMeta { .. } => "eval-meta",
            Command::Transfer { .. } => "transfer",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Inspect { .. } => "inspect",
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ENGINE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("ENGINE_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("ENGINE_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let sub = Cli::command()
        .find_subcommand(cli.command.name())
        .expect("subcommand is registered")
        .clone();
    match commands::run(cli.command, &sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<settings::UnknownKey>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_subcommand_has_keys() {
        let cmd = Cli::command();
        for sub in cmd.get_subcommands() {
            let keys = settings::valid_keys(sub);
            assert!(keys.contains(&"out-dir".to_string()), "{}", sub.get_name());
            assert!(!keys.contains(&"set".to_string()));
        }
    }
}
