use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fcpo::baselines::BaselineMethod;
use fcpo::runner::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fcpo", version, about = "Fairness-constrained policy optimization for recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set alpha_prime=0.4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out.clone_from(o);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load and split the log; write statistics and id maps.
    Ingest(Common),
    /// Fit the embedding table.
    Pretrain(Common),
    /// Train the policy and critics.
    Train(Common),
    /// Greedy test-phase evaluation at every `eval_k`.
    EvalShort {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/policy.fcpo`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Online evaluation with dynamic groups and periodic updates.
    EvalLong {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `long_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Static baselines.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// mf, mf-foe or quota.
        #[arg(long)]
        method: BaselineMethod,
        /// Run the multi-round MF-FOE protocol instead.
        #[arg(long)]
        long_term: bool,
    },
}

fn checkpoint_path(cfg: &ExperimentConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.out.join("policy.fcpo"))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest(c) => {
            let cfg = c.load()?;
            for (k, v) in runner::cmd_ingest(&cfg)? {
                println!("{k}\t{v}");
            }
        }
        Command::Pretrain(c) => print_paths(&[runner::cmd_pretrain(&c.load()?)?]),
        Command::Train(c) => print_paths(&[runner::cmd_train(&c.load()?)?]),
        Command::EvalShort { common, checkpoint } => {
            let cfg = common.load()?;
            let ck = checkpoint_path(&cfg, checkpoint);
            print_paths(&runner::cmd_eval_short(&cfg, &ck)?);
        }
        Command::EvalLong { common, checkpoint, steps } => {
            let mut cfg = common.load()?;
            if let Some(s) = steps {
                cfg.long_steps = s;
            }
            let ck = checkpoint_path(&cfg, checkpoint);
            print_paths(&[runner::cmd_eval_long(&cfg, &ck)?]);
        }
        Command::Baseline { common, method, long_term } => {
            print_paths(&runner::cmd_baseline(&common.load()?, method, long_term)?);
        }
    }
    Ok(())
}
