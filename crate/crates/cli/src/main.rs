use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vpq_core::config::RunConfig;
use vpq_core::pipeline;
use vpq_core::Result;

/// Value-penalized ensemble Q-learning for offline session recommendation.
#[derive(Parser)]
#[command(name = "vpq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `key=value` override, repeatable; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate train and test sessions and convert them to transition stores.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train an agent on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Ranking metrics and true return of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Closed-form penalty analysis tables.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate over a grid of λ values and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ values; overrides `sweep_lambdas`.
        #[arg(long)]
        lambdas: Option<String>,
        /// Comma-separated seeds; overrides `sweep_seeds`.
        #[arg(long)]
        seeds: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.resolve()?;
            let m = pipeline::cmd_gen_data(&cfg, &common.out)?;
            println!("wrote {} files to {}", m.outputs.len(), common.out.display());
        }
        Command::Train { common, data } => {
            let cfg = common.resolve()?;
            pipeline::cmd_train(&cfg, &data, &common.out)?;
            println!("trained {} steps; checkpoint in {}", cfg.steps, common.out.display());
        }
        Command::Eval { common, checkpoint, data } => {
            let cfg = common.resolve()?;
            let (_, s) = pipeline::cmd_eval(&cfg, &checkpoint, &data, &common.out)?;
            print!("{}", s.metrics.to_table());
            println!("true return {:.4} ± {:.4} ({} episodes)", s.true_return.mean, s.true_return.std_err, s.true_return.n);
            if let Some(g) = s.gap {
                println!("overestimation gap {g:.4}");
            }
        }
        Command::Analyze { common } => {
            let cfg = common.resolve()?;
            pipeline::cmd_analyze(&cfg, &common.out)?;
            println!("analysis tables in {}", common.out.display());
        }
        Command::Sweep { common, lambdas, seeds } => {
            let mut cfg = common.resolve()?;
            if let Some(l) = lambdas {
                cfg.set("sweep_lambdas", &l)?;
            }
            if let Some(s) = seeds {
                cfg.set("sweep_seeds", &s)?;
            }
            cfg.validate()?;
            let (_, out) = pipeline::cmd_sweep(&cfg, &common.out)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", pipeline::sweep_csv(&out.rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
