use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use trajsafe_core::agent::{Agent, Variant};
use trajsafe_core::env::{EnvConfig, EnvId};
use trajsafe_core::pipeline::{
    aggregate, collect_dataset, evaluate, load_or_train_safety, relabel_dataset, run_dir, safety_model_path,
    train_agents, train_safety, ExperimentConfig,
};
use trajsafe_core::safety::SafetyModel;
use trajsafe_core::Error;

#[derive(Parser)]
#[command(name = "trajsafe", version, about = "Safe RL under learned trajectory-level constraints")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Environment, used when no config file is given.
    #[arg(long, global = true)]
    env: Option<EnvId>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    n_seeds: Option<usize>,
    #[arg(long, global = true)]
    eval_episodes: Option<usize>,
    #[arg(long, global = true)]
    eval_interval: Option<usize>,
    /// Agent environment steps per run.
    #[arg(long, global = true)]
    total_steps: Option<usize>,
    /// Comma-separated variants, e.g. safesac_h,sac.
    #[arg(long, global = true, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an unconstrained SAC agent and archive its labeled trajectories.
    Collect {
        #[arg(long)]
        n_trajectories: Option<usize>,
    },
    /// Relabel the saved trajectories with the oracle and regenerate segments.
    Label,
    /// Train the safety model on the saved segments.
    TrainSafety {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train agents for the configured variants and seeds.
    TrainAgent {
        /// Seed indices to run; all of 0..n_seeds by default.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<usize>>,
    },
    /// Evaluate a saved agent checkpoint.
    Evaluate {
        /// Agent checkpoint; defaults to the run of --variant/--seed.
        #[arg(long)]
        agent: Option<PathBuf>,
        #[arg(long, default_value = "safesac_h")]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: usize,
        /// Base reset seed of the evaluation episodes.
        #[arg(long)]
        eval_seed: Option<u64>,
    },
    /// Aggregate per-seed results into report.json, summaries and plots.
    Report,
}

fn build_config(c: &Common) -> trajsafe_core::Result<ExperimentConfig> {
    let mut cfg = match (&c.config, c.env) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(env)) => ExperimentConfig::new(EnvConfig::new(env), "runs"),
        (None, None) => return Err(Error::Argument("either --config or --env is required".into())),
    };
    if let Some(env) = c.env {
        cfg.env.env_id = env;
    }
    if let Some(h) = c.horizon {
        cfg.env.horizon = h;
    }
    if let Some(d) = &c.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(n) = c.n_seeds {
        cfg.n_seeds = n;
    }
    if let Some(n) = c.eval_episodes {
        cfg.eval_episodes = n;
    }
    if let Some(n) = c.eval_interval {
        cfg.eval_interval = n;
    }
    if let Some(n) = c.total_steps {
        cfg.agent.total_steps = n;
    }
    if let Some(v) = &c.variants {
        cfg.variants = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> trajsafe_core::Result<serde_json::Value> {
    let mut cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Collect { n_trajectories } => {
            if let Some(n) = n_trajectories {
                cfg.collect.n_trajectories = n;
                cfg.validate()?;
            }
            let m = collect_dataset(&cfg)?;
            Ok(serde_json::to_value(m)?)
        }
        Command::Label => Ok(serde_json::to_value(relabel_dataset(&cfg)?)?),
        Command::TrainSafety { epochs } => {
            if let Some(e) = epochs {
                cfg.safety.epochs = e;
                cfg.validate()?;
            }
            let (_, report) = train_safety(&cfg)?;
            Ok(json!({
                "best_epoch": report.best_epoch,
                "best_holdout_accuracy": report.best_holdout_accuracy,
                "model": safety_model_path(&cfg.output_dir),
            }))
        }
        Command::TrainAgent { seeds } => {
            let safety = if cfg.needs_safety_model() {
                Some(load_or_train_safety(&cfg)?)
            } else {
                None
            };
            let seeds = seeds.unwrap_or_else(|| (0..cfg.n_seeds).collect());
            let failures = train_agents(&cfg, safety.as_ref(), &cfg.variants, &seeds)?;
            if let Some((variant, f)) = failures.first() {
                return Err(Error::Training(format!(
                    "{} of {} runs failed; first: {variant} seed {}: {}",
                    failures.len(),
                    cfg.variants.len() * seeds.len(),
                    f.seed,
                    f.message
                )));
            }
            Ok(json!({ "runs": cfg.variants.len() * seeds.len() }))
        }
        Command::Evaluate {
            agent,
            variant,
            seed,
            eval_seed,
        } => {
            let path = agent.unwrap_or_else(|| run_dir(&cfg.output_dir, variant, seed).join("agent.json"));
            let agent = Agent::load(&path)?;
            let safety = if agent.hidden_dim > 0 {
                Some(SafetyModel::load(&safety_model_path(&cfg.output_dir))?)
            } else {
                None
            };
            let e = evaluate(
                &agent,
                safety.as_ref(),
                &cfg.env,
                &cfg.constraint(),
                cfg.eval_episodes,
                eval_seed.unwrap_or(cfg.eval_seed),
                agent.config.total_steps,
            )?;
            Ok(serde_json::to_value(e)?)
        }
        Command::Report => {
            let r = aggregate(&cfg)?;
            let finals: Vec<_> = r
                .variants
                .iter()
                .map(|v| {
                    json!({
                        "variant": v.variant,
                        "seeds": v.per_seed.len(),
                        "failures": v.failures.len(),
                        "median_final_compliance": v.median_final_compliance(),
                    })
                })
                .collect();
            Ok(json!({ "report": cfg.output_dir.join("report.json"), "variants": finals }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{record}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Argument(_) => 2,
                _ => 1,
            })
        }
    }
}
