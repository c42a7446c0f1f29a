use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{TrainConfig, Variant};
use crate::env::{default_constraint, ConstraintSpec, EnvConfig};
use crate::safety::SafetyTrainConfig;
use crate::{Error, Result};

/// How the unconstrained collector runs and how its episodes are augmented.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub n_trajectories: usize,
    pub segments_per_traj: usize,
    pub update_every: usize,
    pub updates_per_cycle: usize,
    /// Per-step probability of redrawing the collector's action scale from
    /// U(throttle_min, 1), which varies its speed within and across
    /// episodes. 0 keeps the actions unscaled.
    pub throttle_switch_prob: f64,
    pub throttle_min: f64,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 2_000,
            segments_per_traj: 4,
            update_every: 50,
            updates_per_cycle: 10,
            throttle_switch_prob: 0.0,
            throttle_min: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Config file version; files without one are read as the current version.
    #[serde(default = "default_version")]
    pub version: u32,
    pub env: EnvConfig,
    /// Ground-truth constraint; the environment's default when absent.
    #[serde(default)]
    pub constraint: Option<ConstraintSpec>,
    #[serde(default)]
    pub collect: CollectConfig,
    #[serde(default)]
    pub safety: SafetyTrainConfig,
    #[serde(default)]
    pub agent: TrainConfig,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Training steps between evaluations.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Base reset seed of the evaluation environment.
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::SafesacH, Variant::Sac]
}

fn default_seeds() -> usize {
    1
}

fn default_eval_episodes() -> usize {
    100
}

fn default_eval_interval() -> usize {
    5_000
}

fn default_eval_seed() -> u64 {
    1_000_000
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn new(env: EnvConfig, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: CONFIG_VERSION,
            env,
            constraint: None,
            collect: CollectConfig::default(),
            safety: SafetyTrainConfig::default(),
            agent: TrainConfig::default(),
            variants: default_variants(),
            n_seeds: default_seeds(),
            eval_episodes: default_eval_episodes(),
            eval_interval: default_eval_interval(),
            eval_seed: default_eval_seed(),
            output_dir: output_dir.into(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.env.validate()?;
        self.constraint().validate()?;
        self.safety.validate()?;
        self.agent.validate()?;
        if self.n_seeds < 1 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if self.eval_episodes < 1 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        if self.eval_interval < 1 {
            return Err(Error::Config("eval_interval must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        if self.collect.n_trajectories < 1 || self.collect.segments_per_traj < 1 || self.collect.update_every < 1 {
            return Err(Error::Config(
                "collect.n_trajectories, segments_per_traj and update_every must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.collect.throttle_switch_prob) || !(0.0..=1.0).contains(&self.collect.throttle_min) {
            return Err(Error::Config("collect.throttle_switch_prob and throttle_min must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn constraint(&self) -> ConstraintSpec {
        self.constraint.clone().unwrap_or_else(|| default_constraint(self.env.env_id))
    }

    /// Agent settings for one run: the variant, a per-seed RNG seed, and the
    /// final time index taken from the environment horizon.
    pub fn agent_config(&self, variant: Variant, seed_index: usize) -> TrainConfig {
        TrainConfig {
            variant,
            seed: self.agent.seed.wrapping_add(seed_index as u64),
            horizon: self.env.horizon.saturating_sub(1),
            ..self.agent.clone()
        }
    }

    pub fn needs_safety_model(&self) -> bool {
        self.variants.iter().any(|v| v.constrained())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvId;

    #[test]
    fn toml_round_trip_with_sections() {
        let text = r#"
            n_seeds = 3
            variants = ["safesac_h", "non_lb"]
            output_dir = "out"

            [env]
            env_id = "point_run"
            horizon = 60

            [constraint]
            kind = "window_average"
            window = 20
            threshold = 1.0
            monitor = { type = "state_norm", indices = [2, 3] }

            [safety]
            hidden_size = 32
            dropout = 0.0

            [agent]
            lambda_lr = 1.0
            total_steps = 30000
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.n_seeds, 3);
        assert_eq!(cfg.constraint().window, 20);
        assert_eq!(cfg.safety.hidden_size, 32);
        assert_eq!(cfg.eval_episodes, 100);
        let run = cfg.agent_config(Variant::NonLb, 2);
        assert_eq!(run.horizon, 59);
        assert_eq!(run.seed, 2);
        assert_eq!(run.variant, Variant::NonLb);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::new(EnvConfig::new(EnvId::PointRun), "x");
        cfg.n_seeds = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("[env]\nenv_id = \"mars\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("bogus = 1\n[env]\nenv_id = \"thermo\""),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("version = 2\n[env]\nenv_id = \"thermo\""),
            Err(Error::Config(_))
        ));
    }
}
