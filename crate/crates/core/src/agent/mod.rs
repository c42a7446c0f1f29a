//! Soft actor-critic with a hidden-state-conditioned policy, twin reward and
//! safety critics, and a Lagrange multiplier on the per-step safety
//! log-probability.

mod policy;
mod trainer;
mod update;

pub use policy::{squashed_log_density, standard_normal, PolicySample};
pub use trainer::{read_log_csv, train_agent, write_log_csv, EpisodeRecord, LogRow, NoHooks, TrainHooks};
pub use update::{
    critic_mse, lambda_gradient, lambda_gradient_nonlb, project_lambda, safety_target, soft_target, CriticLosses,
};

use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Adam, Mlp, MlpShape};
use crate::safety::SafetyModel;
use crate::{Error, Result};

const CHECKPOINT_FORMAT: &str = "trajsafe.agent";
const CHECKPOINT_VERSION: u32 = 1;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Policy and critics see `(s, h)`; λ follows the per-step lower bound.
    SafesacH,
    /// Unconstrained soft actor-critic on `s` alone.
    Sac,
    /// Networks see `s` only; safety scores still come from the rollout.
    NoH,
    /// As `SafesacH`, but λ follows the trajectory-level constraint.
    NonLb,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SafesacH, Variant::Sac, Variant::NoH, Variant::NonLb];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SafesacH => "safesac_h",
            Variant::Sac => "sac",
            Variant::NoH => "no_h",
            Variant::NonLb => "non_lb",
        }
    }

    /// Whether network inputs include the hidden summary.
    pub fn uses_hidden(self) -> bool {
        matches!(self, Variant::SafesacH | Variant::NonLb)
    }

    /// Whether safety critics and λ are active.
    pub fn constrained(self) -> bool {
        self != Variant::Sac
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub gamma: f64,
    pub alpha: f64,
    pub auto_alpha: bool,
    /// Entropy target for automatic tuning; `-action_dim` when absent.
    pub target_entropy: Option<f64>,
    pub polyak: f64,
    /// Required proportion of safe trajectories.
    pub d: f64,
    /// Final time index `T`; episodes have `T + 1` steps.
    pub horizon: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub lambda_init: f64,
    pub lambda_lr: f64,
    /// Minimum number of recent records behind each λ step.
    pub lambda_recent_min: usize,
    /// Completed episodes averaged by the trajectory-level λ step.
    pub nonlb_recent_episodes: usize,
    pub total_steps: usize,
    /// Steps with uniformly random actions before the policy takes over.
    pub warmup_steps: usize,
    pub update_after: usize,
    pub update_every: usize,
    pub updates_per_cycle: usize,
    pub log_interval: usize,
    pub replay_capacity: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SafesacH,
            gamma: 0.99,
            alpha: 0.2,
            auto_alpha: false,
            target_entropy: None,
            polyak: 0.995,
            d: 0.9,
            horizon: 199,
            batch_size: 100,
            hidden: vec![32, 32],
            layer_norm: true,
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            lambda_init: 1.0,
            lambda_lr: 3e-4,
            lambda_recent_min: 256,
            nonlb_recent_episodes: 10,
            total_steps: 200_000,
            warmup_steps: 1_000,
            update_after: 1_000,
            update_every: 50,
            updates_per_cycle: 50,
            log_interval: 1_000,
            replay_capacity: crate::replay::DEFAULT_CAPACITY,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("agent training: {m}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be non-negative");
        }
        if self.auto_alpha && self.alpha <= 0.0 {
            return bad("automatic entropy tuning needs a positive initial alpha");
        }
        if !(0.0..=1.0).contains(&self.polyak) {
            return bad("polyak must lie in [0, 1]");
        }
        if !(self.d > 0.0 && self.d < 1.0) {
            return bad("d must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.update_every == 0 || self.log_interval == 0 || self.replay_capacity == 0 {
            return bad("batch_size, update_every, log_interval and replay_capacity must be positive");
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return bad("hidden widths must be positive");
        }
        for (name, lr) in [
            ("policy_lr", self.policy_lr),
            ("critic_lr", self.critic_lr),
            ("alpha_lr", self.alpha_lr),
            ("lambda_lr", self.lambda_lr),
        ] {
            if !(lr > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.lambda_init >= 0.0) {
            return bad("lambda_init must be non-negative");
        }
        if self.nonlb_recent_episodes == 0 {
            return bad("nonlb_recent_episodes must be positive");
        }
        Ok(())
    }

    /// Per-step dual target `ln(d) / (T + 1)`.
    pub fn lambda_target(&self) -> f64 {
        self.d.ln() / (self.horizon as f64 + 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Deterministic,
}

/// Twin critics and their target copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub live: [Mlp; 2],
    pub target: [Mlp; 2],
    opt: [Adam; 2],
}

impl CriticPair {
    fn new(shape: &MlpShape, lr: f64, rng: &mut ChaCha8Rng) -> Self {
        let a = Mlp::new(shape.clone(), rng);
        let b = Mlp::new(shape.clone(), rng);
        let n = a.param_count();
        Self {
            target: [a.clone(), b.clone()],
            live: [a, b],
            opt: [Adam::new(n, lr), Adam::new(n, lr)],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub config: TrainConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Width of the safety model's hidden vector fed to the networks, or 0.
    pub hidden_dim: usize,
    pub action_bound: f64,
    pub policy: Mlp,
    policy_opt: Adam,
    pub q_r: CriticPair,
    pub q_psi: Option<CriticPair>,
    pub lambda: f64,
    pub log_alpha: f64,
    alpha_opt: Adam,
    pub updates: u64,
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    agent: Agent,
}

impl Agent {
    /// `hidden_dim` is the safety model's hidden width; it is ignored by
    /// variants whose networks do not see `h`.
    pub fn new(config: TrainConfig, state_dim: usize, action_dim: usize, hidden_dim: usize, action_bound: f64) -> Result<Self> {
        config.validate()?;
        if !(action_bound > 0.0) {
            return Err(Error::Config("action_bound must be positive".into()));
        }
        let hidden_dim = if config.variant.uses_hidden() { hidden_dim } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let obs = state_dim + hidden_dim;
        let policy = Mlp::new(
            MlpShape::new(obs, &config.hidden, 2 * action_dim).with_layer_norm(config.layer_norm),
            &mut rng,
        );
        let critic = MlpShape::new(obs + action_dim, &config.hidden, 1).with_layer_norm(config.layer_norm);
        let q_r = CriticPair::new(&critic, config.critic_lr, &mut rng);
        let q_psi = config
            .variant
            .constrained()
            .then(|| CriticPair::new(&critic, config.critic_lr, &mut rng));
        let lambda = if config.variant.constrained() { config.lambda_init } else { 0.0 };
        Ok(Self {
            policy_opt: Adam::new(policy.param_count(), config.policy_lr),
            policy,
            q_r,
            q_psi,
            lambda,
            log_alpha: if config.alpha > 0.0 { config.alpha.ln() } else { f64::NEG_INFINITY },
            alpha_opt: Adam::new(1, config.alpha_lr),
            updates: 0,
            rng,
            state_dim,
            action_dim,
            hidden_dim,
            action_bound,
            config,
        })
    }

    /// Builds an agent sized for `env` and, for constrained variants, the
    /// safety model's hidden width.
    pub fn for_env(config: TrainConfig, env: &dyn crate::env::Env, safety: Option<&SafetyModel>) -> Result<Self> {
        let hidden = safety.map(|m| m.hidden_size()).unwrap_or(0);
        if config.variant.uses_hidden() && safety.is_none() {
            return Err(Error::Config(format!("variant {} needs a safety model", config.variant)));
        }
        Self::new(config, env.state_dim(), env.action_dim(), hidden, env.action_bound())
    }

    pub fn alpha(&self) -> f64 {
        if self.log_alpha == f64::NEG_INFINITY {
            0.0
        } else {
            self.log_alpha.exp()
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.state_dim + self.hidden_dim
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Network input: `s`, followed by `h` when the variant uses it.
    pub fn observation(&self, s: &[f64], h: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(s);
        if self.hidden_dim > 0 {
            debug_assert_eq!(h.len(), self.hidden_dim);
            out.extend_from_slice(h);
        }
    }

    pub fn act(&mut self, s: &[f64], h: &[f64], mode: ActMode) -> Result<Vec<f64>> {
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let a = self.act_with(s, h, mode, &mut rng);
        self.rng = rng;
        a
    }

    /// Acts with an external noise source, leaving the agent untouched.
    pub fn act_with<R: rand::Rng + ?Sized>(&self, s: &[f64], h: &[f64], mode: ActMode, rng: &mut R) -> Result<Vec<f64>> {
        if s.len() != self.state_dim || (self.hidden_dim > 0 && h.len() != self.hidden_dim) {
            return Err(Error::Argument(format!(
                "agent expects state of size {} and hidden of size {}",
                self.state_dim, self.hidden_dim
            )));
        }
        let mut x = Vec::with_capacity(self.obs_dim());
        self.observation(s, h, &mut x);
        let x = Array2::from_shape_vec((1, x.len()), x).unwrap();
        let eps = match mode {
            ActMode::Sample => policy::standard_normal(rng, 1, self.action_dim),
            ActMode::Deterministic => Array2::zeros((1, self.action_dim)),
        };
        let sample = self.sample_policy(x.view(), eps.view(), false);
        let a = match mode {
            ActMode::Sample => sample.actions,
            ActMode::Deterministic => sample.mean.mapv(|m| m.tanh() * self.action_bound),
        };
        Ok(a.into_raw_vec_and_offset().0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            agent: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!(
                "{}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint",
                path.display()
            )));
        }
        let a = ck.agent;
        let obs = a.state_dim + a.hidden_dim;
        let nets_ok = a.policy.shape.input == obs
            && a.policy.shape.output == 2 * a.action_dim
            && a.policy.params.len() == a.policy.shape.param_count()
            && std::iter::once(&a.q_r).chain(a.q_psi.as_ref()).all(|p| {
                p.live.iter().chain(&p.target).all(|m| {
                    m.shape.input == obs + a.action_dim && m.params.len() == m.shape.param_count()
                })
            });
        if !nets_ok || a.q_psi.is_some() != a.config.variant.constrained() {
            return Err(Error::Load(format!("{}: inconsistent parameter shapes", path.display())));
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(variant: Variant) -> Agent {
        let cfg = TrainConfig {
            variant,
            hidden: vec![8, 8],
            ..Default::default()
        };
        Agent::new(cfg, 3, 2, 4, 1.5).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("safesac".parse::<Variant>().is_err());
    }

    #[test]
    fn network_inputs_follow_variant() {
        let a = agent(Variant::SafesacH);
        assert_eq!(a.policy.shape.input, 7);
        assert_eq!(a.q_r.live[0].shape.input, 9);
        assert!(a.q_psi.is_some());
        let b = agent(Variant::NoH);
        assert_eq!(b.policy.shape.input, 3);
        assert!(b.q_psi.is_some());
        let c = agent(Variant::Sac);
        assert!(c.q_psi.is_none());
        assert_eq!(c.lambda, 0.0);
    }

    #[test]
    fn actions_stay_in_bounds() {
        let mut a = agent(Variant::SafesacH);
        for v in a.policy.params.iter_mut() {
            *v *= 30.0;
        }
        for i in 0..50 {
            let s = [i as f64, -2.0 * i as f64, 0.5];
            let act = a.act(&s, &[0.1; 4], ActMode::Sample).unwrap();
            assert!(act.iter().all(|x| x.abs() <= 1.5));
            let det = a.act(&s, &[0.1; 4], ActMode::Deterministic).unwrap();
            assert!(det.iter().all(|x| x.abs() <= 1.5));
        }
        assert!(matches!(a.act(&[0.0], &[0.0; 4], ActMode::Sample), Err(Error::Argument(_))));
    }

    #[test]
    fn lambda_target_uses_final_index() {
        let cfg = TrainConfig {
            d: 0.9,
            horizon: 99,
            ..Default::default()
        };
        assert!((cfg.lambda_target() - 0.9f64.ln() / 100.0).abs() < 1e-18);
        assert!((cfg.lambda_target() + 0.0010536).abs() < 1e-7);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut a = agent(Variant::NonLb);
        a.lambda = 0.37;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        a.save(&path).unwrap();
        let mut b = Agent::load(&path).unwrap();
        assert_eq!(b.policy, a.policy);
        assert_eq!(b.q_psi, a.q_psi);
        assert_eq!(b.lambda, 0.37);
        // The RNG state is restored too.
        let s = [0.1, 0.2, 0.3];
        assert_eq!(
            a.act(&s, &[0.0; 4], ActMode::Sample).unwrap(),
            b.act(&s, &[0.0; 4], ActMode::Sample).unwrap()
        );
        std::fs::write(&path, b"{}").unwrap();
        assert!(matches!(Agent::load(&path), Err(Error::Load(_))));
    }
}
