use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActMode, Agent, Variant};
use crate::env::{label_trajectory, ConstraintSpec, Env, Trajectory};
use crate::replay::{EnrichedTransition, ReplayBuffer};
use crate::safety::SafetyModel;
use crate::{Error, Result};

pub const LOG_FORMAT_LINE: &str = "# trajsafe.training_log v1";

/// Salt separating the environment-reset stream from the agent's RNG.
const ENV_SEED_SALT: u64 = 0x5eed_0fe1_1000_0001;

/// One row of the training log. Averages cover the episodes completed since
/// the previous row; they are NaN when none completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub episodes: usize,
    pub return_mean: f64,
    pub compliance_frac: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub q_r1_loss: f64,
    pub q_r2_loss: f64,
    pub q_psi1_loss: f64,
    pub q_psi2_loss: f64,
    pub policy_objective: f64,
}

pub struct EpisodeRecord<'a> {
    pub index: usize,
    /// Environment step count when the episode finished.
    pub step: usize,
    pub trajectory: &'a Trajectory,
    pub final_state: &'a [f64],
    /// Sum of the safety model's per-step log-probabilities, or 0 without one.
    pub safety_total: f64,
}

/// Callbacks invoked by [`train_agent`]; all default to no-ops.
pub trait TrainHooks {
    fn on_episode(&mut self, _episode: &EpisodeRecord<'_>) -> Result<()> {
        Ok(())
    }

    /// May rewrite an action before it is executed and stored.
    fn adjust_action(&mut self, _step: usize, _action: &mut [f64]) {}

    /// Called after every environment step with the updated agent.
    fn on_step(&mut self, _step: usize, _agent: &Agent) -> Result<()> {
        Ok(())
    }

    /// Checked after every step; returning true ends training early.
    fn stop(&self) -> bool {
        false
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

#[derive(Default)]
struct Window {
    returns: Vec<f64>,
    compliant: Vec<bool>,
}

/// Runs the off-policy loop for `agent.config.total_steps` environment
/// steps: act, step, annotate with the frozen safety model, store, and at
/// each update boundary take one λ step followed by the inner critic, policy
/// and target updates.
pub fn train_agent(
    env: &mut dyn Env,
    safety: Option<&SafetyModel>,
    buffer: &mut ReplayBuffer,
    agent: &mut Agent,
    constraint: Option<&ConstraintSpec>,
    hooks: &mut dyn TrainHooks,
) -> Result<Vec<LogRow>> {
    let cfg = agent.config.clone();
    let variant = cfg.variant;
    let safety = if variant.constrained() {
        Some(safety.ok_or_else(|| Error::Config(format!("variant {variant} needs a safety model")))?)
    } else {
        None
    };
    if env.state_dim() != agent.state_dim || env.action_dim() != agent.action_dim {
        return Err(Error::Config("agent and environment dimensions differ".into()));
    }
    if let Some(m) = safety {
        if m.state_dim != env.state_dim() || m.action_dim != env.action_dim() {
            return Err(Error::Config("safety model and environment dimensions differ".into()));
        }
        if agent.hidden_dim != 0 && agent.hidden_dim != m.hidden_size() {
            return Err(Error::Config("agent hidden width differs from the safety model".into()));
        }
    }

    let mut env_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ENV_SEED_SALT);
    let bound = env.action_bound();
    let h0 = safety.map(|m| m.init_hidden()).unwrap_or_default();
    let mut log = Vec::new();
    let mut window = Window::default();
    let mut recent_totals: VecDeque<f64> = VecDeque::with_capacity(cfg.nonlb_recent_episodes);
    let mut last_len = 0usize;
    let mut episodes = 0usize;
    let mut losses = super::CriticLosses::default();
    let mut objective = f64::NAN;

    let mut state = env.reset(env_rng.random());
    let mut h = h0.clone();
    let mut traj = Trajectory::default();
    let mut total = 0.0;
    for step in 1..=cfg.total_steps {
        let mut action: Vec<f64> = if step <= cfg.warmup_steps {
            let rng = agent.rng();
            (0..env.action_dim()).map(|_| rng.random_range(-bound..=bound)).collect()
        } else {
            agent.act(&state, &h, ActMode::Sample)?
        };
        hooks.adjust_action(step, &mut action);
        let out = env.step(&action)?;
        let (ell, h_next) = match safety {
            Some(m) => m.step(&state, &h, &action)?,
            None => (0.0, Vec::new()),
        };
        total += ell;
        buffer.push(EnrichedTransition {
            s: state.clone(),
            h: std::mem::replace(&mut h, h_next.clone()),
            a: action.clone(),
            r: out.reward,
            ell,
            s_next: out.state.clone(),
            h_next,
            done: out.done,
        });
        traj.push(std::mem::replace(&mut state, out.state), action, Some(out.reward));

        if out.done {
            hooks.on_episode(&EpisodeRecord {
                index: episodes,
                step,
                trajectory: &traj,
                final_state: &state,
                safety_total: total,
            })?;
            window.returns.push(traj.total_reward());
            if let Some(spec) = constraint {
                window.compliant.push(label_trajectory(&traj, spec)?.is_safe());
            }
            if recent_totals.len() == cfg.nonlb_recent_episodes {
                recent_totals.pop_front();
            }
            recent_totals.push_back(total);
            last_len = traj.len();
            episodes += 1;
            state = env.reset(env_rng.random());
            h = h0.clone();
            traj = Trajectory::default();
            total = 0.0;
        }

        if step >= cfg.update_after && step % cfg.update_every == 0 {
            match (variant, safety) {
                (Variant::SafesacH | Variant::NoH, Some(m)) => {
                    let n = last_len.max(cfg.lambda_recent_min);
                    let recent = buffer.sample_recent(n)?;
                    agent.update_lambda(&recent, m)?;
                }
                (Variant::NonLb, _) if !recent_totals.is_empty() => {
                    let totals: Vec<f64> = recent_totals.iter().copied().collect();
                    agent.update_lambda_nonlb(&totals)?;
                }
                _ => {}
            }
            for _ in 0..cfg.updates_per_cycle {
                let batch = buffer.sample_batch(cfg.batch_size, agent.rng())?;
                losses = agent.update_critics(&batch)?;
                objective = agent.update_policy(&batch)?;
                agent.update_targets();
            }
        }

        if step % cfg.log_interval == 0 {
            let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
            let compliance: Vec<f64> = window.compliant.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
            let row = LogRow {
                step,
                episodes,
                return_mean: mean(&window.returns),
                compliance_frac: mean(&compliance),
                lambda: agent.lambda,
                alpha: agent.alpha(),
                q_r1_loss: losses.q_r[0],
                q_r2_loss: losses.q_r[1],
                q_psi1_loss: losses.q_psi.map_or(f64::NAN, |l| l[0]),
                q_psi2_loss: losses.q_psi.map_or(f64::NAN, |l| l[1]),
                policy_objective: objective,
            };
            debug!(
                "{variant} step {step}: return {:.3}, compliance {:.3}, lambda {:.4}",
                row.return_mean, row.compliance_frac, row.lambda
            );
            log.push(row);
            window = Window::default();
        }
        hooks.on_step(step, agent)?;
        if hooks.stop() {
            break;
        }
    }
    Ok(log)
}

/// Writes the training log as CSV after a format line.
pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{LOG_FORMAT_LINE}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.splitn(2, '\n');
    if lines.next().map(str::trim_end) != Some(LOG_FORMAT_LINE) {
        return Err(Error::Load(format!("{}: not a training log v1", path.display())));
    }
    let body = lines.next().unwrap_or("");
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::TrainConfig;
    use crate::env::{make_env, EnvConfig, EnvId};

    fn small_config(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            horizon: 19,
            hidden: vec![8],
            total_steps: 300,
            warmup_steps: 50,
            update_after: 50,
            update_every: 25,
            updates_per_cycle: 5,
            batch_size: 16,
            lambda_recent_min: 32,
            log_interval: 100,
            seed: 3,
            ..Default::default()
        }
    }

    fn run(variant: Variant) -> (Vec<LogRow>, Agent) {
        let mut env = make_env(&EnvConfig::new(EnvId::PointRun).with_horizon(20)).unwrap();
        let model = SafetyModel::new(4, 2, 6, &[8], 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut agent = Agent::for_env(small_config(variant), env.as_ref(), Some(&model)).unwrap();
        let mut buf = ReplayBuffer::new(10_000);
        let spec = crate::env::default_constraint(EnvId::PointRun);
        let log = train_agent(env.as_mut(), Some(&model), &mut buf, &mut agent, Some(&spec), &mut NoHooks).unwrap();
        assert_eq!(buf.len(), 300);
        (log, agent)
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let (a, _) = run(Variant::SafesacH);
        let (b, _) = run(Variant::SafesacH);
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(format!("{x:?}"), format!("{y:?}"));
        }
    }

    #[test]
    fn every_variant_runs_and_sac_keeps_lambda_zero() {
        for v in Variant::ALL {
            let (log, agent) = run(v);
            assert!(log.iter().all(|r| r.lambda >= 0.0));
            if v == Variant::Sac {
                assert!(log.iter().all(|r| r.lambda == 0.0));
                assert!(agent.q_psi.is_none());
            } else {
                assert_ne!(agent.lambda, 1.0, "{v}: lambda never moved");
            }
        }
    }

    #[test]
    fn constrained_variants_require_a_safety_model() {
        let mut env = make_env(&EnvConfig::new(EnvId::PointRun).with_horizon(20)).unwrap();
        let cfg = small_config(Variant::NoH);
        let mut agent = Agent::new(cfg, 4, 2, 0, 1.0).unwrap();
        let mut buf = ReplayBuffer::new(100);
        let err = train_agent(env.as_mut(), None, &mut buf, &mut agent, None, &mut NoHooks);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn log_csv_round_trip() {
        let (log, _) = run(Variant::NonLb);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log_csv(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(LOG_FORMAT_LINE));
        assert!(text.lines().nth(1).unwrap().starts_with("step,episodes,return_mean,compliance_frac,lambda,alpha"));
        let back = read_log_csv(&path).unwrap();
        assert_eq!(format!("{back:?}"), format!("{log:?}"));
    }
}
