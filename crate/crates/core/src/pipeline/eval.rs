use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, Agent};
use crate::env::{label_trajectory, make_env, violations, ConstraintSpec, EnvConfig, Trajectory};
use crate::safety::SafetyModel;
use crate::{Error, Result};

pub const EVAL_FORMAT_LINE: &str = "# trajsafe.eval_log v1";

/// Evaluation result at one training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub step: usize,
    pub episodes: usize,
    pub return_mean: f64,
    pub return_std: f64,
    /// Share of episodes with no violation at any step.
    pub compliance_frac: f64,
    /// Share of all steps at which the windowed requirement holds.
    pub step_compliance_frac: f64,
}

/// Rolls one deterministic episode. The safety model, when the agent
/// conditions on it, only supplies the hidden summary.
pub fn rollout_agent(agent: &Agent, safety: Option<&SafetyModel>, env: &mut dyn crate::env::Env, seed: u64) -> Result<Trajectory> {
    let model = if agent.hidden_dim > 0 {
        Some(safety.ok_or_else(|| Error::Config("agent conditions on the safety model's hidden state".into()))?)
    } else {
        None
    };
    // Deterministic mode never draws from this stream.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = env.reset(seed);
    let mut h = model.map(|m| m.init_hidden()).unwrap_or_default();
    let mut traj = Trajectory::default();
    loop {
        let action = agent.act_with(&state, &h, ActMode::Deterministic, &mut rng)?;
        let out = env.step(&action)?;
        if let Some(m) = model {
            h = m.step_hidden(&state, &h, &action)?;
        }
        traj.push(std::mem::replace(&mut state, out.state), action, Some(out.reward));
        if out.done {
            return Ok(traj);
        }
    }
}

/// Evaluates `agent` over `n_episodes` on a fresh environment instance with
/// reset seeds `seed, seed + 1, ...`. Compliance is judged by the oracle.
pub fn evaluate(
    agent: &Agent,
    safety: Option<&SafetyModel>,
    env_config: &EnvConfig,
    spec: &ConstraintSpec,
    n_episodes: usize,
    seed: u64,
    step: usize,
) -> Result<EvalEntry> {
    if n_episodes == 0 {
        return Err(Error::Argument("n_episodes must be at least 1".into()));
    }
    let mut env = make_env(env_config)?;
    let mut returns = Vec::with_capacity(n_episodes);
    let mut compliant = 0usize;
    let mut ok_steps = 0usize;
    let mut steps = 0usize;
    for ep in 0..n_episodes {
        let traj = rollout_agent(agent, safety, env.as_mut(), seed.wrapping_add(ep as u64))?;
        returns.push(traj.total_reward());
        if label_trajectory(&traj, spec)?.is_safe() {
            compliant += 1;
        }
        let v = violations(&traj, spec);
        steps += v.len();
        ok_steps += v.iter().filter(|&&x| !x).count();
    }
    let (mean, std) = mean_std(&returns);
    Ok(EvalEntry {
        step,
        episodes: n_episodes,
        return_mean: mean,
        return_std: std,
        compliance_frac: compliant as f64 / n_episodes as f64,
        step_compliance_frac: ok_steps as f64 / steps.max(1) as f64,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn write_eval_csv(path: &Path, rows: &[EvalEntry]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{EVAL_FORMAT_LINE}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.splitn(2, '\n');
    if lines.next().map(str::trim_end) != Some(EVAL_FORMAT_LINE) {
        return Err(Error::Load(format!("{}: not an eval log v1", path.display())));
    }
    let mut r = csv::Reader::from_reader(lines.next().unwrap_or("").as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{TrainConfig, Variant};
    use crate::env::{default_constraint, EnvId};

    fn zero_agent() -> Agent {
        let cfg = TrainConfig {
            variant: Variant::Sac,
            hidden: vec![4],
            ..Default::default()
        };
        let mut agent = Agent::new(cfg, 4, 2, 0, 1.0).unwrap();
        // All-zero weights make the mean zero, so tanh(mean) = 0.
        agent.policy.params.fill(0.0);
        agent
    }

    #[test]
    fn null_policy_is_fully_compliant() {
        let agent = zero_agent();
        let env = EnvConfig::new(EnvId::PointRun).with_horizon(50);
        let e = evaluate(&agent, None, &env, &default_constraint(EnvId::PointRun), 100, 7, 0).unwrap();
        assert_eq!(e.episodes, 100);
        assert_eq!(e.compliance_frac, 1.0);
        assert_eq!(e.step_compliance_frac, 1.0);
        assert!(e.return_mean.abs() < 0.5, "{}", e.return_mean);
    }

    #[test]
    fn reports_are_reproducible_and_step_compliance_dominates() {
        let cfg = TrainConfig {
            variant: Variant::Sac,
            hidden: vec![8],
            ..Default::default()
        };
        let agent = Agent::new(cfg, 4, 2, 0, 1.0).unwrap();
        let env = EnvConfig::new(EnvId::PointRun).with_horizon(40);
        let spec = ConstraintSpec::window_average(crate::env::Monitor::StateNorm { indices: vec![2, 3] }, 5, 0.2);
        let a = evaluate(&agent, None, &env, &spec, 20, 3, 10).unwrap();
        let b = evaluate(&agent, None, &env, &spec, 20, 3, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.step_compliance_frac >= a.compliance_frac);
        assert!((0.0..=1.0).contains(&a.compliance_frac));
    }

    #[test]
    fn eval_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let rows = vec![EvalEntry {
            step: 5,
            episodes: 100,
            return_mean: 1.25,
            return_std: 0.1,
            compliance_frac: 0.9,
            step_compliance_frac: 0.99,
        }];
        write_eval_csv(&path, &rows).unwrap();
        assert_eq!(read_eval_csv(&path).unwrap(), rows);
        std::fs::write(&path, "step\n1\n").unwrap();
        assert!(matches!(read_eval_csv(&path), Err(Error::Load(_))));
    }

    #[test]
    fn mean_std_is_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
