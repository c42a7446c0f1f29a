//! Desk-scale continuous-control environments and their ground-truth
//! trajectory safety oracles.

mod config;
mod oracle;
mod point;
mod thermo;
mod trajectory;

pub use config::{ConstraintKind, ConstraintSpec, EnvConfig, EnvId, Monitor};
pub use oracle::{
    enumerate_labeled_subsegments, first_violation, label_series, label_trajectory, monitored_series,
    violation_at, violation_in_series, violations,
};
pub use point::{PointMass, PointTask};
pub use thermo::Thermo;
pub use trajectory::{
    read_segments, read_trajectories, write_segments, write_trajectories, LabeledSegment, SafetyLabel,
    Trajectory, TrajectoryRecord,
};

use crate::{Error, Result};

/// Integration step shared by every environment, in time units.
pub const DT: f64 = 0.1;

/// Outcome of one environment transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic environment with a fixed horizon and box-bounded actions.
pub trait Env {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Per-component magnitude bound; actions are clipped to it.
    fn action_bound(&self) -> f64;
    /// Number of steps per episode.
    fn horizon(&self) -> usize;
    /// Starts a new episode, reseeding the dynamics noise.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step>;
}

/// Builds the environment named by `config`.
pub fn make_env(config: &EnvConfig) -> Result<Box<dyn Env + Send>> {
    config.validate()?;
    Ok(match config.env_id {
        EnvId::PointRun => Box::new(PointMass::new(PointTask::Run, config)),
        EnvId::PointCircle => Box::new(PointMass::new(PointTask::Circle, config)),
        EnvId::GridNav => Box::new(PointMass::new(PointTask::GridNav, config)),
        EnvId::Thermo => Box::new(Thermo::new(config)),
    })
}

/// The constraint shape each environment is paired with by default.
pub fn default_constraint(env_id: EnvId) -> ConstraintSpec {
    match env_id {
        EnvId::PointRun => ConstraintSpec::window_average(Monitor::StateNorm { indices: vec![2, 3] }, 50, 1.0),
        EnvId::PointCircle => ConstraintSpec::window_occupancy(
            Monitor::OutsideBand {
                index: 0,
                limit: point::CIRCLE_ZONE_HALF_WIDTH,
            },
            20,
            0.15,
        ),
        EnvId::GridNav => ConstraintSpec::cumulative_visits(
            Monitor::InsideDisk {
                x: 0,
                y: 1,
                cx: point::DANGER_CENTER[0],
                cy: point::DANGER_CENTER[1],
                radius: point::DANGER_RADIUS,
            },
            1,
        ),
        EnvId::Thermo => ConstraintSpec::consecutive_over(Monitor::StateComponent { index: 2 }, 2, thermo::SERVER_LIMIT),
    }
}

pub(crate) fn check_action(action: &[f64], dim: usize, bound: f64) -> Result<Vec<f64>> {
    if action.len() != dim {
        return Err(Error::Argument(format!(
            "action has {} components, environment expects {dim}",
            action.len()
        )));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Argument("action contains non-finite components".into()));
    }
    Ok(action.iter().map(|a| a.clamp(-bound, bound)).collect())
}

/// Rolls one episode with a fixed action sequence generator.
pub fn rollout<F>(env: &mut dyn Env, seed: u64, mut policy: F) -> Result<Trajectory>
where
    F: FnMut(usize, &[f64]) -> Vec<f64>,
{
    let mut state = env.reset(seed);
    let mut traj = Trajectory::default();
    for t in 0..env.horizon() {
        let action = policy(t, &state);
        let step = env.step(&action)?;
        traj.push(state, action, Some(step.reward));
        state = step.state;
        if step.done {
            break;
        }
    }
    Ok(traj)
}
