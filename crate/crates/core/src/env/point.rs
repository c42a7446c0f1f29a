use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_action, Env, EnvConfig, Step, DT};
use crate::{Error, Result};

/// Linear velocity damping, per time unit. Terminal speed under a constant
/// action `a` is `a / DRAG`.
pub const DRAG: f64 = 0.5;
pub const CIRCLE_RADIUS: f64 = 1.0;
/// Safety zone of the circle task: `|x| <= CIRCLE_ZONE_HALF_WIDTH`.
pub const CIRCLE_ZONE_HALF_WIDTH: f64 = 0.6;
pub const GOAL: [f64; 2] = [3.0, 3.0];
pub const GOAL_TOLERANCE: f64 = 0.1;
pub const DANGER_CENTER: [f64; 2] = [1.5, 1.5];
pub const DANGER_RADIUS: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointTask {
    /// Reward: forward (x) velocity.
    Run,
    /// Reward: tangential speed around the origin, discounted by the
    /// distance from the unit circle.
    Circle,
    /// Reward: negative distance to [`GOAL`]; ends early at the goal.
    GridNav,
}

/// Planar point mass with state `[x, y, vx, vy]` and acceleration actions:
///
/// ```text
/// v' = v + DT * (a - DRAG * v) + noise_scale * ε,   ε ~ N(0, I)
/// p' = p + DT * v'
/// ```
///
/// Reset draws the position uniformly from a small box around the task's
/// start point (±0.1, or ±0.2 for grid navigation) and each velocity
/// component from U(-0.05, 0.05).
#[derive(Clone, Debug)]
pub struct PointMass {
    task: PointTask,
    horizon: usize,
    bound: f64,
    noise: f64,
    rng: ChaCha8Rng,
    state: Vec<f64>,
    t: usize,
    done: bool,
}

impl PointMass {
    pub fn new(task: PointTask, config: &EnvConfig) -> Self {
        Self {
            task,
            horizon: config.horizon,
            bound: config.action_bound,
            noise: config.noise_scale,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            state: vec![0.0; 4],
            t: 0,
            done: false,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Overrides the current state, keeping the step counter.
    pub fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != 4 {
            return Err(Error::Argument("point-mass state has 4 components".into()));
        }
        self.state = state.to_vec();
        Ok(())
    }

    fn reward(&self, s: &[f64]) -> f64 {
        match self.task {
            PointTask::Run => s[2],
            PointTask::Circle => {
                let r = (s[0] * s[0] + s[1] * s[1]).sqrt();
                let tangential = (s[0] * s[3] - s[1] * s[2]) / r.max(1e-6);
                tangential / (1.0 + (r - CIRCLE_RADIUS).abs())
            }
            PointTask::GridNav => -goal_distance(s),
        }
    }
}

fn goal_distance(s: &[f64]) -> f64 {
    ((s[0] - GOAL[0]).powi(2) + (s[1] - GOAL[1]).powi(2)).sqrt()
}

impl Env for PointMass {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bound(&self) -> f64 {
        self.bound
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let spread = if self.task == PointTask::GridNav { 0.2 } else { 0.1 };
        let x = self.rng.random_range(-spread..spread);
        let y = self.rng.random_range(-spread..spread);
        let vx = self.rng.random_range(-0.05..0.05);
        let vy = self.rng.random_range(-0.05..0.05);
        self.state = vec![x, y, vx, vy];
        self.t = 0;
        self.done = false;
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.done {
            return Err(Error::State("step called on a finished episode".into()));
        }
        let a = check_action(action, 2, self.bound)?;
        let s = &self.state;
        let mut v = [s[2] + DT * (a[0] - DRAG * s[2]), s[3] + DT * (a[1] - DRAG * s[3])];
        if self.noise > 0.0 {
            for vi in v.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                *vi += self.noise * e;
            }
        }
        let next = vec![s[0] + DT * v[0], s[1] + DT * v[1], v[0], v[1]];
        let reward = self.reward(&next);
        let reached = self.task == PointTask::GridNav && goal_distance(&next) < GOAL_TOLERANCE;
        self.done = self.t + 1 >= self.horizon || reached;
        self.t += 1;
        self.state = next.clone();
        Ok(Step {
            state: next,
            reward,
            done: self.done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvId;

    fn env(task: PointTask) -> PointMass {
        PointMass::new(task, &EnvConfig::new(EnvId::PointRun))
    }

    #[test]
    fn reset_is_seeded() {
        let mut e = env(PointTask::Run);
        let a = e.reset(7);
        let b = e.reset(7);
        assert_eq!(a, b);
        let mut g = env(PointTask::GridNav);
        assert_ne!(g.reset(0), g.reset(1));
    }

    #[test]
    fn null_dynamics() {
        let mut e = env(PointTask::Run);
        e.reset(0);
        e.set_state(&[1.0, 2.0, 0.0, 0.0]).unwrap();
        let step = e.step(&[0.0, 0.0]).unwrap();
        assert_eq!(step.state, vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(step.reward, 0.0);
    }

    #[test]
    fn constant_velocity_earns_its_speed() {
        let mut e = env(PointTask::Run);
        e.reset(0);
        let v = 0.8;
        e.set_state(&[0.0, 0.0, v, 0.0]).unwrap();
        for _ in 0..5 {
            let step = e.step(&[DRAG * v, 0.0]).unwrap();
            assert!((step.reward - v).abs() < 1e-12);
        }
    }

    #[test]
    fn done_at_horizon_and_no_step_after() {
        let mut e = PointMass::new(PointTask::Run, &EnvConfig::new(EnvId::PointRun).with_horizon(3));
        e.reset(1);
        assert!(!e.step(&[0.0, 0.0]).unwrap().done);
        assert!(!e.step(&[0.0, 0.0]).unwrap().done);
        assert!(e.step(&[0.0, 0.0]).unwrap().done);
        assert!(matches!(e.step(&[0.0, 0.0]), Err(Error::State(_))));
    }

    #[test]
    fn circle_rewards_counterclockwise_motion() {
        let mut e = env(PointTask::Circle);
        e.reset(0);
        e.set_state(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(e.step(&[0.0, DRAG]).unwrap().reward > 0.9);
        e.set_state(&[1.0, 0.0, 0.0, -1.0]).unwrap();
        assert!(e.step(&[0.0, -DRAG]).unwrap().reward < -0.9);
    }
}
