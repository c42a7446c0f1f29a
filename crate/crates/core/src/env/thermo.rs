use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_action, Env, EnvConfig, Step, DT};
use crate::{Error, Result};

pub const ROOMS: usize = 3;
/// Index of the server room inside the state vector.
pub const SERVER: usize = 2;
pub const AMBIENT: f64 = 12.0;
/// Exchange rate with the outside, per time unit.
pub const K_AMBIENT: f64 = 0.2;
/// Exchange rate between every pair of rooms, per time unit.
pub const K_COUPLING: f64 = 0.3;
/// Temperature change per unit of heating power, per time unit.
pub const GAIN: f64 = 4.0;
pub const SERVER_LOAD: f64 = 3.0;
pub const COMFORT: (f64, f64) = (20.0, 24.0);
pub const START_BAND: (f64, f64) = (18.0, 22.0);
pub const SERVER_LIMIT: f64 = 25.0;

/// Three connected rooms (two offices and a server room) with linear heat
/// exchange. Actions are per-room heating power; negative values cool.
///
/// ```text
/// T_i' = T_i + DT * (K_AMBIENT (AMBIENT - T_i) + K_COUPLING Σ_j (T_j - T_i)
///                    + GAIN a_i + load_i) + noise_scale * ε
/// ```
///
/// Reset draws every room uniformly from [`START_BAND`]. Reward is the
/// number of rooms inside [`COMFORT`].
#[derive(Clone, Debug)]
pub struct Thermo {
    horizon: usize,
    bound: f64,
    noise: f64,
    rng: ChaCha8Rng,
    state: Vec<f64>,
    t: usize,
    done: bool,
}

impl Thermo {
    pub fn new(config: &EnvConfig) -> Self {
        Self {
            horizon: config.horizon,
            bound: config.action_bound,
            noise: config.noise_scale,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            state: vec![20.0; ROOMS],
            t: 0,
            done: false,
        }
    }

    pub fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != ROOMS {
            return Err(Error::Argument(format!("thermo state has {ROOMS} components")));
        }
        self.state = state.to_vec();
        Ok(())
    }
}

impl Env for Thermo {
    fn state_dim(&self) -> usize {
        ROOMS
    }

    fn action_dim(&self) -> usize {
        ROOMS
    }

    fn action_bound(&self) -> f64 {
        self.bound
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = (0..ROOMS)
            .map(|_| self.rng.random_range(START_BAND.0..START_BAND.1))
            .collect();
        self.t = 0;
        self.done = false;
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.done {
            return Err(Error::State("step called on a finished episode".into()));
        }
        let a = check_action(action, ROOMS, self.bound)?;
        let s = &self.state;
        let mut next = Vec::with_capacity(ROOMS);
        for i in 0..ROOMS {
            let coupling: f64 = (0..ROOMS).filter(|&j| j != i).map(|j| s[j] - s[i]).sum();
            let load = if i == SERVER { SERVER_LOAD } else { 0.0 };
            let mut ti = s[i] + DT * (K_AMBIENT * (AMBIENT - s[i]) + K_COUPLING * coupling + GAIN * a[i] + load);
            if self.noise > 0.0 {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                ti += self.noise * e;
            }
            next.push(ti);
        }
        let reward = next.iter().filter(|t| (COMFORT.0..=COMFORT.1).contains(*t)).count() as f64;
        self.done = self.t + 1 >= self.horizon;
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

    #[test]
    fn reset_within_start_band() {
        let mut env = Thermo::new(&EnvConfig::new(EnvId::Thermo));
        for seed in 0..50 {
            let s = env.reset(seed);
            assert!(s.iter().all(|t| (START_BAND.0..START_BAND.1).contains(t)));
        }
    }

    #[test]
    fn unheated_room_cools_toward_colder_ambient() {
        let mut env = Thermo::new(&EnvConfig::new(EnvId::Thermo));
        env.reset(0);
        env.set_state(&[21.0, 21.0, 21.0]).unwrap();
        let step = env.step(&[0.0, 0.0, 0.0]).unwrap();
        // Office rooms see only the ambient term: 21 + 0.1 * 0.2 * (12 - 21).
        assert!((step.state[0] - 20.82).abs() < 1e-12);
        assert!(step.state[0] < 21.0 && step.state[1] < 21.0);
        assert_eq!(step.reward, 3.0);
    }
}
