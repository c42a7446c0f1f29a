use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    PointRun,
    PointCircle,
    GridNav,
    Thermo,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::PointRun => "point_run",
            EnvId::PointCircle => "point_circle",
            EnvId::GridNav => "grid_nav",
            EnvId::Thermo => "thermo",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_run" => Ok(EnvId::PointRun),
            "point_circle" => Ok(EnvId::PointCircle),
            "grid_nav" => Ok(EnvId::GridNav),
            "thermo" => Ok(EnvId::Thermo),
            other => Err(Error::Config(format!("unknown env_id `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub env_id: EnvId,
    /// Steps per episode.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_bound")]
    pub action_bound: f64,
    /// Standard deviation of the per-step dynamics noise.
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_horizon() -> usize {
    200
}

fn default_bound() -> f64 {
    1.0
}

impl EnvConfig {
    pub fn new(env_id: EnvId) -> Self {
        Self {
            env_id,
            horizon: default_horizon(),
            action_bound: default_bound(),
            noise_scale: 0.0,
            seed: 0,
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_noise(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.action_bound > 0.0) || !self.action_bound.is_finite() {
            return Err(Error::Config("action_bound must be positive".into()));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Windowed mean of the monitored quantity above `threshold`.
    WindowAverage,
    /// Windowed share of flagged steps above `occupancy_fraction`.
    WindowOccupancy,
    /// The last `window` steps all above `threshold`.
    ConsecutiveOver,
    /// More than `max_count` flagged steps since the trajectory start.
    CumulativeVisits,
}

/// Scalar read off each `(state, action)` pair for constraint checking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Monitor {
    /// Euclidean norm of the listed state components (e.g. speed).
    StateNorm { indices: Vec<usize> },
    StateComponent { index: usize },
    ActionComponent { index: usize },
    /// 1 when `|state[index]| > limit`, else 0.
    OutsideBand { index: usize, limit: f64 },
    /// 1 when `(state[x], state[y])` lies within the disk, else 0.
    InsideDisk {
        x: usize,
        y: usize,
        cx: f64,
        cy: f64,
        radius: f64,
    },
}

impl Monitor {
    pub fn value(&self, state: &[f64], action: &[f64]) -> f64 {
        match self {
            Monitor::StateNorm { indices } => indices.iter().map(|&i| state[i] * state[i]).sum::<f64>().sqrt(),
            Monitor::StateComponent { index } => state[*index],
            Monitor::ActionComponent { index } => action[*index],
            Monitor::OutsideBand { index, limit } => f64::from(u8::from(state[*index].abs() > *limit)),
            Monitor::InsideDisk { x, y, cx, cy, radius } => {
                let (dx, dy) = (state[*x] - cx, state[*y] - cy);
                f64::from(u8::from(dx * dx + dy * dy <= radius * radius))
            }
        }
    }
}

/// Ground-truth non-Markovian constraint. Only the fields relevant to
/// `kind` are read: `window` for the windowed and consecutive kinds,
/// `threshold` for every kind (the flagging level for indicator kinds),
/// `occupancy_fraction` for occupancy and `max_count` for cumulative visits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub occupancy_fraction: f64,
    #[serde(default)]
    pub max_count: usize,
    pub monitor: Monitor,
}

fn default_window() -> usize {
    1
}

fn default_threshold() -> f64 {
    0.5
}

impl ConstraintSpec {
    pub fn window_average(monitor: Monitor, window: usize, threshold: f64) -> Self {
        Self {
            kind: ConstraintKind::WindowAverage,
            window,
            threshold,
            occupancy_fraction: 0.0,
            max_count: 0,
            monitor,
        }
    }

    pub fn window_occupancy(monitor: Monitor, window: usize, occupancy_fraction: f64) -> Self {
        Self {
            kind: ConstraintKind::WindowOccupancy,
            window,
            threshold: 0.5,
            occupancy_fraction,
            max_count: 0,
            monitor,
        }
    }

    /// Violated when the last `run` steps (2 in the common case) all exceed
    /// `threshold`.
    pub fn consecutive_over(monitor: Monitor, run: usize, threshold: f64) -> Self {
        Self {
            kind: ConstraintKind::ConsecutiveOver,
            window: run,
            threshold,
            occupancy_fraction: 0.0,
            max_count: 0,
            monitor,
        }
    }

    pub fn cumulative_visits(monitor: Monitor, max_count: usize) -> Self {
        Self {
            kind: ConstraintKind::CumulativeVisits,
            window: 1,
            threshold: 0.5,
            occupancy_fraction: 0.0,
            max_count,
            monitor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("constraint window must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.occupancy_fraction) {
            return Err(Error::Config("occupancy_fraction must lie in [0, 1]".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("constraint threshold must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_env_id_is_a_config_error() {
        assert!(matches!("mujoco".parse::<EnvId>(), Err(Error::Config(_))));
        assert_eq!("grid_nav".parse::<EnvId>().unwrap(), EnvId::GridNav);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(EnvConfig::new(EnvId::Thermo).with_horizon(0).validate().is_err());
        let mut c = EnvConfig::new(EnvId::Thermo);
        c.action_bound = 0.0;
        assert!(c.validate().is_err());
        c.action_bound = 1.0;
        c.noise_scale = -0.1;
        assert!(c.validate().is_err());
        let mut spec = ConstraintSpec::window_occupancy(Monitor::StateComponent { index: 0 }, 20, 0.15);
        assert!(spec.validate().is_ok());
        spec.occupancy_fraction = 1.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn constraint_round_trips_through_toml() {
        let spec = ConstraintSpec::window_average(Monitor::StateNorm { indices: vec![2, 3] }, 50, 1.0);
        let text = toml::to_string(&spec).unwrap();
        assert!(text.contains("[monitor]"));
        let back: ConstraintSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn monitors_read_expected_quantities() {
        let s = [0.8, 0.0, 3.0, 4.0];
        assert_eq!(Monitor::StateNorm { indices: vec![2, 3] }.value(&s, &[]), 5.0);
        assert_eq!(Monitor::OutsideBand { index: 0, limit: 0.6 }.value(&s, &[]), 1.0);
        assert_eq!(Monitor::ActionComponent { index: 1 }.value(&s, &[0.0, -0.3]), -0.3);
        let disk = Monitor::InsideDisk { x: 0, y: 1, cx: 1.0, cy: 0.0, radius: 0.5 };
        assert_eq!(disk.value(&s, &[]), 1.0);
    }
}
