//! Ground-truth labeling. Windows are zero-padded before the segment start:
//! a window that reaches back past step 0 sums only the available steps but
//! still divides by the full width `W`. With non-negative monitored
//! quantities this makes every constraint kind closed under taking
//! sub-segments, so a trajectory is safe exactly when all of its contiguous
//! sub-segments, each relabeled from a fresh start, are safe.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ConstraintKind, ConstraintSpec};
use super::trajectory::{LabeledSegment, SafetyLabel, Trajectory};
use crate::{Error, Result};

pub fn monitored_series(traj: &Trajectory, spec: &ConstraintSpec) -> Vec<f64> {
    traj.states
        .iter()
        .zip(&traj.actions)
        .map(|(s, a)| spec.monitor.value(s, a))
        .collect()
}

/// Whether step `t` of a monitored series violates `spec`. `t` must be in
/// range.
pub fn violation_in_series(values: &[f64], t: usize, spec: &ConstraintSpec) -> bool {
    debug_assert!(t < values.len());
    let w = spec.window.max(1);
    let start = (t + 1).saturating_sub(w);
    let window = &values[start..=t];
    let flagged = |v: &&f64| **v > spec.threshold;
    match spec.kind {
        ConstraintKind::WindowAverage => window.iter().sum::<f64>() / w as f64 > spec.threshold,
        ConstraintKind::WindowOccupancy => {
            window.iter().filter(flagged).count() as f64 / w as f64 > spec.occupancy_fraction
        }
        ConstraintKind::ConsecutiveOver => t + 1 >= w && window.iter().all(|v| *v > spec.threshold),
        ConstraintKind::CumulativeVisits => values[..=t].iter().filter(flagged).count() > spec.max_count,
    }
}

pub fn violation_at(traj: &Trajectory, t: usize, spec: &ConstraintSpec) -> Result<bool> {
    if t >= traj.len() {
        return Err(Error::Argument(format!(
            "timestep {t} out of range for trajectory of length {}",
            traj.len()
        )));
    }
    let values = monitored_series(traj, spec);
    Ok(violation_in_series(&values, t, spec))
}

/// Per-step violation flags for the whole trajectory.
pub fn violations(traj: &Trajectory, spec: &ConstraintSpec) -> Vec<bool> {
    let values = monitored_series(traj, spec);
    (0..values.len()).map(|t| violation_in_series(&values, t, spec)).collect()
}

pub fn first_violation(values: &[f64], spec: &ConstraintSpec) -> Option<usize> {
    (0..values.len()).find(|&t| violation_in_series(values, t, spec))
}

pub fn label_series(values: &[f64], spec: &ConstraintSpec) -> SafetyLabel {
    SafetyLabel::from_safe(first_violation(values, spec).is_none())
}

pub fn label_trajectory(traj: &Trajectory, spec: &ConstraintSpec) -> Result<SafetyLabel> {
    if traj.is_empty() {
        return Err(Error::Argument("cannot label an empty trajectory".into()));
    }
    Ok(label_series(&monitored_series(traj, spec), spec))
}

/// Sub-segments of `traj` labeled as fresh sequences.
///
/// When the trajectory is unsafe, the longest safe prefix and the shortest
/// unsafe prefix are always emitted first. The full trajectory and uniformly
/// drawn `(start, end)` segments fill the rest. When both classes are present
/// the output alternates safe/unsafe so the classes stay balanced, dropping
/// the surplus of the majority class.
pub fn enumerate_labeled_subsegments(
    traj: &Trajectory,
    spec: &ConstraintSpec,
    max_per_traj: usize,
    rng_seed: u64,
) -> Result<Vec<LabeledSegment>> {
    if max_per_traj < 1 {
        return Err(Error::Argument("max_per_traj must be at least 1".into()));
    }
    let n = traj.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let values = monitored_series(traj, spec);
    let mut seen = BTreeSet::new();
    let mut safe = Vec::new();
    let mut unsafe_ = Vec::new();
    let mut offer = |start: usize, end: usize, safe: &mut Vec<(usize, usize)>, unsafe_: &mut Vec<(usize, usize)>| {
        if start < end && seen.insert((start, end)) {
            match label_series(&values[start..end], spec) {
                SafetyLabel::Safe => safe.push((start, end)),
                SafetyLabel::Unsafe => unsafe_.push((start, end)),
            }
        }
    };
    if let Some(t) = first_violation(&values, spec) {
        offer(0, t, &mut safe, &mut unsafe_);
        offer(0, t + 1, &mut safe, &mut unsafe_);
    }
    offer(0, n, &mut safe, &mut unsafe_);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for _ in 0..4 * max_per_traj {
        let start = rng.random_range(0..n);
        let end = rng.random_range(start + 1..=n);
        offer(start, end, &mut safe, &mut unsafe_);
    }

    let picked: Vec<(usize, usize)> = if safe.is_empty() || unsafe_.is_empty() {
        safe.into_iter().chain(unsafe_).take(max_per_traj).collect()
    } else {
        let k = safe.len().min(unsafe_.len());
        safe.into_iter()
            .take(k)
            .zip(unsafe_.into_iter().take(k))
            .flat_map(|(a, b)| [a, b])
            .take(max_per_traj)
            .collect()
    };
    Ok(picked
        .into_iter()
        .map(|(start, end)| {
            let label = label_series(&values[start..end], spec);
            LabeledSegment {
                episode_id: 0,
                start,
                trajectory: traj.slice(start, end),
                label,
            }
        })
        .collect())
}
