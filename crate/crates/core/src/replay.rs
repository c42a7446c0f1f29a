//! Replay storage for transitions annotated with safety-model outputs.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{read_trajectories, write_trajectories, Trajectory};
use crate::safety::SafetyModel;
use crate::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 1_000_000;

const SIDECAR_FORMAT: &str = "trajsafe.replay_sidecar";
const SIDECAR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichedTransition {
    pub s: Vec<f64>,
    pub h: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    /// Step safety log-probability, never positive.
    pub ell: f64,
    pub s_next: Vec<f64>,
    pub h_next: Vec<f64>,
    pub done: bool,
}

/// Bounded FIFO of [`EnrichedTransition`]s.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    records: VecDeque<EnrichedTransition>,
    insertion_counter: u64,
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            records: VecDeque::with_capacity(capacity.min(1 << 16)),
            insertion_counter: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insertion_counter(&self) -> u64 {
        self.insertion_counter
    }

    pub fn iter(&self) -> impl Iterator<Item = &EnrichedTransition> {
        self.records.iter()
    }

    pub fn push(&mut self, transition: EnrichedTransition) {
        debug_assert!(transition.ell <= 0.0, "safety log-probability must be non-positive");
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(transition);
        self.insertion_counter += 1;
    }

    pub fn extend<I: IntoIterator<Item = EnrichedTransition>>(&mut self, items: I) {
        for t in items {
            self.push(t);
        }
    }

    /// `n` records drawn uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&EnrichedTransition>> {
        if self.records.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        let len = self.records.len();
        Ok((0..n).map(|_| &self.records[rng.random_range(0..len)]).collect())
    }

    /// The `min(n, len)` newest records in insertion order.
    pub fn sample_recent(&self, n: usize) -> Result<Vec<&EnrichedTransition>> {
        if self.records.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        let skip = self.records.len().saturating_sub(n);
        Ok(self.records.iter().skip(skip).collect())
    }

    /// Writes the buffer as a trajectory file at `path` plus a sidecar
    /// (`<path>.sidecar.json`) holding hidden vectors, scores and counters.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let runs = split_runs(&self.records);
        let mut trajs = Vec::with_capacity(runs.len());
        let mut side = Vec::with_capacity(runs.len());
        for run in &runs {
            let recs = &run[..];
            let mut t = Trajectory::default();
            for r in recs {
                t.push(r.s.clone(), r.a.clone(), Some(r.r));
            }
            let last = recs.last().expect("runs are non-empty");
            trajs.push(t);
            side.push(RunSidecar {
                hiddens: recs.iter().map(|r| r.h.clone()).collect(),
                ell: recs.iter().map(|r| r.ell).collect(),
                last_h_next: last.h_next.clone(),
                last_s_next: last.s_next.clone(),
                last_done: last.done,
            });
        }
        write_trajectories(path, trajs.iter().enumerate().map(|(i, t)| (i as u64, t, None)))?;
        let sidecar = Sidecar {
            format: SIDECAR_FORMAT.into(),
            version: SIDECAR_VERSION,
            capacity: self.capacity,
            insertion_counter: self.insertion_counter,
            runs: side,
        };
        serde_json::to_writer(BufWriter::new(File::create(sidecar_path(path))?), &sidecar)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let trajs = read_trajectories(path)?;
        let sp = sidecar_path(path);
        let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(&sp)?))
            .map_err(|e| Error::Load(format!("{}: {e}", sp.display())))?;
        if sidecar.format != SIDECAR_FORMAT || sidecar.version != SIDECAR_VERSION {
            return Err(Error::Load(format!("{}: not a {SIDECAR_FORMAT} v{SIDECAR_VERSION} file", sp.display())));
        }
        if sidecar.runs.len() != trajs.len() || sidecar.capacity == 0 {
            return Err(Error::Load(format!("{}: sidecar does not match {}", sp.display(), path.display())));
        }
        let mut records = VecDeque::new();
        for ((_, t, _), side) in trajs.into_iter().zip(sidecar.runs) {
            let n = t.len();
            if n == 0 || side.hiddens.len() != n || side.ell.len() != n || t.rewards.len() != n {
                return Err(Error::Load(format!("{}: run length mismatch", sp.display())));
            }
            for i in 0..n {
                let last = i + 1 == n;
                records.push_back(EnrichedTransition {
                    s: t.states[i].clone(),
                    h: side.hiddens[i].clone(),
                    a: t.actions[i].clone(),
                    r: t.rewards[i],
                    ell: side.ell[i],
                    s_next: if last { side.last_s_next.clone() } else { t.states[i + 1].clone() },
                    h_next: if last { side.last_h_next.clone() } else { side.hiddens[i + 1].clone() },
                    done: last && side.last_done,
                });
            }
        }
        if records.len() > sidecar.capacity {
            return Err(Error::Load(format!("{}: more records than capacity", sp.display())));
        }
        Ok(Self {
            capacity: sidecar.capacity,
            records,
            insertion_counter: sidecar.insertion_counter,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RunSidecar {
    hiddens: Vec<Vec<f64>>,
    ell: Vec<f64>,
    last_h_next: Vec<f64>,
    last_s_next: Vec<f64>,
    last_done: bool,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    capacity: usize,
    insertion_counter: u64,
    runs: Vec<RunSidecar>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".sidecar.json");
    PathBuf::from(p)
}

/// Maximal chained stretches: consecutive records where the next record
/// starts at the previous one's `(s', h')` and no episode ended in between.
fn split_runs(records: &VecDeque<EnrichedTransition>) -> Vec<Vec<&EnrichedTransition>> {
    let mut runs: Vec<Vec<&EnrichedTransition>> = Vec::new();
    for r in records {
        let chained = runs
            .last()
            .and_then(|run| run.last())
            .is_some_and(|p| !p.done && p.s_next == r.s && p.h_next == r.h);
        if chained {
            runs.last_mut().unwrap().push(r);
        } else {
            runs.push(vec![r]);
        }
    }
    runs
}

/// Annotates a complete episode with the frozen safety model. `s'` of the
/// final step is `next_state` when given; otherwise the final state is
/// repeated, which is harmless because that step is terminal.
pub fn enrich_episode(
    traj: &Trajectory,
    next_state: Option<&[f64]>,
    model: &SafetyModel,
) -> Result<Vec<EnrichedTransition>> {
    traj.validate()?;
    if traj.is_empty() {
        return Err(Error::Argument("cannot enrich an empty trajectory".into()));
    }
    if !traj.has_rewards() {
        return Err(Error::Argument("enrichment needs per-step rewards".into()));
    }
    let n = traj.len();
    let mut out = Vec::with_capacity(n);
    let mut h = model.init_hidden();
    for t in 0..n {
        let (s, a) = (&traj.states[t], &traj.actions[t]);
        let (ell, h_next) = model.step(s, &h, a)?;
        let s_next = match (t + 1 < n, next_state) {
            (true, _) => traj.states[t + 1].clone(),
            (false, Some(ns)) => ns.to_vec(),
            (false, None) => s.clone(),
        };
        out.push(EnrichedTransition {
            s: s.clone(),
            h: std::mem::replace(&mut h, h_next.clone()),
            a: a.clone(),
            r: traj.rewards[t],
            ell,
            s_next,
            h_next,
            done: t + 1 == n,
        });
    }
    Ok(out)
}

/// Replays whole logged episodes through the model, one transition per step.
pub fn enrich_legacy(trajectories: &[Trajectory], model: &SafetyModel) -> Result<Vec<EnrichedTransition>> {
    let mut out = Vec::new();
    for t in trajectories {
        out.extend(enrich_episode(t, None, model)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(i: usize) -> EnrichedTransition {
        EnrichedTransition {
            s: vec![i as f64],
            h: vec![0.0],
            a: vec![0.0],
            r: i as f64,
            ell: -0.1,
            s_next: vec![i as f64 + 1.0],
            h_next: vec![0.0],
            done: false,
        }
    }

    fn ids(v: &[&EnrichedTransition]) -> Vec<f64> {
        v.iter().map(|t| t.r).collect()
    }

    #[test]
    fn fifo_eviction_and_counter() {
        let mut b = ReplayBuffer::new(2);
        for i in 1..=3 {
            b.push(rec(i));
        }
        assert_eq!(b.len(), 2);
        assert_eq!(ids(&b.iter().collect::<Vec<_>>()), vec![2.0, 3.0]);
        assert_eq!(b.insertion_counter(), 3);
    }

    #[test]
    fn recent_sampling() {
        let mut b = ReplayBuffer::new(10);
        assert!(matches!(b.sample_recent(1), Err(Error::State(_))));
        for i in 1..=5 {
            b.push(rec(i));
            assert_eq!(ids(&b.sample_recent(1).unwrap()), vec![i as f64]);
        }
        assert_eq!(ids(&b.sample_recent(2).unwrap()), vec![4.0, 5.0]);
        assert_eq!(ids(&b.sample_recent(50).unwrap()), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn batch_sampling() {
        let mut b = ReplayBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_batch(3, &mut rng), Err(Error::State(_))));
        b.push(rec(7));
        assert_eq!(ids(&b.sample_batch(5, &mut rng).unwrap()), vec![7.0; 5]);
        for i in 0..9 {
            b.push(rec(i));
        }
        let a = ids(&b.sample_batch(20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap());
        let c = ids(&b.sample_batch(20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        let mut b = ReplayBuffer::new(10);
        for i in 0..10 {
            b.push(rec(i));
        }
        let n = 100_000;
        let mut counts = [0usize; 10];
        for t in b.sample_batch(n, &mut ChaCha8Rng::seed_from_u64(9)).unwrap() {
            counts[t.r as usize] += 1;
        }
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.1).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    fn model() -> SafetyModel {
        SafetyModel::new(2, 1, 4, &[6], 0.0, &mut ChaCha8Rng::seed_from_u64(1))
    }

    fn traj(n: usize, phase: f64) -> Trajectory {
        let mut t = Trajectory::default();
        for i in 0..n {
            let x = phase + i as f64 * 0.4;
            t.push(vec![x.sin(), x.cos()], vec![0.3 * x.cos()], Some(x));
        }
        t
    }

    #[test]
    fn enrichment_chains_and_matches_rollout() {
        let m = model();
        let one = enrich_legacy(&[traj(1, 0.0)], &m).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].h, m.init_hidden());
        assert!(one[0].done);

        let t = traj(7, 0.5);
        let e = enrich_legacy(std::slice::from_ref(&t), &m).unwrap();
        let score = m.trajectory_logprob(&t).unwrap();
        for (i, r) in e.iter().enumerate() {
            assert_eq!(r.ell, score.per_step[i]);
            assert_eq!(r.h, score.hiddens[i]);
            assert_eq!(r.done, i == 6);
            assert!(r.ell <= 0.0);
        }
        for w in e.windows(2) {
            assert_eq!(w[0].h_next, w[1].h);
            assert_eq!(w[0].s_next, w[1].s);
        }
    }

    #[test]
    fn enrichment_rejects_incomplete_input() {
        let m = model();
        assert!(matches!(enrich_legacy(&[Trajectory::default()], &m), Err(Error::Argument(_))));
        let mut no_rewards = traj(3, 0.0);
        no_rewards.rewards.clear();
        assert!(matches!(enrich_legacy(&[no_rewards], &m), Err(Error::Argument(_))));
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let m = model();
        let mut b = ReplayBuffer::new(12);
        b.extend(enrich_legacy(&[traj(5, 0.0), traj(4, 1.0), traj(6, 2.0)], &m).unwrap());
        assert_eq!(b.len(), 12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.jsonl");
        b.save_snapshot(&path).unwrap();
        let back = ReplayBuffer::load_snapshot(&path).unwrap();
        assert_eq!(back.capacity(), 12);
        assert_eq!(back.insertion_counter(), 15);
        assert!(back.iter().eq(b.iter()));
    }
}
