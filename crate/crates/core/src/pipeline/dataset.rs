use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_versioned, write_versioned, ExperimentConfig};
use crate::agent::{train_agent, Agent, EpisodeRecord, TrainConfig, TrainHooks, Variant};
use crate::env::{
    enumerate_labeled_subsegments, label_trajectory, make_env, read_segments, read_trajectories, write_segments,
    write_trajectories, ConstraintSpec, LabeledSegment, SafetyLabel, Trajectory,
};
use crate::replay::ReplayBuffer;
use crate::safety::{SafetyModel, SafetyTrainReport};
use crate::Result;

pub const MANIFEST_FORMAT: &str = "trajsafe.manifest";
pub const SAFETY_REPORT_FORMAT: &str = "trajsafe.safety_report";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub safe: usize,
    pub unsafe_: usize,
}

impl ClassCounts {
    fn add(&mut self, label: SafetyLabel) {
        match label {
            SafetyLabel::Safe => self.safe += 1,
            SafetyLabel::Unsafe => self.unsafe_ += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub env_id: String,
    pub constraint: ConstraintSpec,
    pub collector_steps: usize,
    pub trajectories: ClassCounts,
    pub segments: ClassCounts,
}

/// Where a dataset lives under an output directory.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub dir: PathBuf,
}

impl DatasetPaths {
    pub fn new(out_dir: &Path) -> Self {
        Self { dir: out_dir.join("dataset") }
    }

    pub fn trajectories(&self) -> PathBuf {
        self.dir.join("trajectories.jsonl")
    }

    pub fn segments(&self) -> PathBuf {
        self.dir.join("segments.jsonl")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
}

struct Archive {
    limit: usize,
    trajectories: Vec<Trajectory>,
    steps: usize,
    throttle: Throttle,
}

/// Piecewise-constant action scale, redrawn at episode starts and with a
/// fixed probability per step.
struct Throttle {
    switch_prob: f64,
    min: f64,
    scale: f64,
    fresh_episode: bool,
    rng: ChaCha8Rng,
}

impl TrainHooks for Archive {
    fn on_episode(&mut self, episode: &EpisodeRecord<'_>) -> Result<()> {
        self.trajectories.push(episode.trajectory.clone());
        self.steps = episode.step;
        self.throttle.fresh_episode = true;
        Ok(())
    }

    fn adjust_action(&mut self, _step: usize, action: &mut [f64]) {
        let t = &mut self.throttle;
        if t.switch_prob == 0.0 {
            return;
        }
        if std::mem::take(&mut t.fresh_episode) || t.rng.random::<f64>() < t.switch_prob {
            t.scale = t.rng.random_range(t.min..=1.0);
        }
        for a in action.iter_mut() {
            *a *= t.scale;
        }
    }

    fn stop(&self) -> bool {
        self.trajectories.len() >= self.limit
    }
}

/// Labels every trajectory with the oracle and augments each into
/// sub-segments. Segment ids point back at the source trajectory.
///
/// Safe trajectories only yield safe segments, so the pooled set is then
/// balanced by dropping a seeded random subset of the majority class.
pub fn label_and_augment(
    trajectories: &[(u64, Trajectory)],
    spec: &ConstraintSpec,
    segments_per_traj: usize,
    seed: u64,
) -> Result<(Vec<SafetyLabel>, Vec<LabeledSegment>)> {
    let mut labels = Vec::with_capacity(trajectories.len());
    let mut segments = Vec::new();
    for (id, traj) in trajectories {
        labels.push(label_trajectory(traj, spec)?);
        for mut seg in enumerate_labeled_subsegments(traj, spec, segments_per_traj, seed ^ id.wrapping_mul(0x9e37_79b9))? {
            seg.episode_id = *id;
            segments.push(seg);
        }
    }
    let n_safe = segments.iter().filter(|s| s.label.is_safe()).count();
    let n_unsafe = segments.len() - n_safe;
    if n_safe > 0 && n_unsafe > 0 && n_safe != n_unsafe {
        let majority_safe = n_safe > n_unsafe;
        let mut majority: Vec<usize> = (0..segments.len()).filter(|&i| segments[i].label.is_safe() == majority_safe).collect();
        majority.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6261_6c61));
        let mut drop = vec![false; segments.len()];
        for &i in &majority[n_safe.min(n_unsafe)..] {
            drop[i] = true;
        }
        let mut keep = drop.iter().map(|d| !d);
        segments.retain(|_| keep.next().unwrap());
    }
    Ok((labels, segments))
}

fn count<I: IntoIterator<Item = SafetyLabel>>(labels: I) -> ClassCounts {
    let mut c = ClassCounts::default();
    labels.into_iter().for_each(|l| c.add(l));
    c
}

fn write_dataset(
    paths: &DatasetPaths,
    env_id: &str,
    spec: &ConstraintSpec,
    collector_steps: usize,
    trajectories: &[(u64, Trajectory)],
    labels: &[SafetyLabel],
    segments: &[LabeledSegment],
) -> Result<Manifest> {
    std::fs::create_dir_all(&paths.dir)?;
    write_trajectories(
        &paths.trajectories(),
        trajectories.iter().zip(labels).map(|((id, t), l)| (*id, t, Some(*l))),
    )?;
    write_segments(&paths.segments(), segments)?;
    let manifest = Manifest {
        env_id: env_id.to_string(),
        constraint: spec.clone(),
        collector_steps,
        trajectories: count(labels.iter().copied()),
        segments: count(segments.iter().map(|s| s.label)),
    };
    write_versioned(&paths.manifest(), MANIFEST_FORMAT, &manifest)?;
    Ok(manifest)
}

/// Trains an unconstrained SAC agent from scratch until it has produced
/// `collect.n_trajectories` episodes, archiving each one, then labels and
/// augments them and writes the dataset files and manifest.
pub fn collect_dataset(config: &ExperimentConfig) -> Result<Manifest> {
    let spec = config.constraint();
    let c = &config.collect;
    let mut env = make_env(&config.env)?;
    let agent_cfg = TrainConfig {
        variant: Variant::Sac,
        horizon: config.env.horizon.saturating_sub(1),
        total_steps: c.n_trajectories * config.env.horizon,
        update_every: c.update_every,
        updates_per_cycle: c.updates_per_cycle,
        log_interval: usize::MAX,
        seed: c.seed,
        ..config.agent.clone()
    };
    let mut agent = Agent::for_env(agent_cfg, env.as_ref(), None)?;
    let mut buffer = ReplayBuffer::new(config.agent.replay_capacity);
    let mut archive = Archive {
        limit: c.n_trajectories,
        trajectories: Vec::with_capacity(c.n_trajectories),
        steps: 0,
        throttle: Throttle {
            switch_prob: c.throttle_switch_prob,
            min: c.throttle_min,
            scale: 1.0,
            fresh_episode: true,
            rng: ChaCha8Rng::seed_from_u64(c.seed ^ 0x7468_726f),
        },
    };
    train_agent(env.as_mut(), None, &mut buffer, &mut agent, None, &mut archive)?;
    let trajectories: Vec<(u64, Trajectory)> = archive.trajectories.into_iter().enumerate().map(|(i, t)| (i as u64, t)).collect();
    let (labels, segments) = label_and_augment(&trajectories, &spec, c.segments_per_traj, c.seed)?;
    let manifest = write_dataset(
        &DatasetPaths::new(&config.output_dir),
        config.env.env_id.as_str(),
        &spec,
        archive.steps,
        &trajectories,
        &labels,
        &segments,
    )?;
    info!(
        "collected {} trajectories ({} unsafe), {} segments",
        trajectories.len(),
        manifest.trajectories.unsafe_,
        segments.len()
    );
    Ok(manifest)
}

/// Relabels an existing trajectory file in place and regenerates segments.
pub fn relabel_dataset(config: &ExperimentConfig) -> Result<Manifest> {
    let paths = DatasetPaths::new(&config.output_dir);
    let spec = config.constraint();
    let trajectories: Vec<(u64, Trajectory)> = read_trajectories(&paths.trajectories())?
        .into_iter()
        .map(|(id, t, _)| (id, t))
        .collect();
    let old: Option<Manifest> = read_versioned(&paths.manifest(), MANIFEST_FORMAT).ok();
    let (labels, segments) = label_and_augment(&trajectories, &spec, config.collect.segments_per_traj, config.collect.seed)?;
    write_dataset(
        &paths,
        config.env.env_id.as_str(),
        &spec,
        old.map_or(0, |m| m.collector_steps),
        &trajectories,
        &labels,
        &segments,
    )
}

pub fn read_manifest(out_dir: &Path) -> Result<Manifest> {
    read_versioned(&DatasetPaths::new(out_dir).manifest(), MANIFEST_FORMAT)
}

pub fn safety_model_path(out_dir: &Path) -> PathBuf {
    out_dir.join("safety").join("model.json")
}

/// Trains the safety model on the saved segments and writes the model and
/// its training report.
pub fn train_safety(config: &ExperimentConfig) -> Result<(SafetyModel, SafetyTrainReport)> {
    let segments = read_segments(&DatasetPaths::new(&config.output_dir).segments())?;
    let (model, report) = SafetyModel::train(&segments, &config.safety)?;
    let path = safety_model_path(&config.output_dir);
    std::fs::create_dir_all(path.parent().expect("model path has a parent"))?;
    model.save(&path)?;
    write_versioned(&path.with_file_name("report.json"), SAFETY_REPORT_FORMAT, &report)?;
    info!(
        "safety model: holdout accuracy {:.4} at epoch {}",
        report.best_holdout_accuracy, report.best_epoch
    );
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, EnvId};

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(EnvConfig::new(EnvId::PointRun).with_horizon(20), dir);
        cfg.collect.n_trajectories = 30;
        cfg.agent.hidden = vec![8];
        cfg.agent.warmup_steps = 100;
        cfg.agent.update_after = 100;
        cfg.agent.batch_size = 16;
        cfg.constraint = Some(ConstraintSpec::window_average(
            crate::env::Monitor::StateNorm { indices: vec![2, 3] },
            5,
            0.3,
        ));
        cfg
    }

    #[test]
    fn collect_then_relabel_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let m = collect_dataset(&cfg).unwrap();
        assert_eq!(m.trajectories.safe + m.trajectories.unsafe_, 30);
        assert_eq!(m.collector_steps, 600);
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let paths = DatasetPaths::new(dir.path());
        let before = std::fs::read(paths.segments()).unwrap();
        let labels_before = read_trajectories(&paths.trajectories()).unwrap();
        assert_eq!(relabel_dataset(&cfg).unwrap(), m);
        assert_eq!(std::fs::read(paths.segments()).unwrap(), before);
        assert_eq!(read_trajectories(&paths.trajectories()).unwrap(), labels_before);
    }

    #[test]
    fn throttled_collection_scales_actions() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.collect.n_trajectories = 5;
        cfg.collect.throttle_switch_prob = 0.2;
        collect_dataset(&cfg).unwrap();
        let a = read_trajectories(&DatasetPaths::new(dir.path()).trajectories()).unwrap();
        let other = tempfile::tempdir().unwrap();
        cfg.output_dir = other.path().to_path_buf();
        collect_dataset(&cfg).unwrap();
        let b = read_trajectories(&DatasetPaths::new(other.path()).trajectories()).unwrap();
        assert_eq!(a, b);
        // Warm-up actions are uniform on [-1, 1]; throttling shrinks them.
        let mean_abs = a.iter().flat_map(|(_, t, _)| t.actions.iter().flatten()).map(|v| v.abs()).sum::<f64>() / 200.0;
        assert!(mean_abs < 0.4, "{mean_abs}");
    }

    #[test]
    fn segments_keep_their_source_ids() {
        let traj = Trajectory::new(
            (0..8).map(|i| vec![0.0, 0.0, i as f64 * 0.2, 0.0]).collect(),
            vec![vec![0.0, 0.0]; 8],
            vec![0.0; 8],
        )
        .unwrap();
        let spec = ConstraintSpec::window_average(crate::env::Monitor::StateNorm { indices: vec![2, 3] }, 2, 0.5);
        let (labels, segs) = label_and_augment(&[(4, traj.clone()), (9, traj)], &spec, 3, 0).unwrap();
        assert_eq!(labels, vec![SafetyLabel::Unsafe; 2]);
        assert!(segs.iter().all(|s| s.episode_id == 4 || s.episode_id == 9));
        assert!(segs.iter().any(|s| s.label.is_safe()));
    }

    #[test]
    fn pooled_segments_are_balanced() {
        let make = |speed: f64| {
            Trajectory::new(vec![vec![0.0, 0.0, speed, 0.0]; 6], vec![vec![0.0, 0.0]; 6], vec![0.0; 6]).unwrap()
        };
        let spec = ConstraintSpec::window_average(crate::env::Monitor::StateNorm { indices: vec![2, 3] }, 2, 0.5);
        let trajs: Vec<(u64, Trajectory)> = (0..10).map(|i| (i, make(if i < 8 { 0.1 } else { 0.9 }))).collect();
        let (_, segs) = label_and_augment(&trajs, &spec, 4, 3).unwrap();
        let safe = segs.iter().filter(|s| s.label.is_safe()).count();
        assert!(safe > 0);
        assert_eq!(2 * safe, segs.len());
        let (_, again) = label_and_augment(&trajs, &spec, 4, 3).unwrap();
        assert_eq!(segs, again);
    }
}
