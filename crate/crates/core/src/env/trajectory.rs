use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const TRAJECTORY_FORMAT: &str = "trajsafe.trajectories";
const SEGMENT_FORMAT: &str = "trajsafe.segments";
const FORMAT_VERSION: u32 = 1;

/// Ordered `(state, action)` pairs with optional per-step rewards.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    #[serde(default)]
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, rewards: Vec<f64>) -> Result<Self> {
        let t = Self {
            states,
            actions,
            rewards,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.actions.len() {
            return Err(Error::Argument(format!(
                "trajectory has {} states but {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        if !self.rewards.is_empty() && self.rewards.len() != self.states.len() {
            return Err(Error::Argument("rewards must be empty or one per step".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn has_rewards(&self) -> bool {
        !self.rewards.is_empty()
    }

    pub fn push(&mut self, state: Vec<f64>, action: Vec<f64>, reward: Option<f64>) {
        self.states.push(state);
        self.actions.push(action);
        if let Some(r) = reward {
            self.rewards.push(r);
        }
    }

    /// Steps `start..end` as a new trajectory.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            states: self.states[start..end].to_vec(),
            actions: self.actions[start..end].to_vec(),
            rewards: if self.rewards.is_empty() {
                Vec::new()
            } else {
                self.rewards[start..end].to_vec()
            },
        }
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Binary safety label ψ: 1 = safe, 0 = unsafe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum SafetyLabel {
    Unsafe,
    Safe,
}

impl SafetyLabel {
    pub fn from_safe(safe: bool) -> Self {
        if safe {
            SafetyLabel::Safe
        } else {
            SafetyLabel::Unsafe
        }
    }

    pub fn is_safe(self) -> bool {
        self == SafetyLabel::Safe
    }

    pub fn psi(self) -> u8 {
        u8::from(self)
    }
}

impl From<SafetyLabel> for u8 {
    fn from(l: SafetyLabel) -> u8 {
        match l {
            SafetyLabel::Unsafe => 0,
            SafetyLabel::Safe => 1,
        }
    }
}

impl TryFrom<u8> for SafetyLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(SafetyLabel::Unsafe),
            1 => Ok(SafetyLabel::Safe),
            other => Err(format!("safety label must be 0 or 1, got {other}")),
        }
    }
}

/// A (sub)trajectory with its ground-truth label, the safety-model datum.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSegment {
    pub episode_id: u64,
    /// Offset of the segment inside its source episode.
    pub start: usize,
    pub trajectory: Trajectory,
    pub label: SafetyLabel,
}

/// One line of a trajectory or segment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<usize>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    #[serde(default)]
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub label: Option<SafetyLabel>,
}

impl TrajectoryRecord {
    pub fn into_trajectory(self) -> Result<(u64, Trajectory, Option<SafetyLabel>)> {
        let traj = Trajectory::new(self.states, self.actions, self.rewards)?;
        Ok((self.episode_id, traj, self.label))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn write_jsonl<I>(path: &Path, format: &str, records: I) -> Result<()>
where
    I: IntoIterator<Item = TrajectoryRecord>,
{
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &Header {
            format: format.to_string(),
            version: FORMAT_VERSION,
        },
    )?;
    w.write_all(b"\n")?;
    for rec in records {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl(path: &Path, format: &str) -> Result<Vec<TrajectoryRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header: Header = match lines.next() {
        Some(line) => serde_json::from_str(&line?)
            .map_err(|e| Error::Load(format!("{}: bad header: {e}", path.display())))?,
        None => return Err(Error::Load(format!("{}: empty file", path.display()))),
    };
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "{}: expected {format} v{FORMAT_VERSION}, found {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Load(format!("{}:{}: {e}", path.display(), i + 2)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes `(episode_id, trajectory, label)` triples as line-delimited JSON.
pub fn write_trajectories<'a, I>(path: &Path, items: I) -> Result<()>
where
    I: IntoIterator<Item = (u64, &'a Trajectory, Option<SafetyLabel>)>,
{
    write_jsonl(
        path,
        TRAJECTORY_FORMAT,
        items.into_iter().map(|(id, t, label)| TrajectoryRecord {
            episode_id: id,
            start: None,
            states: t.states.clone(),
            actions: t.actions.clone(),
            rewards: t.rewards.clone(),
            label,
        }),
    )
}

pub fn read_trajectories(path: &Path) -> Result<Vec<(u64, Trajectory, Option<SafetyLabel>)>> {
    read_jsonl(path, TRAJECTORY_FORMAT)?
        .into_iter()
        .map(TrajectoryRecord::into_trajectory)
        .collect()
}

pub fn write_segments(path: &Path, segments: &[LabeledSegment]) -> Result<()> {
    write_jsonl(
        path,
        SEGMENT_FORMAT,
        segments.iter().map(|s| TrajectoryRecord {
            episode_id: s.episode_id,
            start: Some(s.start),
            states: s.trajectory.states.clone(),
            actions: s.trajectory.actions.clone(),
            rewards: s.trajectory.rewards.clone(),
            label: Some(s.label),
        }),
    )
}

pub fn read_segments(path: &Path) -> Result<Vec<LabeledSegment>> {
    read_jsonl(path, SEGMENT_FORMAT)?
        .into_iter()
        .map(|rec| {
            let start = rec.start.unwrap_or(0);
            let (episode_id, trajectory, label) = rec.into_trajectory()?;
            let label = label.ok_or_else(|| Error::Load(format!("segment of episode {episode_id} has no label")))?;
            Ok(LabeledSegment {
                episode_id,
                start,
                trajectory,
                label,
            })
        })
        .collect()
}
