//! Recurrent trajectory-safety classifier.
//!
//! A GRU summarises the history into a hidden vector `h_t` (all zeros at the
//! start of a segment). A decoder maps `(s_t, h_t, a_t)` to a logit whose
//! log-sigmoid is the per-step safety log-probability `ℓ_t ≤ 0`; the
//! trajectory's log-probability of being safe is `Σ_t ℓ_t`.

mod train;

pub use train::{bce_loss, SafetyTrainConfig, SafetyTrainReport, SegmentBatchGrad};

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{LabeledSegment, SafetyLabel, Trajectory};
use crate::nn::{log_sigmoid, Gru, Mlp, MlpShape};
use crate::{Error, Result};

const CHECKPOINT_FORMAT: &str = "trajsafe.safety_model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub norm: InputNorm,
    pub gru: Gru,
    pub decoder: Mlp,
}

/// Per-feature standardization `(x - mean) * scale` of states and actions,
/// applied before both the GRU and the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub state_mean: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_scale: Vec<f64>,
}

fn restrict(mean: &mut [f64], scale: &mut [f64], keep: &[usize]) {
    for i in 0..scale.len() {
        if !keep.contains(&i) {
            mean[i] = 0.0;
            scale[i] = 0.0;
        }
    }
}

impl InputNorm {
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_scale: vec![1.0; state_dim],
            action_mean: vec![0.0; action_dim],
            action_scale: vec![1.0; action_dim],
        }
    }

    /// Moments over every step of `trajs`. Near-constant features keep unit
    /// scale.
    pub fn fit<'a, I: IntoIterator<Item = &'a Trajectory>>(trajs: I, state_dim: usize, action_dim: usize) -> Self {
        fn moments(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
            if rows.is_empty() {
                return (vec![0.0; dim], vec![1.0; dim]);
            }
            let n = rows.len() as f64;
            let mut mean = vec![0.0; dim];
            for r in rows {
                for (m, x) in mean.iter_mut().zip(r.iter()) {
                    *m += x / n;
                }
            }
            let mut var = vec![0.0; dim];
            for r in rows {
                for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                    *v += (x - m) * (x - m) / n;
                }
            }
            let scale = var.iter().map(|v| if v.sqrt() > 1e-8 { 1.0 / v.sqrt() } else { 1.0 }).collect();
            (mean, scale)
        }
        let mut states: Vec<&[f64]> = Vec::new();
        let mut actions: Vec<&[f64]> = Vec::new();
        for t in trajs {
            states.extend(t.states.iter().map(Vec::as_slice));
            actions.extend(t.actions.iter().map(Vec::as_slice));
        }
        let (state_mean, state_scale) = moments(&states, state_dim);
        let (action_mean, action_scale) = moments(&actions, action_dim);
        Self {
            state_mean,
            state_scale,
            action_mean,
            action_scale,
        }
    }

    /// Zeroes every state feature not listed in `keep`.
    pub fn restrict_states(&mut self, keep: &[usize]) {
        restrict(&mut self.state_mean, &mut self.state_scale, keep);
    }

    /// Zeroes every action feature not listed in `keep`.
    pub fn restrict_actions(&mut self, keep: &[usize]) {
        restrict(&mut self.action_mean, &mut self.action_scale, keep);
    }

    pub(crate) fn push_state(&self, s: &[f64], out: &mut Vec<f64>) {
        out.extend(s.iter().zip(&self.state_mean).zip(&self.state_scale).map(|((x, m), k)| (x - m) * k));
    }

    pub(crate) fn push_action(&self, a: &[f64], out: &mut Vec<f64>) {
        out.extend(a.iter().zip(&self.action_mean).zip(&self.action_scale).map(|((x, m), k)| (x - m) * k));
    }
}

/// Output of [`SafetyModel::trajectory_logprob`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryScore {
    pub total: f64,
    pub per_step: Vec<f64>,
    /// `h_0 ..= h_n`: the hidden fed to each step plus the final summary.
    pub hiddens: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: SafetyModel,
}

impl SafetyModel {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden_size: usize,
        decoder_hidden: &[usize],
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let gru = Gru::new(state_dim + action_dim, hidden_size, rng);
        let shape = MlpShape::new(state_dim + hidden_size + action_dim, decoder_hidden, 1).with_dropout(dropout);
        let decoder = Mlp::new(shape, rng);
        Self {
            state_dim,
            action_dim,
            norm: InputNorm::identity(state_dim, action_dim),
            gru,
            decoder,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.gru.hidden
    }

    pub fn init_hidden(&self) -> Vec<f64> {
        vec![0.0; self.hidden_size()]
    }

    fn check_dims(&self, s: &[f64], h: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim || h.len() != self.hidden_size() || a.len() != self.action_dim {
            return Err(Error::Argument(format!(
                "safety model expects (s, h, a) of sizes ({}, {}, {}), got ({}, {}, {})",
                self.state_dim,
                self.hidden_size(),
                self.action_dim,
                s.len(),
                h.len(),
                a.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn gru_input(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(s.len() + a.len());
        self.norm.push_state(s, &mut x);
        self.norm.push_action(a, &mut x);
        x
    }

    pub(crate) fn push_decoder_input(&self, s: &[f64], h: &[f64], a: &[f64], out: &mut Vec<f64>) {
        self.norm.push_state(s, out);
        out.extend_from_slice(h);
        self.norm.push_action(a, out);
    }

    /// Stacks rows of `(s, h, a)` into decoder inputs for
    /// [`SafetyModel::batch_logprob`].
    pub fn decoder_inputs<'a, I>(&self, rows: I) -> Array2<f64>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64], &'a [f64])>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for (s, h, a) in rows {
            self.push_decoder_input(s, h, a, &mut data);
            n += 1;
        }
        Array2::from_shape_vec((n, self.state_dim + self.hidden_size() + self.action_dim), data)
            .expect("row widths agree")
    }

    pub fn step_hidden(&self, s: &[f64], h: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(s, h, a)?;
        let x = self.gru_input(s, a);
        let xv = ArrayView2::from_shape((1, x.len()), &x).unwrap();
        let hv = ArrayView2::from_shape((1, h.len()), h).unwrap();
        Ok(self.gru.step(xv, hv).into_raw_vec_and_offset().0)
    }

    /// Decoder logit for one step.
    pub fn logit(&self, s: &[f64], h: &[f64], a: &[f64]) -> Result<f64> {
        self.check_dims(s, h, a)?;
        let mut x = Vec::with_capacity(s.len() + h.len() + a.len());
        self.push_decoder_input(s, h, a, &mut x);
        let xv = ArrayView2::from_shape((1, x.len()), &x).unwrap();
        Ok(self.decoder.forward(xv)[[0, 0]])
    }

    /// `ℓ = log σ(logit)`; never positive.
    pub fn step_logprob(&self, s: &[f64], h: &[f64], a: &[f64]) -> Result<f64> {
        Ok(log_sigmoid(self.logit(s, h, a)?))
    }

    /// `(ℓ, h')` for one step.
    pub fn step(&self, s: &[f64], h: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.step_logprob(s, h, a)?, self.step_hidden(s, h, a)?))
    }

    /// Per-step log-probabilities batched over rows of `(s ⊕ h ⊕ a)`.
    pub fn batch_logprob(&self, inputs: ArrayView2<f64>) -> Vec<f64> {
        self.decoder.forward(inputs).iter().map(|&z| log_sigmoid(z)).collect()
    }

    /// Rolls the model over `traj` from `h_0 = 0`, summing left to right.
    pub fn trajectory_logprob(&self, traj: &Trajectory) -> Result<TrajectoryScore> {
        let mut h = self.init_hidden();
        let mut per_step = Vec::with_capacity(traj.len());
        let mut hiddens = Vec::with_capacity(traj.len() + 1);
        let mut total = 0.0;
        for (s, a) in traj.states.iter().zip(&traj.actions) {
            let (l, next) = self.step(s, &h, a)?;
            total += l;
            per_step.push(l);
            hiddens.push(std::mem::replace(&mut h, next));
        }
        hiddens.push(h);
        Ok(TrajectoryScore {
            total,
            per_step,
            hiddens,
        })
    }

    /// ψ = 1 iff the trajectory's predicted safe probability is at least
    /// `p_threshold`.
    pub fn classify(&self, traj: &Trajectory, p_threshold: f64) -> Result<SafetyLabel> {
        check_threshold(p_threshold)?;
        let total = self.trajectory_logprob(traj)?.total;
        Ok(label_from_total(total, p_threshold))
    }

    /// Segment totals computed in one batched pass (dropout off).
    pub fn batch_totals(&self, segments: &[&Trajectory]) -> Vec<f64> {
        train::batch_totals(self, segments)
    }

    pub fn evaluate_accuracy(&self, dataset: &[LabeledSegment], p_threshold: f64) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Argument("cannot evaluate accuracy on an empty dataset".into()));
        }
        check_threshold(p_threshold)?;
        let mut correct = 0usize;
        for chunk in dataset.chunks(256) {
            let trajs: Vec<&Trajectory> = chunk.iter().map(|s| &s.trajectory).collect();
            for (total, seg) in self.batch_totals(&trajs).into_iter().zip(chunk) {
                if label_from_total(total, p_threshold) == seg.label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    /// All parameters, GRU first then decoder.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.gru.params.clone();
        p.extend_from_slice(&self.decoder.params);
        p
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        let g = self.gru.param_count();
        assert_eq!(p.len(), g + self.decoder.param_count());
        self.gru.params.copy_from_slice(&p[..g]);
        self.decoder.params.copy_from_slice(&p[g..]);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!(
                "{}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint",
                path.display()
            )));
        }
        let m = ck.model;
        if m.gru.params.len() != crate::nn::Gru::param_count_for(m.gru.input, m.gru.hidden)
            || m.decoder.params.len() != m.decoder.shape.param_count()
            || m.gru.input != m.state_dim + m.action_dim
            || m.decoder.shape.input != m.state_dim + m.gru.hidden + m.action_dim
            || m.norm.state_mean.len() != m.state_dim
            || m.norm.state_scale.len() != m.state_dim
            || m.norm.action_mean.len() != m.action_dim
            || m.norm.action_scale.len() != m.action_dim
        {
            return Err(Error::Load(format!("{}: inconsistent parameter shapes", path.display())));
        }
        Ok(m)
    }
}

fn check_threshold(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Argument(format!("p_threshold must lie in (0, 1), got {p}")));
    }
    Ok(())
}

pub fn label_from_total(total: f64, p_threshold: f64) -> SafetyLabel {
    SafetyLabel::from_safe(total >= p_threshold.ln())
}
