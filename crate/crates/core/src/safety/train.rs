use std::collections::BTreeSet;

use log::debug;
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SafetyModel;
use crate::env::{LabeledSegment, SafetyLabel, Trajectory};
use crate::nn::{log1m_exp, log_sigmoid, sigmoid, Adam, GruStepCache, MlpCache};
use crate::{Error, Result};

/// Upper clamp on the segment total in the unsafe-label loss, keeping
/// `-ln(1 - e^x)` finite.
const UNSAFE_TOTAL_CLAMP: f64 = -1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyTrainConfig {
    pub hidden_size: usize,
    pub decoder_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub minibatch: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub holdout_fraction: f64,
    pub p_threshold: f64,
    /// State components the model may see; all of them when absent. The
    /// others are zeroed after normalization.
    pub state_features: Option<Vec<usize>>,
    /// Action components the model may see; an empty list hides actions.
    pub action_features: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for SafetyTrainConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            decoder_hidden: vec![32, 32],
            learning_rate: 1e-4,
            minibatch: 100,
            dropout: 0.5,
            epochs: 30,
            holdout_fraction: 0.2,
            p_threshold: 0.5,
            state_features: None,
            action_features: None,
            seed: 0,
        }
    }
}

impl SafetyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("safety training: {m}")));
        if self.hidden_size == 0 || self.decoder_hidden.iter().any(|&w| w == 0) {
            return bad("layer widths must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.minibatch == 0 || self.epochs == 0 {
            return bad("minibatch and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must lie in (0, 1)");
        }
        if !(self.p_threshold > 0.0 && self.p_threshold < 1.0) {
            return bad("p_threshold must lie in (0, 1)");
        }
        if self.state_features.as_ref().is_some_and(|f| f.is_empty()) {
            return bad("state_features must not be empty");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SafetyTrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_holdout_accuracy: f64,
    pub train_segments: usize,
    pub holdout_segments: usize,
}

/// Segment-level binary cross-entropy with `total` as the log-probability
/// of the safe class.
pub fn bce_loss(total: f64, label: SafetyLabel) -> f64 {
    match label {
        SafetyLabel::Safe => -total,
        SafetyLabel::Unsafe => -log1m_exp(total.min(UNSAFE_TOTAL_CLAMP)),
    }
}

fn bce_dtotal(total: f64, label: SafetyLabel) -> f64 {
    match label {
        SafetyLabel::Safe => -1.0,
        SafetyLabel::Unsafe if total < UNSAFE_TOTAL_CLAMP => 1.0 / (-total).exp_m1(),
        SafetyLabel::Unsafe => 0.0,
    }
}

/// Mean loss over a minibatch and its gradient in
/// [`SafetyModel::params_flat`] order.
#[derive(Clone, Debug)]
pub struct SegmentBatchGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

struct Pass {
    /// Segment indices sorted by decreasing length.
    order: Vec<usize>,
    /// Active rows per timestep.
    active: Vec<usize>,
    dec_input: Array2<f64>,
    gru_caches: Vec<GruStepCache>,
}

fn forward_pass(model: &SafetyModel, segs: &[&Trajectory], keep: bool) -> Pass {
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(segs[i].len()));
    let max_len = order.first().map(|&i| segs[i].len()).unwrap_or(0);
    let active: Vec<usize> = (0..max_len)
        .map(|t| order.iter().take_while(|&&i| segs[i].len() > t).count())
        .collect();
    let (sd, ad, hs) = (model.state_dim, model.action_dim, model.hidden_size());
    let width = sd + hs + ad;
    let rows: usize = active.iter().sum();
    let mut dec_input = Array2::zeros((rows, width));
    let mut gru_caches = Vec::new();
    let mut h = Array2::<f64>::zeros((active.first().copied().unwrap_or(0), hs));
    let mut row = 0;
    for t in 0..max_len {
        let k = active[t];
        let mut buf = Vec::with_capacity(width);
        for (r, &i) in order[..k].iter().enumerate() {
            let seg = segs[i];
            buf.clear();
            model.push_decoder_input(&seg.states[t], h.row(r).as_slice().expect("contiguous"), &seg.actions[t], &mut buf);
            dec_input.row_mut(row + r).assign(&ndarray::ArrayView1::from(&buf[..]));
        }
        row += k;
        let next_k = active.get(t + 1).copied().unwrap_or(0);
        if next_k == 0 {
            break;
        }
        let mut x = Array2::zeros((next_k, sd + ad));
        for (r, &i) in order[..next_k].iter().enumerate() {
            let seg = segs[i];
            x.row_mut(r)
                .assign(&ndarray::ArrayView1::from(&model.gru_input(&seg.states[t], &seg.actions[t])[..]));
        }
        let hv = h.slice(s![..next_k, ..]);
        if keep {
            let (hn, cache) = model.gru.step_train(x.view(), hv);
            gru_caches.push(cache);
            h = hn;
        } else {
            h = model.gru.step(x.view(), hv);
        }
    }
    Pass {
        order,
        active,
        dec_input,
        gru_caches,
    }
}

/// Accumulates per-row values into per-segment totals, left to right in time.
fn segment_totals(pass: &Pass, per_row: &[f64], n: usize) -> Vec<f64> {
    let mut totals = vec![0.0; n];
    let mut row = 0;
    for &k in &pass.active {
        for r in 0..k {
            totals[pass.order[r]] += per_row[row + r];
        }
        row += k;
    }
    totals
}

pub(super) fn batch_totals(model: &SafetyModel, segs: &[&Trajectory]) -> Vec<f64> {
    let pass = forward_pass(model, segs, false);
    let ls = model.batch_logprob(pass.dec_input.view());
    segment_totals(&pass, &ls, segs.len())
}

impl SafetyModel {
    /// Mean segment BCE and its exact gradient. Dropout masks are drawn from
    /// `dropout_rng` when given; pass `None` for a deterministic loss.
    pub fn bce_loss_and_grad<R: Rng + ?Sized>(
        &self,
        batch: &[&LabeledSegment],
        dropout_rng: Option<&mut R>,
    ) -> SegmentBatchGrad {
        let trajs: Vec<&Trajectory> = batch.iter().map(|s| &s.trajectory).collect();
        let pass = forward_pass(self, &trajs, true);
        let (logits, dec_cache): (Array2<f64>, MlpCache) = self.decoder.forward_train(pass.dec_input.view(), dropout_rng);
        let ls: Vec<f64> = logits.iter().map(|&z| log_sigmoid(z)).collect();
        let totals = segment_totals(&pass, &ls, batch.len());
        let n = batch.len().max(1) as f64;
        let loss = totals.iter().zip(batch).map(|(&t, s)| bce_loss(t, s.label)).sum::<f64>() / n;
        let dtotal: Vec<f64> = totals
            .iter()
            .zip(batch)
            .map(|(&t, s)| bce_dtotal(t, s.label) / n)
            .collect();

        let mut d_logit = Array2::zeros((logits.nrows(), 1));
        let mut row = 0;
        for &k in &pass.active {
            for r in 0..k {
                let z = logits[[row + r, 0]];
                d_logit[[row + r, 0]] = dtotal[pass.order[r]] * sigmoid(-z);
            }
            row += k;
        }
        let g_len = self.gru.param_count();
        let mut grad = vec![0.0; g_len + self.decoder.param_count()];
        let (grad_gru, grad_dec) = grad.split_at_mut(g_len);
        let d_in = self.decoder.backward(&dec_cache, d_logit.view(), grad_dec);

        let (sd, hs) = (self.state_dim, self.hidden_size());
        let mut starts = Vec::with_capacity(pass.active.len());
        let mut acc = 0;
        for &k in &pass.active {
            starts.push(acc);
            acc += k;
        }
        let dec_dh = |t: usize| -> ArrayView2<f64> {
            d_in.slice(s![starts[t]..starts[t] + pass.active[t], sd..sd + hs])
        };
        let steps = pass.gru_caches.len();
        let mut g_next: Option<Array2<f64>> = None;
        for t in (0..=steps).rev() {
            if t >= pass.active.len() {
                continue;
            }
            let mut g = dec_dh(t).to_owned();
            if t < steps {
                let d_next = g_next.take().expect("gradient from step t+1");
                let (_, dh) = self.gru.backward_step(&pass.gru_caches[t], d_next.view(), grad_gru);
                let mut head = g.slice_mut(s![..dh.nrows(), ..]);
                head += &dh;
            }
            g_next = Some(g);
        }
        SegmentBatchGrad { loss, grad }
    }

    /// Trains a fresh model on `dataset`, returning the parameters of the
    /// epoch with the best holdout accuracy.
    pub fn train(dataset: &[LabeledSegment], config: &SafetyTrainConfig) -> Result<(SafetyModel, SafetyTrainReport)> {
        config.validate()?;
        let first = dataset
            .iter()
            .find(|s| !s.trajectory.is_empty())
            .ok_or_else(|| Error::Training("dataset has no non-empty segments".into()))?;
        let classes: BTreeSet<u8> = dataset.iter().map(|s| s.label.psi()).collect();
        if classes.len() < 2 {
            return Err(Error::Training("dataset must contain both safe and unsafe segments".into()));
        }
        let state_dim = first.trajectory.states[0].len();
        let action_dim = first.trajectory.actions[0].len();
        for seg in dataset {
            seg.trajectory.validate()?;
            if seg.trajectory.states.iter().any(|s| s.len() != state_dim)
                || seg.trajectory.actions.iter().any(|a| a.len() != action_dim)
            {
                return Err(Error::Training("segments disagree on state/action dimensions".into()));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (train_idx, holdout_idx) = split_by_episode(dataset, config.holdout_fraction, &mut rng);
        let holdout: Vec<LabeledSegment> = holdout_idx.iter().map(|&i| dataset[i].clone()).collect();

        let mut model = SafetyModel::new(
            state_dim,
            action_dim,
            config.hidden_size,
            &config.decoder_hidden,
            config.dropout,
            &mut rng,
        );
        model.norm = super::InputNorm::fit(train_idx.iter().map(|&i| &dataset[i].trajectory), state_dim, action_dim);
        if let Some(keep) = &config.state_features {
            if let Some(&i) = keep.iter().find(|&&i| i >= state_dim) {
                return Err(Error::Config(format!(
                    "safety training: state feature {i} out of range for state dimension {state_dim}"
                )));
            }
            model.norm.restrict_states(keep);
        }
        if let Some(keep) = &config.action_features {
            if let Some(&i) = keep.iter().find(|&&i| i >= action_dim) {
                return Err(Error::Config(format!(
                    "safety training: action feature {i} out of range for action dimension {action_dim}"
                )));
            }
            model.norm.restrict_actions(keep);
        }
        let mut opt_gru = Adam::new(model.gru.param_count(), config.learning_rate);
        let mut opt_dec = Adam::new(model.decoder.param_count(), config.learning_rate);
        let mut best: Option<(usize, f64, SafetyModel)> = None;
        let mut epochs = Vec::with_capacity(config.epochs);
        let mut order = train_idx.clone();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(config.minibatch) {
                let batch: Vec<&LabeledSegment> = chunk.iter().map(|&i| &dataset[i]).collect();
                let out = model.bce_loss_and_grad(&batch, Some(&mut rng));
                if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite safety loss at epoch {epoch} (loss = {})",
                        out.loss
                    )));
                }
                let (gg, gd) = out.grad.split_at(model.gru.param_count());
                opt_gru.step(&mut model.gru.params, gg);
                opt_dec.step(&mut model.decoder.params, gd);
                loss_sum += out.loss;
                batches += 1;
            }
            let acc = model.evaluate_accuracy(&holdout, config.p_threshold)?;
            let train_loss = loss_sum / batches.max(1) as f64;
            debug!("safety epoch {epoch}: loss {train_loss:.4}, holdout accuracy {acc:.4}");
            epochs.push(EpochStats {
                epoch,
                train_loss,
                holdout_accuracy: acc,
            });
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch, acc, model.clone()));
            }
        }
        let (best_epoch, best_acc, best_model) = best.expect("at least one epoch");
        Ok((
            best_model,
            SafetyTrainReport {
                epochs,
                best_epoch,
                best_holdout_accuracy: best_acc,
                train_segments: train_idx.len(),
                holdout_segments: holdout_idx.len(),
            },
        ))
    }
}

/// Holds out whole episodes so segments of one trajectory never straddle
/// the split. Falls back to a per-segment split when there is only one
/// episode.
fn split_by_episode<R: Rng>(dataset: &[LabeledSegment], fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut episodes: Vec<u64> = dataset
        .iter()
        .map(|s| s.episode_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if episodes.len() < 2 {
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        idx.shuffle(rng);
        let k = ((dataset.len() as f64 * fraction).ceil() as usize).clamp(1, dataset.len().saturating_sub(1).max(1));
        let holdout = idx[..k].to_vec();
        let train = idx[k..].to_vec();
        return (if train.is_empty() { holdout.clone() } else { train }, holdout);
    }
    episodes.shuffle(rng);
    let k = ((episodes.len() as f64 * fraction).ceil() as usize).clamp(1, episodes.len() - 1);
    let held: BTreeSet<u64> = episodes[..k].iter().copied().collect();
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (i, s) in dataset.iter().enumerate() {
        if held.contains(&s.episode_id) {
            holdout.push(i);
        } else {
            train.push(i);
        }
    }
    (train, holdout)
}
