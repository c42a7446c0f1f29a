use ndarray::{s, Array2, ArrayView2};

use super::policy::standard_normal;
use super::{Agent, CriticPair};
use crate::nn::{polyak, Mlp};
use crate::replay::EnrichedTransition;
use crate::safety::SafetyModel;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticLosses {
    pub q_r: [f64; 2],
    pub q_psi: Option<[f64; 2]>,
}

/// Mean squared error of `net` against `targets` and its parameter gradient.
pub fn critic_mse(net: &Mlp, inputs: ArrayView2<f64>, targets: &[f64]) -> (f64, Vec<f64>) {
    let (q, cache) = net.forward_train(inputs, None::<&mut rand_chacha::ChaCha8Rng>);
    let n = targets.len() as f64;
    let mut d = Array2::zeros((targets.len(), 1));
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let e = q[[i, 0]] - y;
        loss += e * e;
        d[[i, 0]] = 2.0 * e / n;
    }
    let mut grad = vec![0.0; net.param_count()];
    net.backward(&cache, d.view(), &mut grad);
    (loss / n, grad)
}

/// Soft Bellman target `r + γ(1 - done)(min Q' - α logπ')`.
pub fn soft_target(r: f64, gamma: f64, done: bool, min_q: f64, alpha: f64, logp: f64) -> f64 {
    if done {
        r
    } else {
        r + gamma * (min_q - alpha * logp)
    }
}

/// Safety Bellman target `ℓ + γ(1 - done) min Q'_ψ`.
pub fn safety_target(ell: f64, gamma: f64, done: bool, min_q: f64) -> f64 {
    if done {
        ell
    } else {
        ell + gamma * min_q
    }
}

/// Dual gradient of the per-step bound: `mean ℓ - ln(d)/(T+1)`.
pub fn lambda_gradient(mean_ell: f64, target: f64) -> f64 {
    mean_ell - target
}

/// Dual gradient of the trajectory-level constraint: `mean exp(total) - d`.
pub fn lambda_gradient_nonlb(totals: &[f64], d: f64) -> f64 {
    totals.iter().map(|t| t.exp()).sum::<f64>() / totals.len() as f64 - d
}

/// Projected descent step `max(0, λ - lr g)`.
pub fn project_lambda(lambda: f64, lr: f64, g: f64) -> f64 {
    (lambda - lr * g).max(0.0)
}

fn concat(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).expect("row counts agree")
}

fn twin_min(pair: &[Mlp; 2], x: ArrayView2<f64>) -> Vec<f64> {
    let q1 = pair[0].forward(x);
    let q2 = pair[1].forward(x);
    q1.iter().zip(q2.iter()).map(|(a, b)| a.min(*b)).collect()
}

fn check_finite(what: &str, v: f64, updates: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite {what} ({v}) at update {updates}")))
    }
}

impl Agent {
    /// Rows of `s ⊕ h` (or `s'⊕ h'` when `next`) as the networks see them.
    pub fn observations(&self, batch: &[&EnrichedTransition], next: bool) -> Array2<f64> {
        let mut data = Vec::with_capacity(batch.len() * self.obs_dim());
        for t in batch {
            if next {
                self.observation(&t.s_next, &t.h_next, &mut data);
            } else {
                self.observation(&t.s, &t.h, &mut data);
            }
        }
        Array2::from_shape_vec((batch.len(), self.obs_dim()), data).expect("observation widths")
    }

    fn stored_actions(&self, batch: &[&EnrichedTransition]) -> Array2<f64> {
        let data: Vec<f64> = batch.iter().flat_map(|t| t.a.iter().copied()).collect();
        Array2::from_shape_vec((batch.len(), self.action_dim), data).expect("action widths")
    }

    /// Reward and safety targets for `batch`, with next actions drawn using
    /// the fixed noise `eps_next`.
    pub fn targets(&self, batch: &[&EnrichedTransition], eps_next: ArrayView2<f64>) -> (Vec<f64>, Option<Vec<f64>>) {
        let obs_next = self.observations(batch, true);
        let next = self.sample_policy(obs_next.view(), eps_next, false);
        let x = concat(&obs_next, &next.actions);
        let gamma = self.config.gamma;
        let alpha = self.alpha();
        let min_r = twin_min(&self.q_r.target, x.view());
        let y_r = batch
            .iter()
            .zip(&min_r)
            .zip(&next.logp)
            .map(|((t, &q), &lp)| soft_target(t.r, gamma, t.done, q, alpha, lp))
            .collect();
        let y_psi = self.q_psi.as_ref().map(|pair| {
            let min_p = twin_min(&pair.target, x.view());
            batch
                .iter()
                .zip(&min_p)
                .map(|(t, &q)| safety_target(t.ell, gamma, t.done, q))
                .collect()
        });
        (y_r, y_psi)
    }

    /// One MSE step for each live critic against targets from the frozen
    /// target networks.
    pub fn update_critics(&mut self, batch: &[&EnrichedTransition]) -> Result<CriticLosses> {
        let eps = standard_normal(&mut self.rng, batch.len(), self.action_dim);
        let (y_r, y_psi) = self.targets(batch, eps.view());
        let x = concat(&self.observations(batch, false), &self.stored_actions(batch));
        let updates = self.updates;
        let step = |pair: &mut CriticPair, y: &[f64], name: &str| -> Result<[f64; 2]> {
            let mut losses = [0.0; 2];
            for k in 0..2 {
                let (loss, grad) = critic_mse(&pair.live[k], x.view(), y);
                check_finite(name, loss, updates)?;
                pair.opt[k].step(&mut pair.live[k].params, &grad);
                losses[k] = loss;
            }
            Ok(losses)
        };
        let q_r = step(&mut self.q_r, &y_r, "reward critic loss")?;
        let q_psi = match (self.q_psi.as_mut(), y_psi) {
            (Some(pair), Some(y)) => Some(step(pair, &y, "safety critic loss")?),
            _ => None,
        };
        Ok(CriticLosses { q_r, q_psi })
    }

    /// Policy objective `mean[min Q_R + λ min Q_ψ - α logπ]` at reparameterized
    /// actions with noise `eps`, and its gradient w.r.t. the policy parameters.
    pub fn policy_objective(&self, batch: &[&EnrichedTransition], eps: ArrayView2<f64>) -> (f64, Vec<f64>, f64) {
        let n = batch.len() as f64;
        let obs = self.observations(batch, false);
        let sample = self.sample_policy(obs.view(), eps, true);
        let x = concat(&obs, &sample.actions);
        let od = self.obs_dim();
        let mut d_action = Array2::zeros((batch.len(), self.action_dim));
        let mut objective = vec![0.0; batch.len()];

        let mut add_pair = |pair: &CriticPair, weight: f64| {
            let (q1, c1) = pair.live[0].forward_train(x.view(), None::<&mut rand_chacha::ChaCha8Rng>);
            let (q2, c2) = pair.live[1].forward_train(x.view(), None::<&mut rand_chacha::ChaCha8Rng>);
            let mut d1 = Array2::zeros((batch.len(), 1));
            let mut d2 = Array2::zeros((batch.len(), 1));
            for b in 0..batch.len() {
                if q1[[b, 0]] <= q2[[b, 0]] {
                    objective[b] += weight * q1[[b, 0]];
                    d1[[b, 0]] = weight / n;
                } else {
                    objective[b] += weight * q2[[b, 0]];
                    d2[[b, 0]] = weight / n;
                }
            }
            let mut scratch = vec![0.0; pair.live[0].param_count()];
            let g1 = pair.live[0].backward(&c1, d1.view(), &mut scratch);
            let g2 = pair.live[1].backward(&c2, d2.view(), &mut scratch);
            d_action += &g1.slice(s![.., od..]);
            d_action += &g2.slice(s![.., od..]);
        };
        add_pair(&self.q_r, 1.0);
        if let Some(pair) = self.q_psi.as_ref().filter(|_| self.lambda != 0.0) {
            add_pair(pair, self.lambda);
        }
        let alpha = self.alpha();
        for (o, lp) in objective.iter_mut().zip(&sample.logp) {
            *o -= alpha * lp;
        }
        let d_logp = vec![-alpha / n; batch.len()];
        let d_out = self.policy_output_grad(&sample, d_action.view(), &d_logp);
        let mut grad = vec![0.0; self.policy.param_count()];
        self.policy
            .backward(sample.cache.as_ref().expect("training pass"), d_out.view(), &mut grad);
        let mean_logp = sample.logp.iter().sum::<f64>() / n;
        (objective.iter().sum::<f64>() / n, grad, mean_logp)
    }

    /// One ascent step on the policy objective with fresh noise; also adapts
    /// α when automatic tuning is on. Returns the objective before the step.
    pub fn update_policy(&mut self, batch: &[&EnrichedTransition]) -> Result<f64> {
        let eps = standard_normal(&mut self.rng, batch.len(), self.action_dim);
        let (objective, mut grad, mean_logp) = self.policy_objective(batch, eps.view());
        check_finite("policy objective", objective, self.updates)?;
        for g in grad.iter_mut() {
            *g = -*g;
        }
        self.policy_opt.step(&mut self.policy.params, &grad);
        if self.config.auto_alpha {
            let target = self.config.target_entropy.unwrap_or(-(self.action_dim as f64));
            // d/d(log α) of -α (logπ + target).
            let g = -self.alpha() * (mean_logp + target);
            self.alpha_opt.step(std::slice::from_mut(&mut self.log_alpha), &[g]);
        }
        self.updates += 1;
        Ok(objective)
    }

    /// Projected dual step on recent `(s, h)` pairs with freshly drawn
    /// actions. Returns the gradient used.
    pub fn update_lambda(&mut self, recent: &[&EnrichedTransition], safety: &SafetyModel) -> Result<f64> {
        if recent.is_empty() {
            return Err(Error::State("no recent records for the lambda update".into()));
        }
        let eps = standard_normal(&mut self.rng, recent.len(), self.action_dim);
        let obs = self.observations(recent, false);
        let actions = self.sample_policy(obs.view(), eps.view(), false).actions;
        if recent.iter().any(|t| t.h.len() != safety.hidden_size() || t.s.len() != safety.state_dim) {
            return Err(Error::Argument("recent records do not match the safety model".into()));
        }
        let inputs = safety.decoder_inputs(
            recent
                .iter()
                .zip(actions.rows())
                .map(|(t, a)| (&t.s[..], &t.h[..], a.to_slice().expect("contiguous row"))),
        );
        let ell = safety.batch_logprob(inputs.view());
        let mean = ell.iter().sum::<f64>() / ell.len() as f64;
        Ok(self.apply_lambda_gradient(lambda_gradient(mean, self.config.lambda_target())))
    }

    /// Dual step on the trajectory-level constraint from recent episodes'
    /// total safety log-probabilities.
    pub fn update_lambda_nonlb(&mut self, totals: &[f64]) -> Result<f64> {
        if totals.is_empty() {
            return Err(Error::State("no completed episodes for the lambda update".into()));
        }
        Ok(self.apply_lambda_gradient(lambda_gradient_nonlb(totals, self.config.d)))
    }

    /// Applies a precomputed dual gradient; a no-op for unconstrained agents.
    pub fn apply_lambda_gradient(&mut self, g: f64) -> f64 {
        if self.config.variant.constrained() {
            self.lambda = project_lambda(self.lambda, self.config.lambda_lr, g);
        }
        g
    }

    pub fn update_targets(&mut self) {
        let rho = self.config.polyak;
        for pair in std::iter::once(&mut self.q_r).chain(self.q_psi.as_mut()) {
            for k in 0..2 {
                polyak(&mut pair.target[k].params, &pair.live[k].params, rho);
            }
        }
    }
}
