use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Agent, LOG_STD_MAX, LOG_STD_MIN};
use crate::nn::{softplus, MlpCache};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln(1 - tanh(u)^2)`, stable for large `|u|`.
fn log_sech2(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// A `rows x cols` matrix of independent standard normal draws.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Log-density of the bounded action `a = bound * tanh(u)` with
/// `u ~ N(mean, exp(log_std)^2)`, per component and summed.
pub fn squashed_log_density(a: &[f64], mean: &[f64], log_std: &[f64], bound: f64) -> f64 {
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&a, &m), &ls)| {
            let u = (a / bound).atanh();
            let e = (u - m) / ls.exp();
            -0.5 * e * e - ls - HALF_LN_2PI - bound.ln() - log_sech2(u)
        })
        .sum()
}

/// A reparameterized batch of policy draws `a = bound * tanh(mean + std * ε)`.
pub struct PolicySample {
    pub mean: Array2<f64>,
    /// Clamped log standard deviation.
    pub log_std: Array2<f64>,
    pub eps: Array2<f64>,
    pub u: Array2<f64>,
    pub actions: Array2<f64>,
    pub logp: Vec<f64>,
    /// 1 where the raw log-std was inside the clamp range, else 0.
    pub(super) inside: Array2<f64>,
    pub(super) cache: Option<MlpCache>,
}

impl Agent {
    pub(crate) fn sample_policy(&self, x: ArrayView2<f64>, eps: ArrayView2<f64>, keep_cache: bool) -> PolicySample {
        let ad = self.action_dim;
        let (out, cache) = if keep_cache {
            let (y, c) = self.policy.forward_train(x, None::<&mut rand_chacha::ChaCha8Rng>);
            (y, Some(c))
        } else {
            (self.policy.forward(x), None)
        };
        let mean = out.slice(s![.., ..ad]).to_owned();
        let raw = out.slice(s![.., ad..]);
        let log_std = raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let inside = raw.mapv(|v| if (LOG_STD_MIN..=LOG_STD_MAX).contains(&v) { 1.0 } else { 0.0 });
        let u = &mean + &(&log_std.mapv(f64::exp) * &eps);
        let bound = self.action_bound;
        let actions = u.mapv(|v| bound * v.tanh());
        let mut logp = vec![0.0; x.nrows()];
        for (b, lp) in logp.iter_mut().enumerate() {
            for i in 0..ad {
                let (e, ls, ui) = (eps[[b, i]], log_std[[b, i]], u[[b, i]]);
                *lp += -0.5 * e * e - ls - HALF_LN_2PI - bound.ln() - log_sech2(ui);
            }
        }
        PolicySample {
            mean,
            log_std,
            eps: eps.to_owned(),
            u,
            actions,
            logp,
            inside,
            cache,
        }
    }

    /// Gradient w.r.t. the raw policy outputs of a loss with partials
    /// `d_action` (w.r.t. the bounded actions) and `d_logp` (w.r.t. each
    /// row's log-density), holding ε fixed.
    pub(super) fn policy_output_grad(&self, sample: &PolicySample, d_action: ArrayView2<f64>, d_logp: &[f64]) -> Array2<f64> {
        let ad = self.action_dim;
        let rows = sample.u.nrows();
        let bound = self.action_bound;
        let mut d_out = Array2::zeros((rows, 2 * ad));
        for b in 0..rows {
            for i in 0..ad {
                let th = sample.u[[b, i]].tanh();
                let du = d_action[[b, i]] * bound * (1.0 - th * th) + d_logp[b] * 2.0 * th;
                d_out[[b, i]] = du;
                let std = sample.log_std[[b, i]].exp();
                d_out[[b, ad + i]] = (du * std * sample.eps[[b, i]] - d_logp[b]) * sample.inside[[b, i]];
            }
        }
        d_out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{ActMode, TrainConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_d_agent() -> Agent {
        let cfg = TrainConfig {
            variant: Variant::Sac,
            hidden: vec![4],
            layer_norm: false,
            ..Default::default()
        };
        let mut a = Agent::new(cfg, 1, 1, 0, 2.0).unwrap();
        // Constant output: mean 0.3, log-std -0.4.
        a.policy.params.fill(0.0);
        let n = a.policy.params.len();
        a.policy.params[n - 2] = 0.3;
        a.policy.params[n - 1] = -0.4;
        a
    }

    fn std_normal_cdf(z: f64) -> f64 {
        // Composite Simpson rule on [-12, z].
        let (lo, n) = (-12.0, 20_000);
        let h = (z - lo) / n as f64;
        let pdf = |x: f64| (-0.5 * x * x - HALF_LN_2PI).exp();
        let mut acc = pdf(lo) + pdf(z);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * pdf(lo + k as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn log_density_matches_numerical_cdf_derivative() {
        let agent = one_d_agent();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::zeros((1, 1));
        for _ in 0..5 {
            let eps = standard_normal(&mut rng, 1, 1);
            let sample = agent.sample_policy(x.view(), eps.view(), false);
            let a = sample.actions[[0, 0]];
            let cdf = |a: f64| std_normal_cdf(((a / 2.0).atanh() - 0.3) / (-0.4f64).exp());
            let da = 1e-4;
            let density = (cdf(a + da) - cdf(a - da)) / (2.0 * da);
            let lp = sample.logp[0];
            assert!((lp.exp() - density).abs() < 1e-3 * density.max(1.0), "{} vs {density}", lp.exp());
            assert!((squashed_log_density(&[a], &[0.3], &[-0.4], 2.0) - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn vanishing_std_collapses_to_deterministic() {
        let mut agent = one_d_agent();
        let n = agent.policy.params.len();
        agent.policy.params[n - 1] = -50.0;
        let det = agent.act(&[0.0], &[], ActMode::Deterministic).unwrap();
        let smp = agent.act(&[0.0], &[], ActMode::Sample).unwrap();
        assert!((det[0] - smp[0]).abs() < 1e-7);
        assert!((det[0] - 2.0 * 0.3f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn stable_log_sech2() {
        for &u in &[-3.0, -0.2, 0.0, 0.7, 4.0] {
            let th: f64 = f64::tanh(u);
            assert!((log_sech2(u) - (1.0 - th * th).ln()).abs() < 1e-12);
        }
        assert!(log_sech2(400.0).is_finite());
    }
}
