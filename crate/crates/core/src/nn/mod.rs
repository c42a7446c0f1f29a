//! Small dense networks with hand-written backward passes.
//!
//! Every network keeps its parameters in one flat `Vec<f64>`, so optimizers,
//! polyak averaging, checkpoints and finite-difference checks all operate on
//! plain slices.

mod adam;
mod gru;
mod mlp;

pub use adam::Adam;
pub use gru::{Gru, GruStepCache};
pub use mlp::{Mlp, MlpCache, MlpShape};

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln σ(x)`; stays finite for large negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `ln(1 - e^x)` for `x < 0`.
pub fn log1m_exp(x: f64) -> f64 {
    debug_assert!(x < 0.0);
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Fan-in scaled Gaussian init used by every layer.
pub(crate) fn init_weights<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, out: &mut [f64]) {
    let std = (1.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    for w in out.iter_mut() {
        *w = normal.sample(rng);
    }
}

/// `target <- rho * target + (1 - rho) * live`, elementwise.
pub fn polyak(target: &mut [f64], live: &[f64], rho: f64) {
    assert_eq!(target.len(), live.len(), "polyak shape mismatch");
    for (t, &l) in target.iter_mut().zip(live) {
        *t = rho * *t + (1.0 - rho) * l;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        let v = log_sigmoid(-50.0);
        let expected = -50.0 - (-50.0f64).exp().ln_1p();
        assert!(v.is_finite());
        assert!((v - expected).abs() < 1e-12);
        assert!(log_sigmoid(800.0) <= 0.0);
        assert!(log_sigmoid(-800.0).is_finite());
    }

    #[test]
    fn log1m_exp_matches_naive_where_naive_is_accurate() {
        for &x in &[-5.0, -1.0, -0.5, -0.1] {
            let naive = (1.0 - f64::exp(x)).ln();
            assert!((log1m_exp(x) - naive).abs() < 1e-12);
        }
        assert!((log1m_exp(0.5f64.ln()) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log1m_exp(-1e-12).is_finite());
    }

    #[test]
    fn polyak_extremes() {
        let live = vec![4.0, -1.0];
        let mut t = vec![2.0, 3.0];
        polyak(&mut t, &live, 1.0);
        assert_eq!(t, vec![2.0, 3.0]);
        polyak(&mut t, &live, 0.5);
        assert_eq!(t, vec![3.0, 1.0]);
        polyak(&mut t, &live, 0.0);
        assert_eq!(t, live);
    }
}
