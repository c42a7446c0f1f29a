use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_weights, sigmoid};

/// Gated recurrent unit cell. Gate columns are ordered update, reset,
/// candidate:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// n  = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

pub struct GruStepCache {
    x: Array2<f64>,
    h: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
    /// `h U_n + c_n`, needed for the reset-gate gradient.
    hn: Array2<f64>,
}

struct Offsets {
    wi: usize,
    wh: usize,
    bi: usize,
    bh: usize,
    end: usize,
}

impl Gru {
    fn offsets(input: usize, hidden: usize) -> Offsets {
        let g = 3 * hidden;
        let wi = 0;
        let wh = wi + input * g;
        let bi = wh + hidden * g;
        let bh = bi + g;
        Offsets {
            wi,
            wh,
            bi,
            bh,
            end: bh + g,
        }
    }

    pub fn param_count_for(input: usize, hidden: usize) -> usize {
        Self::offsets(input, hidden).end
    }

    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let o = Self::offsets(input, hidden);
        let mut params = vec![0.0; o.end];
        init_weights(rng, input, &mut params[o.wi..o.wh]);
        init_weights(rng, hidden, &mut params[o.wh..o.bi]);
        Self { input, hidden, params }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            params: vec![0.0; Self::param_count_for(input, hidden)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn views(&self) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>, ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        let o = Self::offsets(self.input, self.hidden);
        let g = 3 * self.hidden;
        let p = &self.params;
        (
            ArrayView2::from_shape((self.input, g), &p[o.wi..o.wh]).unwrap(),
            ArrayView2::from_shape((self.hidden, g), &p[o.wh..o.bi]).unwrap(),
            ArrayView1::from(&p[o.bi..o.bh]),
            ArrayView1::from(&p[o.bh..o.end]),
        )
    }

    /// Batched step; rows of `x` and `h` are independent sequences.
    pub fn step(&self, x: ArrayView2<f64>, h: ArrayView2<f64>) -> Array2<f64> {
        self.step_train(x, h).0
    }

    pub fn step_train(&self, x: ArrayView2<f64>, h: ArrayView2<f64>) -> (Array2<f64>, GruStepCache) {
        assert_eq!(x.ncols(), self.input, "gru input width mismatch");
        assert_eq!(h.ncols(), self.hidden, "gru hidden width mismatch");
        let hs = self.hidden;
        let (wi, wh, bi, bh) = self.views();
        let gx = x.dot(&wi) + &bi;
        let gh = h.dot(&wh) + &bh;
        let z = (&gx.slice(s![.., 0..hs]) + &gh.slice(s![.., 0..hs])).mapv(sigmoid);
        let r = (&gx.slice(s![.., hs..2 * hs]) + &gh.slice(s![.., hs..2 * hs])).mapv(sigmoid);
        let hn = gh.slice(s![.., 2 * hs..3 * hs]).to_owned();
        let n = (&gx.slice(s![.., 2 * hs..3 * hs]) + &(&r * &hn)).mapv(f64::tanh);
        let h_next = &n + &(&z * &(&h - &n));
        let cache = GruStepCache {
            x: x.to_owned(),
            h: h.to_owned(),
            z,
            r,
            n,
            hn,
        };
        (h_next, cache)
    }

    /// Given `dL/dh'`, accumulates parameter gradients and returns
    /// `(dL/dx, dL/dh)`.
    pub fn backward_step(
        &self,
        cache: &GruStepCache,
        d_next: ArrayView2<f64>,
        grad: &mut [f64],
    ) -> (Array2<f64>, Array2<f64>) {
        let hs = self.hidden;
        let o = Self::offsets(self.input, self.hidden);
        let (wi, wh, _, _) = self.views();
        let GruStepCache { x, h, z, r, n, hn } = cache;

        let dn = &d_next * &z.mapv(|v| 1.0 - v);
        let dz = &d_next * &(h - n);
        let dh_direct = &d_next * z;
        let dn_pre = &dn * &n.mapv(|v| 1.0 - v * v);
        let dr = &dn_pre * hn;
        let dr_pre = &dr * &r.mapv(|v| v * (1.0 - v));
        let dz_pre = &dz * &z.mapv(|v| v * (1.0 - v));

        let rows = x.nrows();
        let mut dgx = Array2::zeros((rows, 3 * hs));
        dgx.slice_mut(s![.., 0..hs]).assign(&dz_pre);
        dgx.slice_mut(s![.., hs..2 * hs]).assign(&dr_pre);
        dgx.slice_mut(s![.., 2 * hs..]).assign(&dn_pre);
        let mut dgh = dgx.clone();
        dgh.slice_mut(s![.., 2 * hs..]).assign(&(&dn_pre * r));

        let g = 3 * hs;
        {
            let (head, _) = grad.split_at_mut(o.wh);
            let mut gwi = ArrayViewMut2::from_shape((self.input, g), &mut head[o.wi..]).unwrap();
            general_mat_mul(1.0, &x.t(), &dgx, 1.0, &mut gwi);
        }
        {
            let (head, _) = grad.split_at_mut(o.bi);
            let mut gwh = ArrayViewMut2::from_shape((hs, g), &mut head[o.wh..]).unwrap();
            general_mat_mul(1.0, &h.t(), &dgh, 1.0, &mut gwh);
        }
        {
            let mut gbi = ArrayViewMut1::from(&mut grad[o.bi..o.bh]);
            gbi += &dgx.sum_axis(Axis(0));
        }
        {
            let mut gbh = ArrayViewMut1::from(&mut grad[o.bh..o.end]);
            gbh += &dgh.sum_axis(Axis(0));
        }
        let dx = dgx.dot(&wi.t());
        let dh = dh_direct + dgh.dot(&wh.t());
        (dx, dh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_keep_zero_hidden() {
        let gru = Gru::zeros(3, 4);
        let x = Array2::from_elem((1, 3), 0.9);
        let h = Array2::zeros((1, 4));
        let out = gru.step(x.view(), h.view());
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_step_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gru = Gru::new(2, 3, &mut rng);
        for v in gru.params.iter_mut() {
            *v += 0.2 * (rng.random::<f64>() - 0.5);
        }
        let x0 = Array2::from_shape_fn((2, 2), |(i, j)| 0.3 * (i as f64) - 0.5 * (j as f64) + 0.1);
        let x1 = Array2::from_shape_fn((2, 2), |(i, j)| 0.7 - 0.2 * (i + j) as f64);
        let w = Array2::from_shape_fn((2, 3), |(i, j)| 1.0 + 0.3 * (i as f64) - 0.4 * (j as f64));
        let loss = |g: &Gru| {
            let h0 = Array2::zeros((2, 3));
            let h1 = g.step(x0.view(), h0.view());
            let h2 = g.step(x1.view(), h1.view());
            (&h2 * &w).sum()
        };
        let h0 = Array2::zeros((2, 3));
        let (h1, c0) = gru.step_train(x0.view(), h0.view());
        let (_, c1) = gru.step_train(x1.view(), h1.view());
        let mut grad = vec![0.0; gru.param_count()];
        let (_, dh1) = gru.backward_step(&c1, w.view(), &mut grad);
        gru.backward_step(&c0, dh1.view(), &mut grad);
        let eps = 1e-6;
        for i in 0..gru.param_count() {
            let orig = gru.params[i];
            gru.params[i] = orig + eps;
            let lp = loss(&gru);
            gru.params[i] = orig - eps;
            let lm = loss(&gru);
            gru.params[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            assert!((num - grad[i]).abs() < 1e-6 * (1.0 + num.abs()), "param {i}");
        }
    }
}
