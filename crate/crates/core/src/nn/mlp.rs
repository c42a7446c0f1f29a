use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init_weights;

const LN_EPS: f64 = 1e-5;

/// Layer widths and per-hidden-layer options of a feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Layer normalization on every hidden pre-activation.
    pub layer_norm: bool,
    /// Inverted dropout after every hidden activation (training only).
    pub dropout: f64,
}

impl MlpShape {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            output,
            layer_norm: false,
            dropout: 0.0,
        }
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend_from_slice(&self.hidden);
        w.push(self.output);
        w
    }

    fn layers(&self) -> Vec<LayerLayout> {
        let widths = self.widths();
        let n = widths.len() - 1;
        let mut offset = 0;
        let mut out = Vec::with_capacity(n);
        for l in 0..n {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let hidden = l + 1 < n;
            let w = offset;
            offset += fan_in * fan_out;
            let b = offset;
            offset += fan_out;
            let ln = if hidden && self.layer_norm {
                let g = offset;
                offset += 2 * fan_out;
                Some(g)
            } else {
                None
            };
            out.push(LayerLayout {
                fan_in,
                fan_out,
                w,
                b,
                ln,
                hidden,
            });
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .last()
            .map(|l| l.b + l.fan_out)
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    /// Offset of the gain vector; the bias vector follows it.
    ln: Option<usize>,
    hidden: bool,
}

impl LayerLayout {
    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.fan_in, self.fan_out), &p[self.w..self.b]).unwrap()
    }

    fn bias<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.b..self.b + self.fan_out])
    }
}

/// Feed-forward network: `Linear -> [LayerNorm] -> ReLU -> [Dropout]` per
/// hidden layer and a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub shape: MlpShape,
    pub params: Vec<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    /// Post-normalization, pre-activation values (hidden layers only).
    act_in: Option<Array2<f64>>,
    xhat: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    mask: Option<Array2<f64>>,
}

/// Activations retained by [`Mlp::forward_train`] for the backward pass.
pub struct MlpCache {
    layers: Vec<LayerCache>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(shape: MlpShape, rng: &mut R) -> Self {
        let mut params = vec![0.0; shape.param_count()];
        for layer in shape.layers() {
            init_weights(rng, layer.fan_in, &mut params[layer.w..layer.b]);
            if let Some(g) = layer.ln {
                params[g..g + layer.fan_out].fill(1.0);
            }
        }
        Self { shape, params }
    }

    pub fn zeros(shape: MlpShape) -> Self {
        let params = vec![0.0; shape.param_count()];
        Self { shape, params }
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input
    }

    pub fn output_dim(&self) -> usize {
        self.shape.output
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Inference pass (dropout disabled).
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.run(x, None::<&mut rand::rngs::ThreadRng>, false).0
    }

    /// Training pass. Dropout masks are drawn from `rng` when one is given
    /// and the shape has a positive dropout rate.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        rng: Option<&mut R>,
    ) -> (Array2<f64>, MlpCache) {
        let (y, cache) = self.run(x, rng, true);
        (y, cache.expect("cache requested"))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mut rng: Option<&mut R>,
        keep: bool,
    ) -> (Array2<f64>, Option<MlpCache>) {
        assert_eq!(x.ncols(), self.shape.input, "mlp input width mismatch");
        let p = &self.params;
        let mut caches = Vec::new();
        let mut cur = x.to_owned();
        for layer in self.shape.layers() {
            let mut z = cur.dot(&layer.weight(p));
            z += &layer.bias(p);
            if !layer.hidden {
                if keep {
                    caches.push(LayerCache {
                        input: cur,
                        act_in: None,
                        xhat: None,
                        inv_std: None,
                        mask: None,
                    });
                }
                cur = z;
                continue;
            }
            let (mut xhat_keep, mut inv_keep) = (None, None);
            if let Some(g) = layer.ln {
                let gain = ArrayView1::from(&p[g..g + layer.fan_out]);
                let beta = ArrayView1::from(&p[g + layer.fan_out..g + 2 * layer.fan_out]);
                let (xhat, inv_std) = normalize_rows(&z);
                z = &xhat * &gain + &beta;
                if keep {
                    xhat_keep = Some(xhat);
                    inv_keep = Some(inv_std);
                }
            }
            let act_in = if keep { Some(z.clone()) } else { None };
            z.mapv_inplace(|v| v.max(0.0));
            let mut mask = None;
            if self.shape.dropout > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    let keep_p = 1.0 - self.shape.dropout;
                    let m = Array2::from_shape_fn(z.raw_dim(), |_| {
                        if r.random::<f64>() < keep_p {
                            1.0 / keep_p
                        } else {
                            0.0
                        }
                    });
                    z *= &m;
                    mask = Some(m);
                }
            }
            if keep {
                caches.push(LayerCache {
                    input: cur,
                    act_in,
                    xhat: xhat_keep,
                    inv_std: inv_keep,
                    mask,
                });
            }
            cur = z;
        }
        let cache = keep.then_some(MlpCache { layers: caches });
        (cur, cache)
    }

    /// Backpropagates `d_out` (gradient of a scalar loss w.r.t. the outputs),
    /// accumulating parameter gradients into `grad` and returning the gradient
    /// w.r.t. the inputs.
    pub fn backward(&self, cache: &MlpCache, d_out: ArrayView2<f64>, grad: &mut [f64]) -> Array2<f64> {
        assert_eq!(grad.len(), self.params.len());
        let p = &self.params;
        let layers = self.shape.layers();
        let mut d = d_out.to_owned();
        for (layer, lc) in layers.iter().zip(&cache.layers).rev() {
            if layer.hidden {
                if let Some(m) = &lc.mask {
                    d *= m;
                }
                let act_in = lc.act_in.as_ref().expect("hidden cache");
                ndarray::Zip::from(&mut d)
                    .and(act_in)
                    .for_each(|dv, &a| {
                        if a <= 0.0 {
                            *dv = 0.0;
                        }
                    });
                if let Some(g) = layer.ln {
                    let n = layer.fan_out;
                    let xhat = lc.xhat.as_ref().unwrap();
                    let inv_std = lc.inv_std.as_ref().unwrap();
                    let d_gain = (&d * xhat).sum_axis(Axis(0));
                    let d_beta = d.sum_axis(Axis(0));
                    let gain = ArrayView1::from(&p[g..g + n]).to_owned();
                    for i in 0..n {
                        grad[g + i] += d_gain[i];
                        grad[g + n + i] += d_beta[i];
                    }
                    let dxhat = &d * &gain;
                    d = layer_norm_backward(&dxhat, xhat, inv_std);
                }
            }
            {
                let (head, _) = grad.split_at_mut(layer.b);
                let mut gw = ArrayViewMut2::from_shape((layer.fan_in, layer.fan_out), &mut head[layer.w..])
                    .unwrap();
                general_mat_mul(1.0, &lc.input.t(), &d, 1.0, &mut gw);
            }
            {
                let mut gb = ArrayViewMut1::from(&mut grad[layer.b..layer.b + layer.fan_out]);
                gb += &d.sum_axis(Axis(0));
            }
            d = d.dot(&layer.weight(p).t());
        }
        d
    }
}

fn normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = z.ncols() as f64;
    let mut xhat = z.clone();
    let mut inv = Array1::zeros(z.nrows());
    for (mut row, inv_std) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
        *inv_std = s;
    }
    (xhat, inv)
}

fn layer_norm_backward(dxhat: &Array2<f64>, xhat: &Array2<f64>, inv_std: &Array1<f64>) -> Array2<f64> {
    let n = dxhat.ncols() as f64;
    let mut dz = Array2::zeros(dxhat.raw_dim());
    for r in 0..dxhat.nrows() {
        let dx = dxhat.row(r);
        let xh = xhat.row(r);
        let sum_d = dx.sum();
        let sum_dx = dx.dot(&xh);
        let s = inv_std[r] / n;
        for c in 0..dxhat.ncols() {
            dz[[r, c]] = s * (n * dx[c] - sum_d - xh[c] * sum_dx);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (&net.forward(x.view()) * w).sum()
    }

    fn check_grad(layer_norm: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = MlpShape::new(3, &[5, 4], 2).with_layer_norm(layer_norm);
        let mut net = Mlp::new(shape, &mut rng);
        for v in net.params.iter_mut() {
            *v += 0.1 * rng.random::<f64>();
        }
        let x = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let w = Array2::from_shape_fn((4, 2), |(i, j)| 1.0 + (i + 2 * j) as f64 * 0.1);
        let (_, cache) = net.forward_train(x.view(), None::<&mut ChaCha8Rng>);
        let mut grad = vec![0.0; net.param_count()];
        let dx = net.backward(&cache, w.view(), &mut grad);
        let h = 1e-6;
        for i in 0..net.param_count() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let lp = loss(&net, &x, &w);
            net.params[i] = orig - h;
            let lm = loss(&net, &x, &w);
            net.params[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - grad[i]).abs() < 1e-5 * (1.0 + num.abs()), "param {i}: {num} vs {}", grad[i]);
        }
        let mut xp = x.clone();
        for r in 0..4 {
            for c in 0..3 {
                let orig = xp[[r, c]];
                xp[[r, c]] = orig + h;
                let lp = loss(&net, &xp, &w);
                xp[[r, c]] = orig - h;
                let lm = loss(&net, &xp, &w);
                xp[[r, c]] = orig;
                let num = (lp - lm) / (2.0 * h);
                assert!((num - dx[[r, c]]).abs() < 1e-5 * (1.0 + num.abs()));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_grad(false);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        check_grad(true);
    }

    #[test]
    fn param_layout_counts() {
        let s = MlpShape::new(3, &[4], 1);
        assert_eq!(s.param_count(), 3 * 4 + 4 + 4 + 1);
        let s = s.with_layer_norm(true);
        assert_eq!(s.param_count(), 3 * 4 + 4 + 8 + 4 + 1);
    }

    #[test]
    fn dropout_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(MlpShape::new(2, &[16], 1).with_dropout(0.5), &mut rng);
        let x = Array2::from_elem((1, 2), 0.7);
        assert_eq!(net.forward(x.view()), net.forward(x.view()));
        let (a, _) = net.forward_train(x.view(), Some(&mut rng));
        let (b, _) = net.forward_train(x.view(), Some(&mut rng));
        assert_ne!(a, b);
    }
}
