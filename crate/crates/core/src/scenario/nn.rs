//! Fully connected layers with hand-written backpropagation and Adam.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// He-normal initialization.
    pub fn new(n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        let scale = (2.0 / n_in as f64).sqrt();
        let w = Array2::from_shape_fn((n_out, n_in), |_| scale * rng.sample::<f64, _>(StandardNormal));
        Self { w, b: Array1::zeros(n_out) }
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }
    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w.t());
        z += &self.b;
        z
    }

    /// Returns `(dW, db, dX)` for upstream gradient `dz` and layer input `x`.
    pub fn backward(&self, x: ArrayView2<f64>, dz: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let dw = dz.t().dot(&x);
        let db = dz.sum_axis(Axis(0));
        let dx = dz.dot(&self.w);
        (dw, db, dx)
    }
}

/// Rectified hidden layers; the last layer is rectified only if `relu_last`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_last: bool,
}

/// Layer inputs and pre-activations recorded by `Mlp::forward`.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new(widths: &[usize], relu_last: bool, rng: &mut Rng) -> Self {
        let layers = widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Self { layers, relu_last }
    }

    fn activated(&self, k: usize) -> bool {
        k + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(a.view());
            inputs.push(a);
            a = if self.activated(k) { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
        }
        (a, MlpCache { inputs, pre })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            a = layer.forward(a.view());
            if self.activated(k) {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        a
    }

    /// Gradients for every layer and with respect to the input.
    pub fn backward(&self, cache: &MlpCache, d_out: Array2<f64>) -> (Vec<DenseGrad>, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = d_out;
        for k in (0..self.layers.len()).rev() {
            if self.activated(k) {
                Zip::from(&mut d).and(&cache.pre[k]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let (dw, db, dx) = self.layers[k].backward(cache.inputs[k].view(), d.view());
            grads.push(DenseGrad { w: dw, b: db });
            d = dx;
        }
        grads.reverse();
        (grads, d)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Adam state for a sequence of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<DenseGrad>,
    v: Vec<DenseGrad>,
}

impl Adam {
    pub fn new<'a>(lr: f64, layers: impl IntoIterator<Item = &'a Dense>) -> Self {
        let zeros: Vec<DenseGrad> = layers
            .into_iter()
            .map(|l| DenseGrad { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.len()) })
            .collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update<'a>(&mut self, layers: impl IntoIterator<Item = &'a mut Dense>, grads: &[DenseGrad]) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        for (((layer, g), m), v) in layers.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut layer.w).and(&g.w).and(&mut m.w).and(&mut v.w).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
            Zip::from(&mut layer.b).and(&g.b).and(&mut m.b).and(&mut v.b).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Plain Adam over a flat vector (latent-space search).
#[derive(Debug, Clone)]
pub struct AdamVec {
    lr: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamVec {
    pub fn new(lr: f64, n: usize) -> Self {
        Self { lr, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn update(&mut self, x: &mut [f64], g: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - 0.9f64.powi(self.step);
        let c2 = 1.0 - 0.999f64.powi(self.step);
        for i in 0..x.len() {
            self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
            self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}
