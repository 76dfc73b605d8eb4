//! Time-conditioned residual MLP over flattened trajectories, with manual
//! backpropagation and an Adam optimizer.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Predicts the clean (normalized, flattened) trajectory from a noisy one at step `k`.
pub trait Denoiser: Send + Sync {
    fn input_dim(&self) -> usize;
    fn predict(&self, x: ArrayView2<'_, f32>, k: usize) -> Array2<f32>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub embed_dim: usize,
}

fn silu(z: f32) -> f32 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f32) -> f32 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Sinusoidal embedding of the diffusion step index.
pub fn step_embedding(k: usize, dim: usize) -> Array1<f32> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(100.0f32).ln() * i as f32 / half as f32).exp();
        let a = k as f32 * freq;
        e[i] = a.sin();
        e[half + i] = a.cos();
    }
    e
}

/// Parameters stored as a flat list of matrices; biases are `1 x n`.
///
/// Layout: `[w_in, b_in, (w1, wt, b1, w2, b2) * blocks, w_out, b_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp {
    shape: MlpShape,
    params: Vec<Array2<f32>>,
}

struct Cache {
    x_in: Array2<f32>,
    emb: Array2<f32>,
    z0: Array2<f32>,
    /// Residual stream entering each block, then the final stream.
    hs: Vec<Array2<f32>>,
    /// Pre-activation of each block's hidden layer.
    pre: Vec<Array2<f32>>,
}

impl ResidualMlp {
    pub fn new(shape: MlpShape, rng: &mut Rng) -> Self {
        let mut params = Vec::new();
        let dense = |fan_in: usize, fan_out: usize, gain: f32, rng: &mut Rng| {
            let lim = gain * (6.0 / (fan_in + fan_out) as f32).sqrt();
            Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-lim..lim))
        };
        params.push(dense(shape.input_dim + shape.embed_dim, shape.hidden, 1.0, rng));
        params.push(Array2::zeros((1, shape.hidden)));
        for _ in 0..shape.blocks {
            params.push(dense(shape.hidden, shape.hidden, 1.0, rng));
            params.push(dense(shape.embed_dim, shape.hidden, 1.0, rng));
            params.push(Array2::zeros((1, shape.hidden)));
            params.push(dense(shape.hidden, shape.hidden, 0.2, rng));
            params.push(Array2::zeros((1, shape.hidden)));
        }
        params.push(dense(shape.hidden, shape.input_dim, 0.5, rng));
        params.push(Array2::zeros((1, shape.input_dim)));
        ResidualMlp { shape, params }
    }

    pub fn from_params(shape: MlpShape, params: Vec<Array2<f32>>) -> Option<Self> {
        let expected = Self::param_shapes(shape);
        if params.len() != expected.len() || params.iter().zip(&expected).any(|(p, s)| p.dim() != *s) {
            return None;
        }
        Some(ResidualMlp { shape, params })
    }

    pub fn param_shapes(shape: MlpShape) -> Vec<(usize, usize)> {
        let mut v = vec![(shape.input_dim + shape.embed_dim, shape.hidden), (1, shape.hidden)];
        for _ in 0..shape.blocks {
            v.extend([
                (shape.hidden, shape.hidden),
                (shape.embed_dim, shape.hidden),
                (1, shape.hidden),
                (shape.hidden, shape.hidden),
                (1, shape.hidden),
            ]);
        }
        v.extend([(shape.hidden, shape.input_dim), (1, shape.input_dim)]);
        v
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn params(&self) -> &[Array2<f32>] {
        &self.params
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn embed_rows(&self, ks: &[usize]) -> Array2<f32> {
        let mut emb = Array2::zeros((ks.len(), self.shape.embed_dim));
        for (r, &k) in ks.iter().enumerate() {
            emb.row_mut(r).assign(&step_embedding(k, self.shape.embed_dim));
        }
        emb
    }

    fn forward_cached(&self, x: ArrayView2<'_, f32>, ks: &[usize]) -> (Array2<f32>, Cache) {
        let b = x.nrows();
        let d = self.shape.input_dim;
        let emb = self.embed_rows(ks);
        let mut x_in = Array2::zeros((b, d + self.shape.embed_dim));
        x_in.slice_mut(s![.., ..d]).assign(&x);
        x_in.slice_mut(s![.., d..]).assign(&emb);
        let z0 = x_in.dot(&self.params[0]) + &self.params[1];
        let mut h = z0.mapv(silu);
        let mut hs = Vec::with_capacity(self.shape.blocks + 1);
        let mut pre = Vec::with_capacity(self.shape.blocks);
        for blk in 0..self.shape.blocks {
            let base = 2 + blk * 5;
            let a = h.dot(&self.params[base]) + emb.dot(&self.params[base + 1]) + &self.params[base + 2];
            let u = a.mapv(silu);
            let next = &h + &(u.dot(&self.params[base + 3]) + &self.params[base + 4]);
            hs.push(h);
            pre.push(a);
            h = next;
        }
        let n = self.params.len();
        let out = h.dot(&self.params[n - 2]) + &self.params[n - 1];
        hs.push(h);
        (out, Cache { x_in, emb, z0, hs, pre })
    }

    pub fn forward(&self, x: ArrayView2<'_, f32>, ks: &[usize]) -> Array2<f32> {
        self.forward_cached(x, ks).0
    }

    /// Mean-squared-error loss against `target` and its parameter gradients.
    pub fn loss_and_grad(&self, x: ArrayView2<'_, f32>, ks: &[usize], target: ArrayView2<'_, f32>) -> (f32, Vec<Array2<f32>>) {
        let (out, cache) = self.forward_cached(x, ks);
        let diff = &out - &target;
        let count = diff.len() as f32;
        let loss = diff.iter().map(|v| v * v).sum::<f32>() / count;
        let d_out = diff.mapv(|v| 2.0 * v / count);
        let grads = self.backward(&cache, d_out);
        (loss, grads)
    }

    fn backward(&self, cache: &Cache, d_out: Array2<f32>) -> Vec<Array2<f32>> {
        let n = self.params.len();
        let mut grads: Vec<Array2<f32>> = self.params.iter().map(|p| Array2::zeros(p.dim())).collect();
        let h_last = &cache.hs[self.shape.blocks];
        grads[n - 2] = h_last.t().dot(&d_out);
        grads[n - 1] = d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dh = d_out.dot(&self.params[n - 2].t());
        for blk in (0..self.shape.blocks).rev() {
            let base = 2 + blk * 5;
            let h_in = &cache.hs[blk];
            let a = &cache.pre[blk];
            let u = a.mapv(silu);
            grads[base + 3] = u.t().dot(&dh);
            grads[base + 4] = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            let du = dh.dot(&self.params[base + 3].t());
            let mut da = du;
            da.zip_mut_with(a, |g, &z| *g *= silu_grad(z));
            grads[base] = h_in.t().dot(&da);
            grads[base + 1] = cache.emb.t().dot(&da);
            grads[base + 2] = da.sum_axis(Axis(0)).insert_axis(Axis(0));
            dh = dh + da.dot(&self.params[base].t());
        }
        let mut dz0 = dh;
        dz0.zip_mut_with(&cache.z0, |g, &z| *g *= silu_grad(z));
        grads[0] = cache.x_in.t().dot(&dz0);
        grads[1] = dz0.sum_axis(Axis(0)).insert_axis(Axis(0));
        grads
    }
}

impl Denoiser for ResidualMlp {
    fn input_dim(&self) -> usize {
        self.shape.input_dim
    }

    fn predict(&self, x: ArrayView2<'_, f32>, k: usize) -> Array2<f32> {
        let ks = vec![k; x.nrows()];
        self.forward(x, &ks)
    }
}

/// Adam with global gradient-norm clipping.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    clip: f32,
    step: i32,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
}

impl Adam {
    pub fn new(net: &ResidualMlp, lr: f32) -> Self {
        let zeros: Vec<Array2<f32>> = net.params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn apply(&mut self, net: &mut ResidualMlp, grads: &[Array2<f32>]) {
        let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f32>().sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for ((p, g), (m, v)) in net
            .params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}
