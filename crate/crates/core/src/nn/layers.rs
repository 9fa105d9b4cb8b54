use rand::Rng;

use super::ops::{acc_at_b, acc_col_sums, matmul, matmul_bt};
use super::param::{Grads, ParamId, ParamScope, ParamStore};

/// Weight initialization for a dense layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot-uniform weights, bias uniform in ±1/√fan_in.
    Glorot,
    Zeros,
}

/// Position-wise affine map (a 1×1 convolution over the channel axis).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        scope: ParamScope,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let (w, b) = match init {
            Init::Glorot => {
                let bound = (6.0 / (d_in + d_out) as f64).sqrt();
                let bb = 1.0 / (d_in as f64).sqrt();
                (
                    (0..d_in * d_out).map(|_| rng.random_range(-bound..bound)).collect(),
                    (0..d_out).map(|_| rng.random_range(-bb..bb)).collect(),
                )
            }
            Init::Zeros => (vec![0.0; d_in * d_out], vec![0.0; d_out]),
        };
        let w = store.add(format!("{name}.weight"), &[d_in, d_out], scope, w);
        let b = store.add(format!("{name}.bias"), &[d_out], scope, b);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.d_in);
        let mut y = matmul(x, store.get(self.w), rows, self.d_in, self.d_out);
        let b = store.get(self.b);
        for row in y.chunks_exact_mut(self.d_out) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx` when asked.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &[f64],
        dy: &[f64],
        rows: usize,
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        acc_at_b(x, dy, rows, self.d_in, self.d_out, grads.acc(store, self.w));
        acc_col_sums(dy, self.d_out, grads.acc(store, self.b));
        want_dx.then(|| matmul_bt(dy, store.get(self.w), rows, self.d_out, self.d_in))
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, scope: ParamScope) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[dim], scope, vec![1.0; dim]);
        let beta = store.add(format!("{name}.beta"), &[dim], scope, vec![0.0; dim]);
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], cache: Option<&mut LayerNormCache>) -> Vec<f64> {
        let (g, b) = (store.get(self.gamma), store.get(self.beta));
        let d = self.dim;
        let rows = x.len() / d;
        let mut y = vec![0.0; x.len()];
        let mut xhat_all = Vec::new();
        let mut rstd_all = Vec::new();
        let keep = cache.is_some();
        if keep {
            xhat_all.resize(x.len(), 0.0);
            rstd_all.resize(rows, 0.0);
        }
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..d {
                let xh = (row[i] - mean) * rstd;
                y[r * d + i] = xh * g[i] + b[i];
                if keep {
                    xhat_all[r * d + i] = xh;
                }
            }
            if keep {
                rstd_all[r] = rstd;
            }
        }
        if let Some(c) = cache {
            c.xhat = xhat_all;
            c.rstd = rstd_all;
        }
        y
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &LayerNormCache, dy: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let rows = dy.len() / d;
        let g = store.get(self.gamma);
        {
            let dg = grads.acc(store, self.gamma);
            for (dyr, xr) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
                for i in 0..d {
                    dg[i] += dyr[i] * xr[i];
                }
            }
        }
        acc_col_sums(dy, d, grads.acc(store, self.beta));
        let mut dx = vec![0.0; dy.len()];
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xr = &cache.xhat[r * d..(r + 1) * d];
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for i in 0..d {
                dxhat[i] = dyr[i] * g[i];
                m1 += dxhat[i];
                m2 += dxhat[i] * xr[i];
            }
            m1 /= d as f64;
            m2 /= d as f64;
            let rstd = cache.rstd[r];
            for i in 0..d {
                dx[r * d + i] = rstd * (dxhat[i] - m1 - xr[i] * m2);
            }
        }
        dx
    }
}
