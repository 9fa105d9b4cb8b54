//! Multi-head self-attention and the pre-norm encoder block built on it.
//!
//! Inputs are row-major `[n_seq · seq_len, C]` buffers whose rows are grouped
//! by sequence; attention never crosses a sequence boundary.

use rand::Rng;

use super::layers::{Init, LayerNorm, LayerNormCache, Linear};
use super::ops::{gelu, gelu_grad, gemm, View};
use super::param::{Grads, ParamScope, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub heads: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BlockCache {
    ln_attn: LayerNormCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    ln_ff: LayerNormCache,
    b: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        ff_dim: usize,
        scope: ParamScope,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && channels % heads == 0, "channels must divide into heads");
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), channels, scope),
            qkv: Linear::new(store, &format!("{name}.qkv"), channels, 3 * channels, scope, Init::Glorot, rng),
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels, scope, Init::Glorot, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), channels, scope),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), channels, ff_dim, scope, Init::Glorot, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_dim, channels, scope, Init::Glorot, rng),
            heads,
            channels,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &[f64],
        seq_len: usize,
        mut cache: Option<&mut BlockCache>,
    ) -> Vec<f64> {
        let c = self.channels;
        let rows = x.len() / c;
        let a = self.ln_attn.forward(store, x, cache.as_deref_mut().map(|k| &mut k.ln_attn));
        let qkv = self.qkv.forward(store, &a, rows);
        let keep = cache.is_some();
        let (att, probs) = self.attend(&qkv, rows / seq_len, seq_len, keep);
        let o = self.proj.forward(store, &att, rows);
        let x1: Vec<f64> = x.iter().zip(&o).map(|(p, q)| p + q).collect();
        let b = self.ln_ff.forward(store, &x1, cache.as_deref_mut().map(|k| &mut k.ln_ff));
        let h = self.ff_in.forward(store, &b, rows);
        let g: Vec<f64> = h.iter().map(|&v| gelu(v)).collect();
        let f = self.ff_out.forward(store, &g, rows);
        let y = x1.iter().zip(&f).map(|(p, q)| p + q).collect();
        if let Some(k) = cache {
            k.a = a;
            k.qkv = qkv;
            k.probs = probs;
            k.att = att;
            k.b = b;
            k.h = h;
            k.g = g;
        }
        y
    }

    fn attend(&self, qkv: &[f64], n_seq: usize, s: usize, keep_probs: bool) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut att = vec![0.0; n_seq * s * c];
        let mut probs = if keep_probs { vec![0.0; n_seq * self.heads * s * s] } else { Vec::new() };
        let mut scratch = vec![0.0; s * s];
        for seq in 0..n_seq {
            let r0 = seq * s;
            for h in 0..self.heads {
                let (oq, ok, ov) = (r0 * 3 * c + h * d, r0 * 3 * c + c + h * d, r0 * 3 * c + 2 * c + h * d);
                let p = if keep_probs {
                    let at = (seq * self.heads + h) * s * s;
                    &mut probs[at..at + s * s]
                } else {
                    &mut scratch[..]
                };
                gemm(
                    s,
                    d,
                    s,
                    scale,
                    View::strided(&qkv[oq..], 3 * c, 1),
                    View::strided(&qkv[ok..], 1, 3 * c),
                    0.0,
                    p,
                    s,
                    1,
                );
                for row in p.chunks_exact_mut(s) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= sum);
                }
                gemm(s, s, d, 1.0, View::rm(p, s), View::strided(&qkv[ov..], 3 * c, 1), 0.0, &mut att[r0 * c + h * d..], c, 1);
            }
        }
        (att, probs)
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &BlockCache, dy: &[f64], seq_len: usize) -> Vec<f64> {
        let c = self.channels;
        let rows = dy.len() / c;
        // feed-forward branch
        let dg = self.ff_out.backward(store, grads, &cache.g, dy, rows, true).expect("dx requested");
        let dh: Vec<f64> = dg.iter().zip(&cache.h).map(|(g, &h)| g * gelu_grad(h)).collect();
        let db = self.ff_in.backward(store, grads, &cache.b, &dh, rows, true).expect("dx requested");
        let dln = self.ln_ff.backward(store, grads, &cache.ln_ff, &db);
        let dx1: Vec<f64> = dy.iter().zip(&dln).map(|(a, b)| a + b).collect();
        // attention branch
        let datt = self.proj.backward(store, grads, &cache.att, &dx1, rows, true).expect("dx requested");
        let dqkv = self.attend_backward(&cache.qkv, &cache.probs, &datt, rows / seq_len, seq_len);
        let da = self.qkv.backward(store, grads, &cache.a, &dqkv, rows, true).expect("dx requested");
        let dln = self.ln_attn.backward(store, grads, &cache.ln_attn, &da);
        dx1.iter().zip(&dln).map(|(a, b)| a + b).collect()
    }

    fn attend_backward(&self, qkv: &[f64], probs: &[f64], datt: &[f64], n_seq: usize, s: usize) -> Vec<f64> {
        let c = self.channels;
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dqkv = vec![0.0; qkv.len()];
        let mut dp = vec![0.0; s * s];
        for seq in 0..n_seq {
            let r0 = seq * s;
            for h in 0..self.heads {
                let (oq, ok, ov) = (r0 * 3 * c + h * d, r0 * 3 * c + c + h * d, r0 * 3 * c + 2 * c + h * d);
                let od = r0 * c + h * d;
                let at = (seq * self.heads + h) * s * s;
                let p = &probs[at..at + s * s];
                // dP = dO·Vᵀ
                gemm(s, d, s, 1.0, View::strided(&datt[od..], c, 1), View::strided(&qkv[ov..], 1, 3 * c), 0.0, &mut dp, s, 1);
                // dV = Pᵀ·dO
                gemm(s, s, d, 1.0, View::rm_t(p, s), View::strided(&datt[od..], c, 1), 0.0, &mut dqkv[ov..], 3 * c, 1);
                // softmax backward, scale folded in
                for (dr, pr) in dp.chunks_exact_mut(s).zip(p.chunks_exact(s)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                gemm(s, s, d, 1.0, View::rm(&dp, s), View::strided(&qkv[ok..], 3 * c, 1), 0.0, &mut dqkv[oq..], 3 * c, 1);
                gemm(s, s, d, 1.0, View::rm_t(&dp, s), View::strided(&qkv[oq..], 3 * c, 1), 0.0, &mut dqkv[ok..], 3 * c, 1);
            }
        }
        dqkv
    }
}
