//! The ε-prediction network.
//!
//! A shared input embedding and shared side information feed two
//! domain-specific stacks of residual layers. Each layer injects the diffusion
//! step, runs temporal attention (sequences along L) then feature attention
//! (sequences along K), adds projected side information and the conditional
//! mask, and splits a gated activation into residual and skip paths.
//!
//! Hidden tensors are row-major `[B, K, L, C]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::diffusion::{DiffusionError, NoiseInput, NoisePredictor};
use crate::nn::ops::{acc_at_b, matmul, matmul_bt, sigmoid, swap_middle, tanh};
use crate::nn::{BlockCache, EncoderBlock, Grads, Init, Linear, ParamId, ParamScope, ParamStore};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSpec {
    /// K; filled from the data when left at 0 in a config file.
    pub n_features: usize,
    pub channels: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward sublayer inside each attention block.
    pub ff_dim: usize,
    pub time_emb_dim: usize,
    pub feat_emb_dim: usize,
    pub diffusion_emb_dim: usize,
    /// Add the projected step embedding in every layer rather than only the first.
    pub per_layer_step_embedding: bool,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            n_features: 0,
            channels: 64,
            n_layers: 4,
            n_heads: 8,
            ff_dim: 64,
            time_emb_dim: 128,
            feat_emb_dim: 16,
            diffusion_emb_dim: 128,
            per_layer_step_embedding: true,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: String| Err(DiffusionError::Shape(m));
        for (name, v) in [
            ("n_features", self.n_features),
            ("channels", self.channels),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("time_emb_dim", self.time_emb_dim),
            ("feat_emb_dim", self.feat_emb_dim),
            ("diffusion_emb_dim", self.diffusion_emb_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.channels % self.n_heads != 0 {
            return bad(format!("channels {} not divisible by {} heads", self.channels, self.n_heads));
        }
        if self.time_emb_dim % 2 != 0 || self.diffusion_emb_dim % 2 != 0 {
            return bad("sinusoidal embedding widths must be even".into());
        }
        Ok(())
    }

    pub fn side_dim(&self) -> usize {
        self.time_emb_dim + self.feat_emb_dim
    }
}

/// Interleaved sine/cosine encoding: `[sin(p·ω₀), cos(p·ω₀), sin(p·ω₁), ...]`
/// with `ω_i = 10000^(−2i/dim)`.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        out[2 * i] = (pos * w).sin();
        out[2 * i + 1] = (pos * w).cos();
    }
    out
}

/// Time encoding for positions `0..len`, `[len, dim]`.
pub fn time_embedding(len: usize, dim: usize) -> Vec<f64> {
    (0..len).flat_map(|l| sinusoid(l as f64, dim)).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct ResidualLayer {
    step_proj: Option<Linear>,
    temporal: EncoderBlock,
    feature: EncoderBlock,
    side_proj: Linear,
    mask_proj: Linear,
    mid: Linear,
    out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    layers: Vec<ResidualLayer>,
    head_hidden: Linear,
    head_out: Linear,
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    temporal: BlockCache,
    feature: BlockCache,
    h_out: Vec<f64>,
    m: Vec<f64>,
    gated: Vec<f64>,
}

/// Activations kept by a training forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    domain: Option<Domain>,
    batch: usize,
    input: Vec<f64>,
    cond: Vec<f64>,
    step_emb: Vec<f64>,
    time_emb: Vec<f64>,
    layers: Vec<LayerCache>,
    skip: Vec<f64>,
    hidden: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub shared: usize,
    pub per_branch: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub spec: DenoiserSpec,
    pub store: ParamStore,
    input: Linear,
    feature_emb: ParamId,
    branches: [Branch; 2],
    trained: bool,
}

fn branch_prefix(d: Domain) -> &'static str {
    match d {
        Domain::Source => "source",
        Domain::Target => "target",
    }
}

impl Denoiser {
    pub fn new(spec: DenoiserSpec, seed: u64) -> Result<Self, DiffusionError> {
        spec.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, &[]);
        let mut store = ParamStore::new();
        let c = spec.channels;
        let input = Linear::new(&mut store, "shared.input", 2, c, ParamScope::Shared, Init::Glorot, &mut rng);
        let emb: Vec<f64> = (0..spec.n_features * spec.feat_emb_dim).map(|_| rng.sample(StandardNormal)).collect();
        let feature_emb = store.add("shared.feature_embedding", &[spec.n_features, spec.feat_emb_dim], ParamScope::Shared, emb);
        let mut make_branch = |d: Domain, store: &mut ParamStore| {
            let scope = ParamScope::Branch(d);
            let p = branch_prefix(d);
            let layers = (0..spec.n_layers)
                .map(|i| {
                    let n = format!("{p}.layer{i}");
                    let step_proj = (spec.per_layer_step_embedding || i == 0).then(|| {
                        Linear::new(store, &format!("{n}.step_proj"), spec.diffusion_emb_dim, c, scope, Init::Glorot, &mut rng)
                    });
                    ResidualLayer {
                        step_proj,
                        temporal: EncoderBlock::new(store, &format!("{n}.temporal"), c, spec.n_heads, spec.ff_dim, scope, &mut rng),
                        feature: EncoderBlock::new(store, &format!("{n}.feature"), c, spec.n_heads, spec.ff_dim, scope, &mut rng),
                        side_proj: Linear::new(store, &format!("{n}.side_proj"), spec.side_dim(), c, scope, Init::Glorot, &mut rng),
                        mask_proj: Linear::new(store, &format!("{n}.mask_proj"), 1, c, scope, Init::Glorot, &mut rng),
                        mid: Linear::new(store, &format!("{n}.mid"), c, 2 * c, scope, Init::Glorot, &mut rng),
                        out: Linear::new(store, &format!("{n}.out"), c, 2 * c, scope, Init::Glorot, &mut rng),
                    }
                })
                .collect();
            Branch {
                layers,
                head_hidden: Linear::new(store, &format!("{p}.head.hidden"), c, c, scope, Init::Glorot, &mut rng),
                head_out: Linear::new(store, &format!("{p}.head.out"), c, 1, scope, Init::Zeros, &mut rng),
            }
        };
        let src = make_branch(Domain::Source, &mut store);
        let tgt = make_branch(Domain::Target, &mut store);
        Ok(Self { spec, store, input, feature_emb, branches: [src, tgt], trained: false })
    }

    pub fn mark_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn trained(&self) -> bool {
        self.trained
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let shared = self.store.count_where(|p| p.scope == ParamScope::Shared);
        let src = self.store.count_where(|p| p.scope == ParamScope::Branch(Domain::Source));
        let tgt = self.store.count_where(|p| p.scope == ParamScope::Branch(Domain::Target));
        debug_assert_eq!(src, tgt);
        ParamCounts { shared, per_branch: src, total: self.store.count_where(|_| true) }
    }

    /// Two-channel input `[X^co, X̃^t]` per position, with the noisy channel
    /// zeroed at conditional positions.
    fn input_channels(x_cond: &[f64], x_t: &[f64], cond: &[bool]) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * x_t.len());
        for i in 0..x_t.len() {
            if cond[i] {
                v.push(x_cond[i]);
                v.push(0.0);
            } else {
                v.push(0.0);
                v.push(x_t[i]);
            }
        }
        v
    }

    /// Shared 1×1 projection of the two input channels, `[B·K·L, C]`.
    pub fn shared_input_embed(&self, x_cond: &[f64], x_t: &[f64], cond_mask: &[bool]) -> Result<Vec<f64>, DiffusionError> {
        if x_cond.len() != x_t.len() || cond_mask.len() != x_t.len() {
            return Err(DiffusionError::Shape("input embedding operands differ in size".into()));
        }
        let inp = Self::input_channels(x_cond, x_t, cond_mask);
        Ok(self.input.forward(&self.store, &inp, x_t.len()))
    }

    /// Shared side information `[K, L, time_emb_dim + feat_emb_dim]`.
    pub fn side_info_shared(&self, len: usize) -> Vec<f64> {
        let (k, td, fd) = (self.spec.n_features, self.spec.time_emb_dim, self.spec.feat_emb_dim);
        let te = time_embedding(len, td);
        let fe = self.store.get(self.feature_emb);
        let mut out = Vec::with_capacity(k * len * (td + fd));
        for ki in 0..k {
            for l in 0..len {
                out.extend_from_slice(&te[l * td..(l + 1) * td]);
                out.extend_from_slice(&fe[ki * fd..(ki + 1) * fd]);
            }
        }
        out
    }

    fn check_input(&self, input: &NoiseInput) -> Result<(), DiffusionError> {
        input.validate()?;
        if input.n_features != self.spec.n_features {
            return Err(DiffusionError::Shape(format!(
                "model built for {} features, got {}",
                self.spec.n_features, input.n_features
            )));
        }
        Ok(())
    }

    /// ε̂ for a batch, `[B·K·L]`. Pass a cache to enable [`Denoiser::backward`].
    pub fn forward(&self, domain: Domain, input: &NoiseInput, cache: Option<&mut ForwardCache>) -> Result<Vec<f64>, DiffusionError> {
        self.check_input(input)?;
        let inp = Self::input_channels(input.x_cond, input.x_t, input.cond_mask);
        let rows = input.x_t.len();
        let h_in = self.input.forward(&self.store, &inp, rows);
        let cond: Vec<f64> = input.cond_mask.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        let out = self.branch_forward(domain, &h_in, input.steps, &cond, input.batch, input.len, cache.map(|c| {
            c.input = inp;
            c
        }));
        Ok(out)
    }

    /// Runs one domain branch on an embedded input.
    pub fn branch_forward(
        &self,
        domain: Domain,
        h_in: &[f64],
        steps: &[usize],
        cond: &[f64],
        batch: usize,
        len: usize,
        mut cache: Option<&mut ForwardCache>,
    ) -> Vec<f64> {
        let spec = &self.spec;
        let (k, c) = (spec.n_features, spec.channels);
        let rows = batch * k * len;
        let per_item = k * len;
        let br = &self.branches[domain.index()];
        let step_emb: Vec<f64> = steps.iter().flat_map(|&t| sinusoid(t as f64, spec.diffusion_emb_dim)).collect();
        let time_emb = time_embedding(len, spec.time_emb_dim);
        let fe = self.store.get(self.feature_emb);
        let mut x = h_in.to_vec();
        let mut skip = vec![0.0; rows * c];
        let mut layer_caches = Vec::new();
        for layer in &br.layers {
            let mut y = x.clone();
            if let Some(sp) = &layer.step_proj {
                let te = sp.forward(&self.store, &step_emb, batch);
                for (r, row) in y.chunks_exact_mut(c).enumerate() {
                    let b = r / per_item;
                    row.iter_mut().zip(&te[b * c..(b + 1) * c]).for_each(|(v, t)| *v += t);
                }
            }
            let mut lc = cache.is_some().then(LayerCache::default);
            let y1 = layer.temporal.forward(&self.store, &y, len, lc.as_mut().map(|l| &mut l.temporal));
            let z = swap_middle(&y1, batch, k, len, c);
            let z = layer.feature.forward(&self.store, &z, k, lc.as_mut().map(|l| &mut l.feature));
            let mut h_out = swap_middle(&z, batch, len, k, c);
            self.add_side(layer, &time_emb, fe, len, &mut h_out);
            let mp = layer.mask_proj.forward(&self.store, cond, rows);
            h_out.iter_mut().zip(&mp).for_each(|(h, m)| *h += m);
            let m = layer.mid.forward(&self.store, &h_out, rows);
            let mut gated = vec![0.0; rows * c];
            for r in 0..rows {
                for j in 0..c {
                    gated[r * c + j] = tanh(m[r * 2 * c + j]) * sigmoid(m[r * 2 * c + c + j]);
                }
            }
            let o = layer.out.forward(&self.store, &gated, rows);
            for r in 0..rows {
                for j in 0..c {
                    x[r * c + j] = (x[r * c + j] + o[r * 2 * c + j]) * std::f64::consts::FRAC_1_SQRT_2;
                    skip[r * c + j] += o[r * 2 * c + c + j];
                }
            }
            if let Some(mut l) = lc {
                l.h_out = h_out;
                l.m = m;
                l.gated = gated;
                layer_caches.push(l);
            }
        }
        let norm = 1.0 / (br.layers.len() as f64).sqrt();
        skip.iter_mut().for_each(|s| *s *= norm);
        let hidden = br.head_hidden.forward(&self.store, &skip, rows);
        let act: Vec<f64> = hidden.iter().map(|&v| v.max(0.0)).collect();
        let eps = br.head_out.forward(&self.store, &act, rows);
        if let Some(cc) = cache.as_deref_mut() {
            cc.domain = Some(domain);
            cc.batch = batch;
            cc.cond = cond.to_vec();
            cc.step_emb = step_emb;
            cc.time_emb = time_emb;
            cc.layers = layer_caches;
            cc.skip = skip;
            cc.hidden = hidden;
            cc.act = act;
        }
        eps
    }

    /// Adds the 1×1 projection of `[s[l] | f[k]]` without materializing the
    /// `[K, L, side_dim]` tensor.
    fn add_side(&self, layer: &ResidualLayer, time_emb: &[f64], fe: &[f64], len: usize, h: &mut [f64]) {
        let (k, c, td, fd) = (self.spec.n_features, self.spec.channels, self.spec.time_emb_dim, self.spec.feat_emb_dim);
        let w = self.store.get(layer.side_proj.w);
        let bias = self.store.get(layer.side_proj.b);
        let s_proj = matmul(time_emb, &w[..td * c], len, td, c);
        let f_proj = matmul(fe, &w[td * c..], k, fd, c);
        for (r, row) in h.chunks_exact_mut(c).enumerate() {
            let l = r % len;
            let ki = (r / len) % k;
            for j in 0..c {
                row[j] += s_proj[l * c + j] + f_proj[ki * c + j] + bias[j];
            }
        }
    }

    /// Accumulates parameter gradients of `Σ d_eps ⊙ ε̂` for the cached pass.
    pub fn backward(&self, cache: &ForwardCache, d_eps: &[f64], grads: &mut Grads) {
        let spec = &self.spec;
        let domain = cache.domain.expect("backward needs a cached forward pass");
        let br = &self.branches[domain.index()];
        let (k, c, td, fd) = (spec.n_features, spec.channels, spec.time_emb_dim, spec.feat_emb_dim);
        let batch = cache.batch;
        let rows = d_eps.len();
        let len = rows / (batch * k);
        let per_item = k * len;
        let store = &self.store;

        let d_act = br.head_out.backward(store, grads, &cache.act, d_eps, rows, true).expect("dx requested");
        let d_hidden: Vec<f64> = d_act.iter().zip(&cache.hidden).map(|(g, &h)| if h > 0.0 { *g } else { 0.0 }).collect();
        let mut d_skip = br.head_hidden.backward(store, grads, &cache.skip, &d_hidden, rows, true).expect("dx requested");
        let norm = 1.0 / (br.layers.len() as f64).sqrt();
        d_skip.iter_mut().for_each(|g| *g *= norm);

        let mut dx = vec![0.0; rows * c];
        let fe = store.get(self.feature_emb);
        for (layer, lc) in br.layers.iter().zip(&cache.layers).rev() {
            let mut d_o = vec![0.0; rows * 2 * c];
            for r in 0..rows {
                for j in 0..c {
                    d_o[r * 2 * c + j] = dx[r * c + j] * std::f64::consts::FRAC_1_SQRT_2;
                    d_o[r * 2 * c + c + j] = d_skip[r * c + j];
                }
            }
            let d_gated = layer.out.backward(store, grads, &lc.gated, &d_o, rows, true).expect("dx requested");
            let mut d_m = vec![0.0; rows * 2 * c];
            for r in 0..rows {
                for j in 0..c {
                    let th = tanh(lc.m[r * 2 * c + j]);
                    let sg = sigmoid(lc.m[r * 2 * c + c + j]);
                    let g = d_gated[r * c + j];
                    d_m[r * 2 * c + j] = g * (1.0 - th * th) * sg;
                    d_m[r * 2 * c + c + j] = g * th * sg * (1.0 - sg);
                }
            }
            let d_h = layer.mid.backward(store, grads, &lc.h_out, &d_m, rows, true).expect("dx requested");
            layer.mask_proj.backward(store, grads, &cache.cond, &d_h, rows, false);
            // side projection: per-timestamp and per-feature sums of d_h
            let mut g_l = vec![0.0; len * c];
            let mut g_k = vec![0.0; k * c];
            for (r, row) in d_h.chunks_exact(c).enumerate() {
                let l = r % len;
                let ki = (r / len) % k;
                for j in 0..c {
                    g_l[l * c + j] += row[j];
                    g_k[ki * c + j] += row[j];
                }
            }
            {
                let dw = grads.acc(store, layer.side_proj.w);
                acc_at_b(&cache.time_emb, &g_l, len, td, c, &mut dw[..td * c]);
                acc_at_b(fe, &g_k, k, fd, c, &mut dw[td * c..]);
            }
            {
                let db = grads.acc(store, layer.side_proj.b);
                for row in g_k.chunks_exact(c) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
            let w = store.get(layer.side_proj.w);
            let d_fe = matmul_bt(&g_k, &w[td * c..], k, c, fd);
            grads.acc(store, self.feature_emb).iter_mut().zip(&d_fe).for_each(|(d, g)| *d += g);

            let dz = swap_middle(&d_h, batch, k, len, c);
            let dz = layer.feature.backward(store, grads, &lc.feature, &dz, k);
            let dy1 = swap_middle(&dz, batch, len, k, c);
            let dy = layer.temporal.backward(store, grads, &lc.temporal, &dy1, len);
            if let Some(sp) = &layer.step_proj {
                let mut d_te = vec![0.0; batch * c];
                for (r, row) in dy.chunks_exact(c).enumerate() {
                    let b = r / per_item;
                    d_te[b * c..(b + 1) * c].iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                sp.backward(store, grads, &cache.step_emb, &d_te, batch, false);
            }
            for (d, g) in dx.iter_mut().zip(&dy) {
                *d = *d * std::f64::consts::FRAC_1_SQRT_2 + g;
            }
        }
        self.input.backward(store, grads, &cache.input, &dx, rows, false);
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, domain: Domain, input: &NoiseInput) -> Result<Vec<f64>, DiffusionError> {
        self.forward(domain, input, None)
    }

    fn is_trained(&self) -> bool {
        self.trained
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{denoising_loss, denoising_loss_grad};
    use crate::nn::{Adam, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(layers: usize) -> DenoiserSpec {
        DenoiserSpec { n_features: 2, channels: 4, n_layers: layers, n_heads: 1, ff_dim: 4, ..DenoiserSpec::default() }
    }

    struct Batch {
        x_cond: Vec<f64>,
        cond: Vec<bool>,
        x_t: Vec<f64>,
        steps: Vec<usize>,
        eps: Vec<f64>,
        batch: usize,
        k: usize,
        l: usize,
    }

    impl Batch {
        fn random(batch: usize, k: usize, l: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = batch * k * l;
            let cond: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
            let x_cond = (0..n).map(|i| if cond[i] { rng.sample(StandardNormal) } else { 0.0 }).collect();
            let x_t = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let eps = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let steps = (0..batch).map(|b| 3 + 7 * b).collect();
            Self { x_cond, cond, x_t, steps, eps, batch, k, l }
        }

        fn input(&self) -> NoiseInput<'_> {
            NoiseInput {
                batch: self.batch,
                n_features: self.k,
                len: self.l,
                x_cond: &self.x_cond,
                cond_mask: &self.cond,
                x_t: &self.x_t,
                steps: &self.steps,
            }
        }

        fn target(&self) -> Vec<bool> {
            self.cond.iter().map(|c| !c).collect()
        }
    }

    /// Moves every parameter off its initializer so no gradient is trivially zero.
    fn perturb(model: &mut Denoiser, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in model.store.ids().collect::<Vec<_>>() {
            for v in model.store.get_mut(id) {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    fn loss(model: &Denoiser, d: Domain, b: &Batch) -> f64 {
        let eps_hat = model.forward(d, &b.input(), None).unwrap();
        denoising_loss(&b.eps, &eps_hat, &b.target()).unwrap().value
    }

    fn grad_check(model: &mut Denoiser, domain: Domain, b: &Batch, h: f64) -> f64 {
        let mut cache = ForwardCache::default();
        let eps_hat = model.forward(domain, &b.input(), Some(&mut cache)).unwrap();
        let d = denoising_loss_grad(&b.eps, &eps_hat, &b.target());
        let mut grads = Grads::new(&model.store);
        model.backward(&cache, &d, &mut grads);
        let mut worst: f64 = 0.0;
        for id in model.store.ids().collect::<Vec<_>>() {
            let scope = model.store.param(id).scope;
            let touched = grads.touched(id);
            assert_eq!(touched, scope != ParamScope::Branch(domain.other()), "{}", model.store.param(id).name);
            let g = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; model.store.get(id).len()]);
            for j in 0..g.len() {
                let orig = model.store.get(id)[j];
                model.store.get_mut(id)[j] = orig + h;
                let lp = loss(model, domain, b);
                model.store.get_mut(id)[j] = orig - h;
                let lm = loss(model, domain, b);
                model.store.get_mut(id)[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{}[{j}]: analytic {} vs numeric {fd}", model.store.param(id).name, g[j]);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_model() {
        let mut model = Denoiser::new(tiny_spec(1), 1).unwrap();
        perturb(&mut model, 2);
        let b = Batch::random(2, 2, 3, 3);
        grad_check(&mut model, Domain::Target, &b, 1e-5);
        grad_check(&mut model, Domain::Source, &b, 1e-5);
    }

    #[test]
    fn gradients_match_with_two_layers_and_single_injection() {
        let spec = DenoiserSpec { n_heads: 2, per_layer_step_embedding: false, ..tiny_spec(2) };
        let mut model = Denoiser::new(spec, 4).unwrap();
        perturb(&mut model, 5);
        let b = Batch::random(1, 2, 3, 6);
        grad_check(&mut model, Domain::Target, &b, 1e-5);
    }

    #[test]
    fn initial_output_is_zero_and_forward_is_pure() {
        let model = Denoiser::new(tiny_spec(2), 0).unwrap();
        let b = Batch::random(2, 2, 3, 1);
        let a = model.forward(Domain::Source, &b.input(), None).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
        let mut m2 = model.clone();
        perturb(&mut m2, 9);
        let x = m2.forward(Domain::Target, &b.input(), None).unwrap();
        let y = m2.forward(Domain::Target, &b.input(), None).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.len(), 2 * 2 * 3);
    }

    #[test]
    fn shared_embedding_is_domain_independent_and_affine() {
        let model = Denoiser::new(tiny_spec(1), 0).unwrap();
        let b = Batch::random(1, 2, 3, 2);
        let h = model.shared_input_embed(&b.x_cond, &b.x_t, &b.cond).unwrap();
        assert_eq!(h.len(), 2 * 3 * 4);
        let z = model.shared_input_embed(&[0.0; 6], &[0.0; 6], &[true; 6]).unwrap();
        let bias = model.store.get(model.input.b);
        for row in z.chunks_exact(4) {
            assert_eq!(row, bias);
        }
        assert!(model.shared_input_embed(&[0.0; 5], &[0.0; 6], &[true; 6]).is_err());
    }

    #[test]
    fn side_information_properties() {
        let model = Denoiser::new(DenoiserSpec { n_features: 3, ..tiny_spec(1) }, 0).unwrap();
        let side = model.side_info_shared(5);
        let d = model.spec.side_dim();
        assert_eq!(side.len(), 3 * 5 * d);
        for ki in 0..3 {
            for l in 0..5 {
                let s = &side[(ki * 5 + l) * d..(ki * 5 + l) * d + 128];
                for i in 0..64 {
                    assert!((s[2 * i].powi(2) + s[2 * i + 1].powi(2) - 1.0).abs() < 1e-12);
                }
                // time block does not depend on the feature
                assert_eq!(s, &side[l * d..l * d + 128]);
            }
        }
        // permuting embedding rows permutes the feature block
        let mut permuted = model.clone();
        let fe = model.store.get(model.feature_emb).to_vec();
        let perm = [2usize, 0, 1];
        let new: Vec<f64> = perm.iter().flat_map(|&p| fe[p * 16..(p + 1) * 16].to_vec()).collect();
        permuted.store.get_mut(permuted.feature_emb).copy_from_slice(&new);
        let side2 = permuted.side_info_shared(5);
        for (ki, &p) in perm.iter().enumerate() {
            assert_eq!(&side2[(ki * 5) * d + 128..(ki * 5) * d + d], &side[(p * 5) * d + 128..(p * 5) * d + d]);
        }
    }

    #[test]
    fn parameter_accounting() {
        let one = Denoiser::new(tiny_spec(1), 0).unwrap();
        let two = Denoiser::new(tiny_spec(2), 0).unwrap();
        let (a, b) = (one.count_parameters(), two.count_parameters());
        assert_eq!(a.total, a.shared + 2 * a.per_branch);
        assert_eq!(b.total, b.shared + 2 * b.per_branch);
        assert_eq!(a.shared, b.shared);
        let layer_params =
            |m: &Denoiser| m.store.count_where(|p| p.name.starts_with("target.layer"));
        assert_eq!(2 * layer_params(&one), layer_params(&two));
        // shared input (2C + C) and the K×16 feature embedding
        assert_eq!(a.shared, 3 * 4 + 2 * 16);
        let single = Denoiser::new(DenoiserSpec { per_layer_step_embedding: false, ..tiny_spec(2) }, 0).unwrap();
        assert_eq!(single.count_parameters().shared, a.shared);
    }

    #[test]
    fn branch_isolation_under_one_adam_step() {
        for domain in [Domain::Target, Domain::Source] {
            let mut model = Denoiser::new(tiny_spec(2), 3).unwrap();
            let before = model.store.clone();
            let b = Batch::random(2, 2, 3, 4);
            let mut cache = ForwardCache::default();
            let eps_hat = model.forward(domain, &b.input(), Some(&mut cache)).unwrap();
            let d = denoising_loss_grad(&b.eps, &eps_hat, &b.target());
            let mut grads = Grads::new(&model.store);
            model.backward(&cache, &d, &mut grads);
            let mut adam = Adam::new(&model.store, AdamConfig::default());
            adam.step(&mut model.store, &grads, 1e-3);
            for (id, p) in model.store.iter() {
                let old = before.get(id);
                match p.scope {
                    ParamScope::Branch(d) if d == domain.other() => assert_eq!(p.value.as_slice(), old, "{}", p.name),
                    _ => {}
                }
            }
            let head = model.store.find(&format!("{}.head.out.weight", branch_prefix(domain))).unwrap();
            assert_ne!(model.store.get(head), before.get(head));
        }
    }

    #[test]
    fn shared_parameters_move_after_warm_step() {
        let mut model = Denoiser::new(tiny_spec(1), 3).unwrap();
        perturb(&mut model, 8);
        let before = model.store.clone();
        let b = Batch::random(2, 2, 3, 4);
        let mut cache = ForwardCache::default();
        let eps_hat = model.forward(Domain::Target, &b.input(), Some(&mut cache)).unwrap();
        let d = denoising_loss_grad(&b.eps, &eps_hat, &b.target());
        let mut grads = Grads::new(&model.store);
        model.backward(&cache, &d, &mut grads);
        Adam::new(&model.store, AdamConfig::default()).step(&mut model.store, &grads, 1e-3);
        for (id, p) in model.store.iter() {
            let changed = p.value.as_slice() != before.get(id);
            match p.scope {
                ParamScope::Branch(Domain::Source) => assert!(!changed, "{}", p.name),
                ParamScope::Shared => assert!(changed, "{}", p.name),
                _ => {}
            }
        }
    }

    #[test]
    fn no_leakage_across_windows() {
        let mut model = Denoiser::new(tiny_spec(1), 0).unwrap();
        perturb(&mut model, 1);
        let b = Batch::random(2, 2, 3, 7);
        let base = model.forward(Domain::Target, &b.input(), None).unwrap();
        let mut b2 = Batch::random(2, 2, 3, 7);
        b2.cond[6] = !b2.cond[6];
        b2.x_cond[6] = 0.4;
        let moved = model.forward(Domain::Target, &b2.input(), None).unwrap();
        assert_eq!(&base[..6], &moved[..6]);
        assert_ne!(&base[6..], &moved[6..]);
    }

    #[test]
    fn outputs_stay_finite_on_random_inputs() {
        let mut model = Denoiser::new(DenoiserSpec { n_features: 3, channels: 8, n_layers: 2, n_heads: 2, ff_dim: 8, ..DenoiserSpec::default() }, 0).unwrap();
        perturb(&mut model, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..1000u64 {
            let n = 3 * 4;
            let cond: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let x_cond: Vec<f64> = (0..n).map(|i| if cond[i] { rng.sample(StandardNormal) } else { 0.0 }).collect();
            let x_t: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let steps = [1 + (trial as usize % 50)];
            let input = NoiseInput { batch: 1, n_features: 3, len: 4, x_cond: &x_cond, cond_mask: &cond, x_t: &x_t, steps: &steps };
            let out = model.forward(Domain::Source, &input, None).unwrap();
            assert!(out.iter().all(|v| v.is_finite() && v.abs() < 1e6));
        }
    }

    #[test]
    fn rejects_mismatched_feature_count() {
        let model = Denoiser::new(tiny_spec(1), 0).unwrap();
        let b = Batch::random(1, 3, 3, 0);
        assert!(model.forward(Domain::Target, &b.input(), None).is_err());
        assert!(Denoiser::new(DenoiserSpec { channels: 6, n_heads: 4, ..tiny_spec(1) }, 0).is_err());
    }
}
