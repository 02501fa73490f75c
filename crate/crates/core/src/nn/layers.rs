//! Token-major layers (`rows = tokens`) with explicit backward passes.
//!
//! Every `forward` returns what its `backward` needs; `backward` accumulates
//! parameter gradients into [`Grads`] and returns the input gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::params::{init_tensor, Grads, Init, ParamId, ParamStore};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init_tensor(rng, input, output, init));
        let b = store.add(format!("{name}.bias"), Array2::zeros((1, output)));
        Self { w, b }
    }

    pub fn forward(&self, p: &ParamStore, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(p.get(self.w));
        y += &p.get(self.b).row(0);
        y
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: &ArrayView2<f64>, dy: &ArrayView2<f64>) -> Array2<f64> {
        self.accumulate(g, x, dy);
        dy.dot(&p.get(self.w).t())
    }

    /// Parameter gradients only, for layers whose input is a constant.
    pub fn accumulate(&self, g: &mut Grads, x: &ArrayView2<f64>, dy: &ArrayView2<f64>) {
        *g.get_mut(self.w) += &x.t().dot(dy);
        *g.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward(&self, p: &ParamStore, x: &ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *s = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * *s);
        }
        let mut y = &xhat * &p.get(self.gamma).row(0);
        y += &p.get(self.beta).row(0);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &LayerNormCache, dy: &ArrayView2<f64>) -> Array2<f64> {
        *g.get_mut(self.gamma) += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *g.get_mut(self.beta) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &p.get(self.gamma).row(0);
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, dh), xh), &s) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_dh = dh.sum() / d;
            let mean_dh_xh = dh.dot(&xh) / d;
            for ((o, &a), &b) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                *o = s * (a - mean_dh - b * mean_dh_xh);
            }
        }
        dx
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct MlpCache {
    /// Input of each linear layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation outputs of every layer but the last.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dims: &[usize], init: Init) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], init))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, p: &ParamStore, x: &ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(p, &h.view());
            inputs.push(h);
            if i + 1 < self.layers.len() {
                h = z.mapv(gelu);
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &MlpCache, dy: &ArrayView2<f64>) -> Array2<f64> {
        let mut d = dy.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                d.zip_mut_with(&cache.pre[i], |dv, &z| *dv *= gelu_grad(z));
            }
            d = layer.backward(p, g, &cache.inputs[i].view(), &d.view());
        }
        d
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    x: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    merged: Array2<f64>,
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize, init: Init) -> Self {
        assert!(dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, init),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, init),
            heads,
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &ArrayView2<f64>) -> (Array2<f64>, AttentionCache) {
        let dim = x.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(p, x);
        let mut merged = Array2::zeros((x.nrows(), dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
            let mut att = q.dot(&k.t()) * scale;
            softmax_rows(&mut att);
            merged.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&att.dot(&v));
            probs.push(att);
        }
        let y = self.proj.forward(p, &merged.view());
        (
            y,
            AttentionCache {
                x: x.to_owned(),
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &AttentionCache, dy: &ArrayView2<f64>) -> Array2<f64> {
        let dim = dy.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dmerged = self.proj.backward(p, g, &cache.merged.view(), dy);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for h in 0..self.heads {
            let (qs, ks, vs) = (
                s![.., h * dh..(h + 1) * dh],
                s![.., dim + h * dh..dim + (h + 1) * dh],
                s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh],
            );
            let q = cache.qkv.slice(qs);
            let k = cache.qkv.slice(ks);
            let v = cache.qkv.slice(vs);
            let prob = &cache.probs[h];
            let d_out = dmerged.slice(s![.., h * dh..(h + 1) * dh]);
            let dprob = d_out.dot(&v.t());
            dqkv.slice_mut(vs).assign(&prob.t().dot(&d_out));
            // softmax backward, row-wise
            let mut dscore = dprob;
            for (mut drow, prow) in dscore.rows_mut().into_iter().zip(prob.rows()) {
                let dot = drow.dot(&prow);
                for (dv, &pv) in drow.iter_mut().zip(prow.iter()) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            dqkv.slice_mut(qs).assign(&dscore.dot(&k));
            dqkv.slice_mut(ks).assign(&dscore.t().dot(&q));
        }
        self.qkv.backward(p, g, &cache.x.view(), &dqkv.view())
    }
}

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `h + ffn(ln(h))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ffn: MlpCache,
}

impl Block {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize, init: Init) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads, init),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), &[dim, 4 * dim, dim], init),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &ArrayView2<f64>) -> (Array2<f64>, BlockCache) {
        let (n1, ln1) = self.ln1.forward(p, x);
        let (a, attn) = self.attn.forward(p, &n1.view());
        let h = x + &a;
        let (n2, ln2) = self.ln2.forward(p, &h.view());
        let (f, ffn) = self.ffn.forward(p, &n2.view());
        (h + f, BlockCache { ln1, attn, ln2, ffn })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &BlockCache, dy: &ArrayView2<f64>) -> Array2<f64> {
        let dn2 = self.ffn.backward(p, g, &cache.ffn, dy);
        let dh = dy + &self.ln2.backward(p, g, &cache.ln2, &dn2.view());
        let dn1 = self.attn.backward(p, g, &cache.attn, &dh.view());
        &dh + &self.ln1.backward(p, g, &cache.ln1, &dn1.view())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `backward` against a scalar probe
    /// `sum(y * weights)`, over every parameter and every input entry.
    fn check<F, B>(store: &mut ParamStore, x: &Array2<f64>, fwd: F, bwd: B)
    where
        F: Fn(&ParamStore, &Array2<f64>) -> Array2<f64>,
        B: Fn(&ParamStore, &mut Grads, &Array2<f64>, &Array2<f64>) -> Array2<f64>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = fwd(store, x);
        let probe = Array2::from_shape_simple_fn(y.raw_dim(), || rng.random_range(-1.0..1.0));
        let loss = |s: &ParamStore, x: &Array2<f64>| (&fwd(s, x) * &probe).sum();
        let mut g = store.zero_grads();
        let dx = bwd(store, &mut g, x, &probe);
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.as_slice().unwrap()[i];
            xp.as_slice_mut().unwrap()[i] = orig + h;
            let lp = loss(store, &xp);
            xp.as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(store, &xp);
            xp.as_slice_mut().unwrap()[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!(
                rel(dx.as_slice().unwrap()[i], num) < 1e-6,
                "input {i}: {} vs {num}",
                dx.as_slice().unwrap()[i]
            );
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for i in 0..store.get(id).len() {
                let orig = store.get(id).as_slice().unwrap()[i];
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig + h;
                let lp = loss(store, x);
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig - h;
                let lm = loss(store, x);
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig;
                let num = (lp - lm) / (2.0 * h);
                let a = g.get(id).as_slice().unwrap()[i];
                assert!(rel(a, num) < 1e-6, "{}[{i}]: {a} vs {num}", store.name(id));
            }
        }
    }

    fn input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.5..1.5))
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - num).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in [ln.gamma, ln.beta] {
            store.get_mut(id).mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
        }
        let x = input(4, 6, 1);
        check(
            &mut store,
            &x,
            |p, x| ln.forward(p, &x.view()).0,
            |p, g, x, dy| {
                let (_, c) = ln.forward(p, &x.view());
                ln.backward(p, g, &c, &dy.view())
            },
        );
    }

    #[test]
    fn mlp_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&mut store, &mut rng, "mlp", &[5, 7, 3], Init::FanIn);
        let x = input(3, 5, 2);
        check(
            &mut store,
            &x,
            |p, x| mlp.forward(p, &x.view()).0,
            |p, g, x, dy| {
                let (_, c) = mlp.forward(p, &x.view());
                mlp.backward(p, g, &c, &dy.view())
            },
        );
    }

    #[test]
    fn block_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = Block::new(&mut store, &mut rng, "blk", 8, 2, Init::FanIn);
        let x = input(5, 8, 3);
        check(
            &mut store,
            &x,
            |p, x| block.forward(p, &x.view()).0,
            |p, g, x, dy| {
                let (_, c) = block.forward(p, &x.view());
                block.backward(p, g, &c, &dy.view())
            },
        );
    }
}
