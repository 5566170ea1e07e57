//! Minimal f64 neural-net primitives with hand-written backward passes:
//! linear layers, layer norm, multi-head self-attention, and SGD with
//! momentum. Not a general autograd engine; exactly the compositions the
//! conditioning encoders and the toy generator need, with gradients good to
//! finite-difference precision.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// One trainable tensor: values, gradient accumulator, momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub v: Vec<f64>,
    pub g: Vec<f64>,
    pub m: Vec<f64>,
}

impl Param {
    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (rows as f64).sqrt();
        let v: Vec<f64> = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Param {
            name: name.into(),
            shape: vec![rows, cols],
            g: vec![0.0; v.len()],
            m: vec![0.0; v.len()],
            v,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            v: vec![0.0; len],
            g: vec![0.0; len],
            m: vec![0.0; len],
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f64) -> Self {
        let mut p = Param::zeros(name, shape);
        p.v.fill(value);
        p
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows(), self.cols()), &self.v).unwrap()
    }

    pub fn grad2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.g).unwrap()
    }
}

/// y = x W (+ b), with x of shape T x in, W in x out.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new(name: &str, dim_in: usize, dim_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::matrix(format!("{name}.w"), dim_in, dim_out, rng),
            b: Some(Param::zeros(format!("{name}.b"), vec![dim_out])),
        }
    }

    /// Bias-free projection; the attention q/k/v maps use this (a key bias
    /// is unidentifiable under softmax).
    pub fn new_no_bias(name: &str, dim_in: usize, dim_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::matrix(format!("{name}.w"), dim_in, dim_out, rng),
            b: None,
        }
    }

    pub fn fwd(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.view2());
        if let Some(b) = &self.b {
            let b = Array1::from_vec(b.v.clone());
            y += &b;
        }
        y
    }

    /// Accumulates parameter gradients and returns dx.
    pub fn bwd(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let dw = x.t().dot(dy);
        self.w.grad2_mut().scaled_add(1.0, &dw);
        if let Some(b) = &mut self.b {
            for (gi, db) in b.g.iter_mut().zip(dy.sum_axis(Axis(0)).iter()) {
                *gi += *db;
            }
        }
        dy.dot(&self.w.view2().t())
    }

    pub fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        if let Some(b) = &mut self.b {
            out.push(b);
        }
    }
}

/// Row-wise layer norm over channels with learnable gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: Param,
    pub b: Param,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            g: Param::filled(format!("{name}.g"), vec![dim], 1.0),
            b: Param::zeros(format!("{name}.b"), vec![dim]),
            eps: 1e-5,
        }
    }

    pub fn fwd(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols();
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d as f64;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.g.v[j] + self.b.v[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn bwd(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for t in 0..dy.nrows() {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..dy.ncols() {
                let dyv = dy[[t, j]];
                let xh = cache.xhat[[t, j]];
                self.g.g[j] += dyv * xh;
                self.b.g[j] += dyv;
                let dxhat = dyv * self.g.v[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xh;
            }
            let is = cache.inv_std[t];
            for j in 0..dy.ncols() {
                let dxhat = dy[[t, j]] * self.g.v[j];
                dx[[t, j]] =
                    is * (dxhat - sum_dxhat / d - cache.xhat[[t, j]] * sum_dxhat_xhat / d);
            }
        }
        dx
    }

    pub fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.g);
        out.push(&mut self.b);
    }
}

/// Elementwise tanh; backward wants the cached output.
pub fn tanh_fwd(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(f64::tanh)
}

pub fn tanh_bwd(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| *d *= 1.0 - yv * yv);
    dx
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Multi-head self-attention: q/k/v/out projections over width `dim`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
    x: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "width must divide across heads");
        MultiHeadAttention {
            wq: Linear::new_no_bias(&format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new_no_bias(&format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new_no_bias(&format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(&format!("{name}.wo"), dim, dim, rng),
            heads,
        }
    }

    pub fn fwd(&self, x: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let t = x.nrows();
        let dim = x.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.fwd(x);
        let k = self.wk.fwd(x);
        let v = self.wv.fwd(x);
        let mut concat = Array2::zeros((t, dim));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            softmax_rows(&mut scores);
            let oh = scores.dot(&vh);
            concat.slice_mut(ndarray::s![.., cols]).assign(&oh);
            attn.push(scores);
        }
        let y = self.wo.fwd(&concat);
        (
            y,
            AttnCache {
                q,
                k,
                v,
                attn,
                concat,
                x: x.clone(),
            },
        )
    }

    pub fn bwd(&mut self, cache: &AttnCache, dy: &Array2<f64>) -> Array2<f64> {
        let dim = cache.x.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.wo.bwd(&cache.concat, dy);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let a = &cache.attn[h];
            let doh = dconcat.slice(ndarray::s![.., cols.clone()]);
            let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
            let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
            let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
            let da = doh.dot(&vh.t());
            let dvh = a.t().dot(&doh);
            // softmax backward per row: ds = a * (da - sum(da * a))
            let mut ds = da;
            for (mut ds_row, a_row) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot: f64 = ds_row.iter().zip(a_row.iter()).map(|(x, y)| x * y).sum();
                for (d, &av) in ds_row.iter_mut().zip(a_row.iter()) {
                    *d = av * (*d - dot);
                }
            }
            ds *= scale;
            dq.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&ds.dot(&kh));
            dk.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&ds.t().dot(&qh));
            dv.slice_mut(ndarray::s![.., cols]).assign(&dvh);
        }
        let mut dx = self.wq.bwd(&cache.x, &dq);
        dx += &self.wk.bwd(&cache.x, &dk);
        dx += &self.wv.bwd(&cache.x, &dv);
        dx
    }

    pub fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.wq.collect(out);
        self.wk.collect(out);
        self.wv.collect(out);
        self.wo.collect(out);
    }
}

/// Pre-LN transformer block: x + Attn(LN(x)), then x + FF(LN(x)) with a
/// width-preserving tanh feed-forward.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    ln2: LayerNormCache,
    ln2_out: Array2<f64>,
    h: Array2<f64>,
}

impl Block {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            ff1: Linear::new(&format!("{name}.ff1"), dim, dim, rng),
            ff2: Linear::new(&format!("{name}.ff2"), dim, dim, rng),
        }
    }

    pub fn fwd(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (ln1_out, ln1) = self.ln1.fwd(x);
        let (a, attn) = self.attn.fwd(&ln1_out);
        let y = x + &a;
        let (ln2_out, ln2) = self.ln2.fwd(&y);
        let h = tanh_fwd(&self.ff1.fwd(&ln2_out));
        let f = self.ff2.fwd(&h);
        let out = &y + &f;
        (
            out,
            BlockCache {
                ln1,
                attn,
                ln2,
                ln2_out,
                h,
            },
        )
    }

    pub fn bwd(&mut self, cache: &BlockCache, dout: &Array2<f64>) -> Array2<f64> {
        let dh = self.ff2.bwd(&cache.h, dout);
        let dpre = tanh_bwd(&cache.h, &dh);
        let dln2_out = self.ff1.bwd(&cache.ln2_out, &dpre);
        let mut dy = self.ln2.bwd(&cache.ln2, &dln2_out);
        dy += dout;
        let dln1_out = self.attn.bwd(&cache.attn, &dy);
        let mut dx = self.ln1.bwd(&cache.ln1, &dln1_out);
        dx += &dy;
        dx
    }

    pub fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.ln1.collect(out);
        self.attn.collect(out);
        self.ln2.collect(out);
        self.ff1.collect(out);
        self.ff2.collect(out);
    }
}

/// Plain SGD with momentum and linear learning-rate warmup.
#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub warmup_steps: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-3,
            momentum: 0.9,
            warmup_steps: 200,
        }
    }
}

pub fn sgd_step(params: &mut [&mut Param], cfg: &SgdConfig, step: u64) {
    let warm = if cfg.warmup_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    let lr = cfg.lr * warm;
    for p in params.iter_mut() {
        for i in 0..p.v.len() {
            p.m[i] = cfg.momentum * p.m[i] + p.g[i];
            p.v[i] -= lr * p.m[i];
            p.g[i] = 0.0;
        }
    }
}

pub fn zero_grads(params: &mut [&mut Param]) {
    for p in params.iter_mut() {
        p.g.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn get_param(block: &mut Block, pi: usize, i: usize) -> f64 {
        let mut params = Vec::new();
        block.collect(&mut params);
        params[pi].v[i]
    }

    fn set_param(block: &mut Block, pi: usize, i: usize, value: f64) {
        let mut params = Vec::new();
        block.collect(&mut params);
        params[pi].v[i] = value;
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = stream(11, "nn-test", 0);
        let mut block = Block::new("b", 8, 2, &mut rng);
        let x = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));

        let loss_of = |b: &Block| {
            let (out, _) = b.fwd(&x);
            (&out - &target).mapv(|v| v * v).sum()
        };

        let (out, cache) = block.fwd(&x);
        let dout = (&out - &target).mapv(|v| 2.0 * v);
        block.bwd(&cache, &dout);

        let mut params = Vec::new();
        block.collect(&mut params);
        let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.g.clone()).collect();
        let n_params = params.len();
        let lens: Vec<usize> = params.iter().map(|p| p.len()).collect();
        drop(params);

        let eps = 1e-5;
        for pi in 0..n_params {
            let stride = (lens[pi] / 7).max(1); // sample within big mats
            for i in (0..lens[pi]).step_by(stride) {
                let orig = get_param(&mut block, pi, i);
                set_param(&mut block, pi, i, orig + eps);
                let up = loss_of(&block);
                set_param(&mut block, pi, i, orig - eps);
                let down = loss_of(&block);
                set_param(&mut block, pi, i, orig);

                let numeric = (up - down) / (2.0 * eps);
                let got = analytic[pi][i];
                let denom = numeric.abs().max(got.abs()).max(1e-8);
                assert!(
                    (numeric - got).abs() / denom < 1e-4,
                    "param {pi} idx {i}: numeric {numeric} vs analytic {got}"
                );
            }
        }
    }

    #[test]
    fn sgd_momentum_updates() {
        let mut p = Param::zeros("p", vec![2]);
        p.g = vec![1.0, -2.0];
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.5,
            warmup_steps: 0,
        };
        sgd_step(&mut [&mut p], &cfg, 0);
        assert!((p.v[0] + 0.1).abs() < 1e-12);
        assert!((p.v[1] - 0.2).abs() < 1e-12);
        assert_eq!(p.g, vec![0.0, 0.0]);
        // momentum carries
        p.g = vec![1.0, -2.0];
        sgd_step(&mut [&mut p], &cfg, 1);
        assert!((p.v[0] + 0.1 + 0.15).abs() < 1e-12);
    }

    #[test]
    fn warmup_scales_lr() {
        let mut p = Param::zeros("p", vec![1]);
        p.g = vec![1.0];
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            warmup_steps: 10,
        };
        sgd_step(&mut [&mut p], &cfg, 0);
        assert!((p.v[0] + 0.1).abs() < 1e-12, "step 0 uses lr/10");
    }
}
