//! Forward and backward passes for the transformer building blocks.
//!
//! Sequences are packed: a batch is one `[tokens × d]` matrix plus a list of
//! segments, so projections run as single GEMMs and attention never sees
//! padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Attention, FeedForward, LayerNorm, Linear};
use super::tensor::{col_sum_acc, dot, matmul, matmul_nt, matmul_tn_acc, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Which key positions a query may attend to, within its own segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Every non-pad position.
    Bidirectional,
    /// Positions `j <= i`.
    Causal,
}

impl MaskKind {
    /// Number of visible keys for query `i` out of `keys`.
    pub fn visible(self, i: usize, keys: usize) -> usize {
        match self {
            MaskKind::Bidirectional => keys,
            MaskKind::Causal => (i + 1).min(keys),
        }
    }

    /// Dense allow-matrix over a length-`len` sequence.
    pub fn allow_matrix(self, len: usize) -> Vec<Vec<bool>> {
        (0..len)
            .map(|i| (0..len).map(|j| j < self.visible(i, len)).collect())
            .collect()
    }
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = matmul(x, &self.weight);
        let b = self.bias.data();
        for r in 0..y.rows() {
            for (v, bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    /// Accumulates weight gradients; returns `dx` when asked.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear, need_dx: bool) -> Option<Tensor> {
        matmul_tn_acc(x, dy, &mut grad.weight);
        col_sum_acc(dy, &mut grad.bias);
        need_dx.then(|| matmul_nt(dy, &self.weight))
    }
}

#[derive(Debug, Clone)]
pub struct NormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> (Tensor, NormCache) {
        let d = x.cols();
        let mut normalized = Tensor::zeros(x.rows(), d);
        let mut y = Tensor::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        let (gain, shift) = (self.gain.data(), self.shift.data());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let n = normalized.row_mut(r);
            for k in 0..d {
                n[k] = (row[k] - mean) * is;
            }
            let yr = y.row_mut(r);
            let n = normalized.row(r);
            for k in 0..d {
                yr[k] = n[k] * gain[k] + shift[k];
            }
        }
        (y, NormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &NormCache, dy: &Tensor, grad: &mut LayerNorm) -> Tensor {
        let d = dy.cols();
        let gain = self.gain.data();
        let mut dx = Tensor::zeros(dy.rows(), d);
        let mut dn = vec![0.0; d];
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let n = cache.normalized.row(r);
            {
                let gg = grad.gain.data_mut();
                for k in 0..d {
                    gg[k] += dyr[k] * n[k];
                }
            }
            {
                let gs = grad.shift.data_mut();
                for k in 0..d {
                    gs[k] += dyr[k];
                }
            }
            for k in 0..d {
                dn[k] = dyr[k] * gain[k];
            }
            let mean_dn = dn.iter().sum::<f64>() / d as f64;
            let mean_dn_n = dot(&dn, n) / d as f64;
            let is = cache.inv_std[r];
            let dxr = dx.row_mut(r);
            for k in 0..d {
                dxr[k] = is * (dn[k] - mean_dn - n[k] * mean_dn_n);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Attention weights, laid out segment, head, query, key.
    probs: Vec<f64>,
    context: Tensor,
}

impl AttentionCache {
    /// Attention weights of `head` for query segment `seg`, as `[q × k]`.
    pub fn weights(&self, queries: &[Segment], keys: &[Segment], heads: usize, seg: usize, head: usize) -> Tensor {
        let mut offset = 0;
        for s in 0..seg {
            offset += heads * queries[s].len * keys[s].len;
        }
        let (ql, kl) = (queries[seg].len, keys[seg].len);
        offset += head * ql * kl;
        Tensor::from_vec(ql, kl, self.probs[offset..offset + ql * kl].to_vec())
    }
}

pub struct AttentionLayout<'a> {
    pub queries: &'a [Segment],
    pub keys: &'a [Segment],
    pub mask: MaskKind,
    pub heads: usize,
}

impl Attention {
    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, layout: &AttentionLayout) -> (Tensor, AttentionCache) {
        let q = self.query.forward(xq);
        let k = self.key.forward(xkv);
        let v = self.value.forward(xkv);
        let d = q.cols();
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut context = Tensor::zeros(q.rows(), d);
        let total: usize = layout
            .queries
            .iter()
            .zip(layout.keys)
            .map(|(qs, ks)| layout.heads * qs.len * ks.len)
            .sum();
        let mut probs = vec![0.0; total];
        let mut cursor = 0;
        for (qs, ks) in layout.queries.iter().zip(layout.keys) {
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..qs.len {
                    let row = &mut probs[cursor..cursor + ks.len];
                    cursor += ks.len;
                    let visible = layout.mask.visible(i, ks.len);
                    let qi = &q.row(qs.start + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for (j, p) in row.iter_mut().enumerate().take(visible) {
                        *p = dot(qi, &k.row(ks.start + j)[cols.clone()]) * scale;
                        max = max.max(*p);
                    }
                    let mut sum = 0.0;
                    for p in row.iter_mut().take(visible) {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    let ctx = &mut context.row_mut(qs.start + i)[cols.clone()];
                    for (j, p) in row.iter_mut().enumerate().take(visible) {
                        *p /= sum;
                        let vj = &v.row(ks.start + j)[cols.clone()];
                        for (c, vv) in ctx.iter_mut().zip(vj) {
                            *c += *p * vv;
                        }
                    }
                }
            }
        }
        let out = self.output.forward(&context);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    /// Returns `(dxq, dxkv)`; `dxkv` is skipped unless `need_dkv`.
    pub fn backward(
        &self,
        xq: &Tensor,
        xkv: &Tensor,
        cache: &AttentionCache,
        dy: &Tensor,
        layout: &AttentionLayout,
        grad: &mut Attention,
        need_dkv: bool,
    ) -> (Tensor, Option<Tensor>) {
        let d_context = self
            .output
            .backward(&cache.context, dy, &mut grad.output, true)
            .expect("dx requested");
        let d = cache.q.cols();
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(cache.q.rows(), d);
        let mut dk = Tensor::zeros(cache.k.rows(), d);
        let mut dv = Tensor::zeros(cache.v.rows(), d);
        let mut dp = Vec::new();
        let mut cursor = 0;
        for (qs, ks) in layout.queries.iter().zip(layout.keys) {
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..qs.len {
                    let row = &cache.probs[cursor..cursor + ks.len];
                    cursor += ks.len;
                    let visible = layout.mask.visible(i, ks.len);
                    let dci = &d_context.row(qs.start + i)[cols.clone()];
                    dp.clear();
                    let mut weighted = 0.0;
                    for (j, &p) in row.iter().enumerate().take(visible) {
                        let g = dot(dci, &cache.v.row(ks.start + j)[cols.clone()]);
                        weighted += p * g;
                        dp.push(g);
                        let dvj = &mut dv.row_mut(ks.start + j)[cols.clone()];
                        for (a, c) in dvj.iter_mut().zip(dci) {
                            *a += p * c;
                        }
                    }
                    let qi = &cache.q.row(qs.start + i)[cols.clone()];
                    let mut dqi = vec![0.0; dh];
                    for (j, &p) in row.iter().enumerate().take(visible) {
                        let ds = p * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &cache.k.row(ks.start + j)[cols.clone()];
                        for (a, kk) in dqi.iter_mut().zip(kj) {
                            *a += ds * kk;
                        }
                        let dkj = &mut dk.row_mut(ks.start + j)[cols.clone()];
                        for (a, qq) in dkj.iter_mut().zip(qi) {
                            *a += ds * qq;
                        }
                    }
                    for (a, b) in dq.row_mut(qs.start + i)[cols.clone()].iter_mut().zip(&dqi) {
                        *a += b;
                    }
                }
            }
        }
        let dxq = self
            .query
            .backward(xq, &dq, &mut grad.query, true)
            .expect("dx requested");
        let dk_in = self.key.backward(xkv, &dk, &mut grad.key, need_dkv);
        let dv_in = self.value.backward(xkv, &dv, &mut grad.value, need_dkv);
        let dxkv = match (dk_in, dv_in) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        };
        (dxq, dxkv)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    hidden: Tensor,
}

impl FeedForward {
    pub fn forward(&self, x: &Tensor) -> (Tensor, FeedForwardCache) {
        let mut hidden = self.expand.forward(x);
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let y = self.contract.forward(&hidden);
        (y, FeedForwardCache { hidden })
    }

    pub fn backward(&self, x: &Tensor, cache: &FeedForwardCache, dy: &Tensor, grad: &mut FeedForward) -> Tensor {
        let mut dh = self
            .contract
            .backward(&cache.hidden, dy, &mut grad.contract, true)
            .expect("dx requested");
        for (g, h) in dh.data_mut().iter_mut().zip(cache.hidden.data()) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        self.expand
            .backward(x, &dh, &mut grad.expand, true)
            .expect("dx requested")
    }
}

/// Inverted dropout driven by an explicit seeded stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

pub type DropoutMask = Option<Vec<f64>>;

impl Dropout {
    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        if rate <= 0.0 {
            return Self::disabled();
        }
        Self {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn apply(&mut self, x: &mut Tensor) -> DropoutMask {
        let rng = self.rng.as_mut()?;
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        for (v, m) in x.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        Some(mask)
    }
}

pub fn dropout_backward(mask: &DropoutMask, dy: &Tensor) -> Tensor {
    match mask {
        None => dy.clone(),
        Some(m) => {
            let mut g = dy.clone();
            for (v, s) in g.data_mut().iter_mut().zip(m) {
                *v *= s;
            }
            g
        }
    }
}
