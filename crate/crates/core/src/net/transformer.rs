//! Bidirectional pre-norm transformer with a hand-written backward pass.
//!
//! ```text
//! x = E[tok] + P[pos]
//! per layer:  x += Wo · MHA(LN1(x))      (no causal mask)
//!             x += W2 · gelu(W1 · LN2(x) + b1) + b2
//! logits = LNf(x) · Wout + bout
//! ```

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::model::{Layout, ModelParams};
use crate::error::{Error, Result};
use crate::seq::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Per-position log-probabilities over the vocabulary (rows = positions).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub log_probs: Array2<f64>,
}

impl ForwardOutput {
    pub fn len(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.nrows() == 0
    }

    pub fn log_prob(&self, pos: usize, token: TokenId) -> f64 {
        self.log_probs[[pos, token as usize]]
    }

    pub fn probs(&self, pos: usize) -> Array1<f64> {
        self.log_probs.row(pos).mapv(f64::exp)
    }

    /// Shannon entropy (nats) of the distribution at `pos`.
    pub fn entropy(&self, pos: usize) -> f64 {
        let h: f64 = self
            .log_probs
            .row(pos)
            .iter()
            .map(|&lp| {
                let p = lp.exp();
                if p > 0.0 {
                    -p * lp
                } else {
                    0.0
                }
            })
            .sum();
        h.max(0.0)
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per head, each n × n.
    att: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    z: Array2<f64>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
    probs: Array2<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let y = &xhat * &g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates dg, db.
fn layer_norm_backward(
    dy: &Array2<f64>,
    g: ArrayView1<f64>,
    cache: &LnCache,
    dg: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let dprod = dy * &cache.xhat;
    for (j, col) in dprod.axis_iter(Axis(1)).enumerate() {
        dg[j] += col.sum();
    }
    for (j, col) in dy.axis_iter(Axis(1)).enumerate() {
        db[j] += col.sum();
    }
    let dxhat = dy * &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i)).and(&dh).and(&xh).for_each(|o, &a, &b| {
            *o = r * (a - mean_dh - b * mean_dhx);
        });
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_K * (u + GELU_C * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

fn log_softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn add_rows(dst: &mut [f64], m: &Array2<f64>) {
    for row in m.axis_iter(Axis(0)) {
        for (d, v) in dst.iter_mut().zip(row.iter()) {
            *d += v;
        }
    }
}

fn add_matmul_tn(dst: &mut ndarray::ArrayViewMut2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    // dst += a^T b
    ndarray::linalg::general_mat_mul(1.0, &a.t(), b, 1.0, dst);
}

fn run(params: &ModelParams, tokens: &[TokenId], keep: bool) -> Result<(ForwardOutput, Option<ForwardCache>)> {
    let cfg = &params.config;
    let n = tokens.len();
    if n > cfg.max_len {
        return Err(Error::TooLong { len: n, max_len: cfg.max_len });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Domain(format!("token id {t} outside vocabulary")));
    }
    let layout = Layout::new(cfg);
    let w = &params.data;
    let (d, nh, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let emb = layout.tok_emb.mat(w);
    let pos = layout.pos_emb.mat(w);
    let mut x = Array2::zeros((n, d));
    for (i, &t) in tokens.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&emb.row(t as usize));
        row += &pos.row(i);
    }

    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for l in &layout.layers {
        let (h1, ln1) = layer_norm(&x, l.ln1_g.vec(w), l.ln1_b.vec(w));
        let q = h1.dot(&l.wq.mat(w));
        let k = h1.dot(&l.wk.mat(w));
        let v = h1.dot(&l.wv.mat(w));
        let mut o = Array2::zeros((n, d));
        let mut att = Vec::with_capacity(nh);
        for h in 0..nh {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|v| v * scale);
            softmax_rows_inplace(&mut scores);
            o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            att.push(scores);
        }
        x += &o.dot(&l.wo.mat(w));

        let (h2, ln2) = layer_norm(&x, l.ln2_g.vec(w), l.ln2_b.vec(w));
        let u = h2.dot(&l.w1.mat(w)) + l.b1.vec(w);
        let z = u.mapv(gelu);
        x += &(z.dot(&l.w2.mat(w)) + l.b2.vec(w));

        if keep {
            layer_caches.push(LayerCache { ln1, h1, q, k, v, att, o, ln2, h2, u, z });
        }
    }

    let (hf, lnf) = layer_norm(&x, layout.lnf_g.vec(w), layout.lnf_b.vec(w));
    let logits = hf.dot(&layout.w_out.mat(w)) + layout.b_out.vec(w);
    let log_probs = log_softmax_rows(&logits);
    let cache = keep.then(|| ForwardCache {
        tokens: tokens.to_vec(),
        layers: layer_caches,
        lnf,
        hf,
        probs: log_probs.mapv(f64::exp),
    });
    Ok((ForwardOutput { log_probs }, cache))
}

/// Full bidirectional forward pass.
pub fn forward(params: &ModelParams, tokens: &[TokenId]) -> Result<ForwardOutput> {
    run(params, tokens, false).map(|(out, _)| out)
}

pub fn forward_with_cache(params: &ModelParams, tokens: &[TokenId]) -> Result<(ForwardOutput, ForwardCache)> {
    run(params, tokens, true).map(|(out, cache)| (out, cache.expect("cache requested")))
}

/// Backpropagates `dlogits` (gradient of a scalar w.r.t. the pre-softmax logits)
/// and accumulates the parameter gradient into `grad`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dlogits: &Array2<f64>, grad: &mut [f64]) {
    let cfg = &params.config;
    let layout = Layout::new(cfg);
    let w = &params.data;
    let (nh, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    add_matmul_tn(&mut layout.w_out.mat_mut(grad), &cache.hf.view(), &dlogits.view());
    add_rows(&mut grad[layout.b_out.range()], dlogits);
    let dhf = dlogits.dot(&layout.w_out.mat(w).t());
    let (dg, db) = split_two(grad, layout.lnf_g.range(), layout.lnf_b.range());
    let mut dx = layer_norm_backward(&dhf, layout.lnf_g.vec(w), &cache.lnf, dg, db);

    for (l, c) in layout.layers.iter().zip(&cache.layers).rev() {
        // feed-forward
        add_matmul_tn(&mut l.w2.mat_mut(grad), &c.z.view(), &dx.view());
        add_rows(&mut grad[l.b2.range()], &dx);
        let dz = dx.dot(&l.w2.mat(w).t());
        let mut du = dz;
        Zip::from(&mut du).and(&c.u).for_each(|g, &u| *g *= gelu_grad(u));
        add_matmul_tn(&mut l.w1.mat_mut(grad), &c.h2.view(), &du.view());
        add_rows(&mut grad[l.b1.range()], &du);
        let dh2 = du.dot(&l.w1.mat(w).t());
        let (dg, db) = split_two(grad, l.ln2_g.range(), l.ln2_b.range());
        dx += &layer_norm_backward(&dh2, l.ln2_g.vec(w), &c.ln2, dg, db);

        // attention
        add_matmul_tn(&mut l.wo.mat_mut(grad), &c.o.view(), &dx.view());
        let d_o = dx.dot(&l.wo.mat(w).t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for h in 0..nh {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.att[h];
            let doh = d_o.slice(cols);
            let dp = doh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let mut ds = dp;
            for (mut ds_row, p_row) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let dot = ds_row.dot(&p_row);
                Zip::from(&mut ds_row).and(&p_row).for_each(|g, &pv| *g = pv * (*g - dot) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        add_matmul_tn(&mut l.wq.mat_mut(grad), &c.h1.view(), &dq.view());
        add_matmul_tn(&mut l.wk.mat_mut(grad), &c.h1.view(), &dk.view());
        add_matmul_tn(&mut l.wv.mat_mut(grad), &c.h1.view(), &dv.view());
        let dh1 = dq.dot(&l.wq.mat(w).t()) + dk.dot(&l.wk.mat(w).t()) + dv.dot(&l.wv.mat(w).t());
        let (dg, db) = split_two(grad, l.ln1_g.range(), l.ln1_b.range());
        dx += &layer_norm_backward(&dh1, l.ln1_g.vec(w), &c.ln1, dg, db);
    }

    let d = cfg.d_model;
    for (i, &t) in cache.tokens.iter().enumerate() {
        let row = dx.row(i);
        let te = layout.tok_emb.offset + t as usize * d;
        let pe = layout.pos_emb.offset + i * d;
        for j in 0..d {
            grad[te + j] += row[j];
            grad[pe + j] += row[j];
        }
    }
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn split_two(
    buf: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}
