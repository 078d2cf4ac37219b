use crate::error::{Error, Result};
use crate::mdm::Token;

use super::{count_forward, DenoiserParams};

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Per-position logits over ordinary tokens plus pooled prompt features.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Mean of the final normalized hidden states over prompt positions
    /// (all positions when the prompt is empty).
    pub pooled: Vec<f64>,
    pub len: usize,
    pub vocab_size: usize,
}

impl ForwardOutput {
    pub fn logits_at(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    pub fn probs_at(&self, pos: usize) -> Vec<f64> {
        softmax(self.logits_at(pos))
    }

    pub fn log_probs_at(&self, pos: usize) -> Vec<f64> {
        log_softmax(self.logits_at(pos))
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

struct LayerCache {
    x_in: Vec<f64>,
    h1: Vec<f64>,
    r1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads x n x n attention probabilities.
    att: Vec<f64>,
    ctx: Vec<f64>,
    x_mid: Vec<f64>,
    h2: Vec<f64>,
    r2: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
}

/// Intermediate activations needed by [`backward`].
pub struct ForwardCache {
    tokens: Vec<Token>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    hf: Vec<f64>,
    rf: Vec<f64>,
}

// C (m x n) = A (m x k) * B (k x n) + beta * C, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover the index ranges implied by the dimensions
    // and strides, which every caller derives from the same row-major shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x (n x i) @ w (i x o)`.
fn matmul(x: &[f64], w: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * o];
    gemm(n, i, o, x, i, 1, w, o, 1, 0.0, &mut y);
    y
}

/// `dw (i x o) += x^T dy`.
fn acc_weight_grad(dw: &mut [f64], x: &[f64], dy: &[f64], n: usize, i: usize, o: usize) {
    gemm(i, n, o, x, 1, i, dy, o, 1, 1.0, dw);
}

/// `dx (n x i) += dy (n x o) @ w^T`.
fn acc_input_grad(dx: &mut [f64], dy: &[f64], w: &[f64], n: usize, i: usize, o: usize) {
    gemm(n, o, i, dy, o, 1, w, 1, o, 1.0, dx);
}

fn rmsnorm(x: &[f64], g: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut r = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let ri = 1.0 / (ms + NORM_EPS).sqrt();
        r[i] = ri;
        for j in 0..d {
            y[i * d + j] = row[j] * ri * g[j];
        }
    }
    (y, r)
}

fn rmsnorm_backward(dy: &[f64], x: &[f64], r: &[f64], g: &[f64], dg: &mut [f64], dx: &mut [f64], n: usize, d: usize) {
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let ri = r[i];
        let mut dot = 0.0;
        for j in 0..d {
            let xhat = xr[j] * ri;
            dg[j] += dyr[j] * xhat;
            dot += dyr[j] * g[j] * xhat;
        }
        dot /= d as f64;
        for j in 0..d {
            let xhat = xr[j] * ri;
            dx[i * d + j] += ri * (dyr[j] * g[j] - xhat * dot);
        }
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn add_bias(y: &mut [f64], b: &[f64]) {
    for row in y.chunks_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn acc_bias_grad(db: &mut [f64], dy: &[f64]) {
    for row in dy.chunks(db.len()) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Run the denoiser on a full sequence (prompt prefix + completion).
///
/// Attention is bidirectional over every position; the first `prompt_len`
/// positions define the pooled features used by the threshold head.
pub fn forward(params: &DenoiserParams, tokens: &[Token], prompt_len: usize) -> Result<ForwardOutput> {
    forward_with_cache(params, tokens, prompt_len).map(|(out, _)| out)
}

pub fn forward_with_cache(
    params: &DenoiserParams,
    tokens: &[Token],
    prompt_len: usize,
) -> Result<(ForwardOutput, ForwardCache)> {
    let cfg = &params.config;
    let lay = &params.layout;
    let n = tokens.len();
    if n > cfg.max_len {
        return Err(Error::Overlength { len: n, max: cfg.max_len });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty input sequence".into()));
    }
    if prompt_len > n {
        return Err(Error::Shape(format!("prompt_len {prompt_len} > sequence length {n}")));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab.input_size()) {
        return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
    }
    count_forward();
    let p = &params.data;
    let d = cfg.embed_dim;
    let f = cfg.ffn_dim;
    let vsz = cfg.vocab.size;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = &p[lay.tok_emb.clone()];
    let pos = &p[lay.pos_emb.clone()];
    let mut x = vec![0.0; n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        for j in 0..d {
            x[i * d + j] = tok[t * d + j] + pos[i * d + j];
        }
    }

    let mut layers = Vec::with_capacity(lay.layers.len());
    for l in &lay.layers {
        let (h1, r1) = rmsnorm(&x, &p[l.ln1.clone()], n, d);
        let q = matmul(&h1, &p[l.wq.clone()], n, d, d);
        let k = matmul(&h1, &p[l.wk.clone()], n, d, d);
        let v = matmul(&h1, &p[l.wv.clone()], n, d, d);
        let mut att = vec![0.0; heads * n * n];
        let mut ctx = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let row = &mut att[(h * n + i) * n..(h * n + i + 1) * n];
                let qi = &q[i * d + off..i * d + off + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    mx = mx.max(s);
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
                let ci = &mut ctx[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let pij = row[j];
                    let vj = &v[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        ci[c] += pij * vj[c];
                    }
                }
            }
        }
        let mut x_mid = x.clone();
        gemm(n, d, d, &ctx, d, 1, &p[l.wo.clone()], d, 1, 1.0, &mut x_mid);
        let (h2, r2) = rmsnorm(&x_mid, &p[l.ln2.clone()], n, d);
        let mut u = matmul(&h2, &p[l.w1.clone()], n, d, f);
        add_bias(&mut u, &p[l.b1.clone()]);
        let a: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut x_out = x_mid.clone();
        gemm(n, f, d, &a, f, 1, &p[l.w2.clone()], d, 1, 1.0, &mut x_out);
        add_bias(&mut x_out, &p[l.b2.clone()]);
        layers.push(LayerCache { x_in: x, h1, r1, q, k, v, att, ctx, x_mid, h2, r2, u, a });
        x = x_out;
    }

    let (hf, rf) = rmsnorm(&x, &p[lay.lnf.clone()], n, d);
    let mut logits = matmul(&hf, &p[lay.w_out.clone()], n, d, vsz);
    add_bias(&mut logits, &p[lay.b_out.clone()]);

    let pool_rows = if prompt_len == 0 { n } else { prompt_len };
    let mut pooled = vec![0.0; d];
    for i in 0..pool_rows {
        for j in 0..d {
            pooled[j] += hf[i * d + j];
        }
    }
    for v in pooled.iter_mut() {
        *v /= pool_rows as f64;
    }

    let out = ForwardOutput { logits, pooled, len: n, vocab_size: vsz };
    let cache = ForwardCache { tokens: tokens.to_vec(), layers, x_final: x, hf, rf };
    Ok((out, cache))
}

/// Accumulate parameter gradients for upstream logit gradients `dlogits`
/// (`len x vocab.size`, row-major) into `grads`.
///
/// Pooled features receive no gradient: the threshold head reads them under
/// stop-gradient.
pub fn backward(params: &DenoiserParams, cache: &ForwardCache, dlogits: &[f64], grads: &mut [f64]) -> Result<()> {
    let cfg = &params.config;
    let lay = &params.layout;
    let n = cache.tokens.len();
    let d = cfg.embed_dim;
    let f = cfg.ffn_dim;
    let vsz = cfg.vocab.size;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    if dlogits.len() != n * vsz || grads.len() != params.data.len() {
        return Err(Error::Shape(format!(
            "backward got dlogits {} (want {}) grads {} (want {})",
            dlogits.len(),
            n * vsz,
            grads.len(),
            params.data.len()
        )));
    }
    let p = &params.data;

    acc_bias_grad(&mut grads[lay.b_out.clone()], dlogits);
    acc_weight_grad(&mut grads[lay.w_out.clone()], &cache.hf, dlogits, n, d, vsz);
    let mut dhf = vec![0.0; n * d];
    acc_input_grad(&mut dhf, dlogits, &p[lay.w_out.clone()], n, d, vsz);
    let mut dx = vec![0.0; n * d];
    rmsnorm_backward(&dhf, &cache.x_final, &cache.rf, &p[lay.lnf.clone()], &mut grads[lay.lnf.clone()], &mut dx, n, d);

    for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
        // feed-forward block
        acc_bias_grad(&mut grads[l.b2.clone()], &dx);
        acc_weight_grad(&mut grads[l.w2.clone()], &c.a, &dx, n, f, d);
        let mut da = vec![0.0; n * f];
        acc_input_grad(&mut da, &dx, &p[l.w2.clone()], n, f, d);
        for (g, &u) in da.iter_mut().zip(&c.u) {
            *g *= gelu_grad(u);
        }
        let du = da;
        acc_bias_grad(&mut grads[l.b1.clone()], &du);
        acc_weight_grad(&mut grads[l.w1.clone()], &c.h2, &du, n, d, f);
        let mut dh2 = vec![0.0; n * d];
        acc_input_grad(&mut dh2, &du, &p[l.w1.clone()], n, d, f);
        let mut dx_mid = dx;
        rmsnorm_backward(&dh2, &c.x_mid, &c.r2, &p[l.ln2.clone()], &mut grads[l.ln2.clone()], &mut dx_mid, n, d);

        // attention block
        acc_weight_grad(&mut grads[l.wo.clone()], &c.ctx, &dx_mid, n, d, d);
        let mut dctx = vec![0.0; n * d];
        acc_input_grad(&mut dctx, &dx_mid, &p[l.wo.clone()], n, d, d);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut ds = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let prow = &c.att[(h * n + i) * n..(h * n + i + 1) * n];
                let dci = &dctx[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for j in 0..n {
                    let vj = &c.v[j * d + off..j * d + off + dh];
                    let dp = dci.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                    ds[j] = dp;
                    dot += dp * prow[j];
                    let pij = prow[j];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for cc in 0..dh {
                        dvj[cc] += pij * dci[cc];
                    }
                }
                for j in 0..n {
                    let g = prow[j] * (ds[j] - dot) * scale;
                    if g == 0.0 {
                        continue;
                    }
                    for cc in 0..dh {
                        dq[i * d + off + cc] += g * c.k[j * d + off + cc];
                        dk[j * d + off + cc] += g * c.q[i * d + off + cc];
                    }
                }
            }
        }
        let mut dh1 = vec![0.0; n * d];
        for (w, dy) in [(&l.wq, &dq), (&l.wk, &dk), (&l.wv, &dv)] {
            acc_weight_grad(&mut grads[w.clone()], &c.h1, dy, n, d, d);
            acc_input_grad(&mut dh1, dy, &p[w.clone()], n, d, d);
        }
        let mut dx_in = dx_mid;
        rmsnorm_backward(&dh1, &c.x_in, &c.r1, &p[l.ln1.clone()], &mut grads[l.ln1.clone()], &mut dx_in, n, d);
        dx = dx_in;
    }

    let (tok_r, pos_r) = (lay.tok_emb.clone(), lay.pos_emb.clone());
    for (i, &t) in cache.tokens.iter().enumerate() {
        let t = t as usize;
        for j in 0..d {
            grads[tok_r.start + t * d + j] += dx[i * d + j];
            grads[pos_r.start + i * d + j] += dx[i * d + j];
        }
    }
    Ok(())
}
