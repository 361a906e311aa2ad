//! Forward and backward passes of the decoder-only transformer.
//!
//! Everything is generic over the float type: training runs in f32, the
//! finite-difference gradient checks run the same code in f64. All
//! parallel work partitions outputs along fixed split points, so results
//! are bitwise independent of the thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut2, Axis};

use super::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Rows above which a matmul splits in two for rayon. Fixed so the
/// reduction tree does not depend on the machine.
const SPLIT_ROWS: usize = 256;

pub(crate) fn matmul_into<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>, mut out: ArrayViewMut2<F>) {
    let m = a.nrows();
    if m > SPLIT_ROWS {
        let mid = m / 2;
        let (a1, a2) = a.split_at(Axis(0), mid);
        let (o1, o2) = out.split_at(Axis(0), mid);
        rayon::join(|| matmul_into(a1, b, o1), || matmul_into(a2, b, o2));
    } else {
        general_mat_mul(F::one(), &a, &b, F::zero(), &mut out);
    }
}

pub(crate) fn matmul<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    matmul_into(a, b, out.view_mut());
    out
}

/// `acc += a^T b`; the output is parameter-sized (small), kept sequential.
pub(crate) fn matmul_acc_t<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>, mut acc: ArrayViewMut2<F>) {
    general_mat_mul(F::one(), &a.t(), &b, F::one(), &mut acc);
}

/// Elementwise map with a fixed chunk grid so rayon cannot change results.
pub(crate) fn par_map_inplace<F: Real>(data: &mut [F], f: impl Fn(F) -> F + Sync) {
    const CHUNK: usize = 65_536;
    if data.len() <= CHUNK {
        for v in data.iter_mut() {
            *v = f(*v);
        }
        return;
    }
    use rayon::prelude::*;
    data.par_chunks_mut(CHUNK).for_each(|chunk| {
        for v in chunk.iter_mut() {
            *v = f(*v);
        }
    });
}

/// `dst[i] = dst[i] * g(src[i])` over matching flat buffers, parallel with
/// a fixed chunk grid.
pub(crate) fn par_mul_map<F: Real>(dst: &mut [F], src: &[F], g: impl Fn(F) -> F + Sync) {
    const CHUNK: usize = 65_536;
    if dst.len() <= CHUNK {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = *d * g(s);
        }
        return;
    }
    use rayon::prelude::*;
    dst.par_chunks_mut(CHUNK).zip(src.par_chunks(CHUNK)).for_each(|(dc, sc)| {
        for (d, &s) in dc.iter_mut().zip(sc) {
            *d = *d * g(s);
        }
    });
}

pub(crate) fn add_bias<F: Real>(x: &mut Array2<F>, b: ArrayView1<F>) {
    for mut row in x.rows_mut() {
        row += &b;
    }
}

pub(crate) fn bias_grad_acc<F: Real>(dy: &Array2<F>, acc: &mut [F]) {
    for row in dy.rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
}

pub(crate) struct LnCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Vec<F>,
}

pub(crate) fn layernorm<F: Real>(
    x: &Array2<F>,
    gain: ArrayView1<F>,
    bias: ArrayView1<F>,
) -> (Array2<F>, LnCache<F>) {
    let (t, e) = x.dim();
    let eps = F::from_f64(LN_EPS);
    let inv_e = F::from_f64(1.0 / e as f64);
    let mut y = Array2::zeros((t, e));
    let mut xhat = Array2::zeros((t, e));
    let mut inv_std = Vec::with_capacity(t);
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    let xh = xhat.as_slice_mut().expect("standard layout");
    let g = gain.as_slice().expect("contiguous");
    let bi = bias.as_slice().expect("contiguous");
    for i in 0..t {
        let row = &xs[i * e..(i + 1) * e];
        let mut mean = F::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_e;
        let mut var = F::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_e;
        let is = (var + eps).sqrt().recip();
        inv_std.push(is);
        for j in 0..e {
            let v = (row[j] - mean) * is;
            xh[i * e + j] = v;
            ys[i * e + j] = v * g[j] + bi[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Gradient through layernorm; also accumulates the gain/bias gradients.
pub(crate) fn layernorm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    gain: ArrayView1<F>,
    dgain: &mut [F],
    dbias: &mut [F],
) -> Array2<F> {
    let (t, e) = dy.dim();
    let inv_e = F::from_f64(1.0 / e as f64);
    let mut dx = Array2::zeros((t, e));
    let dys = dy.as_slice().expect("standard layout");
    let xhs = cache.xhat.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("standard layout");
    let g = gain.as_slice().expect("contiguous");
    for i in 0..t {
        let dyr = &dys[i * e..(i + 1) * e];
        let xh = &xhs[i * e..(i + 1) * e];
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for j in 0..e {
            let dxh = dyr[j] * g[j];
            m1 += dxh;
            m2 += dxh * xh[j];
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
        }
        m1 = m1 * inv_e;
        m2 = m2 * inv_e;
        let is = cache.inv_std[i];
        for j in 0..e {
            let dxh = dyr[j] * g[j];
            dxs[i * e + j] = is * (dxh - m1 - xh[j] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu<F: Real>(u: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * u * (F::one() + t)
}

pub(crate) fn gelu_grad<F: Real>(u: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (u + a * u * u * u);
    let t = inner.tanh();
    let dt = (F::one() - t * t) * c * (F::one() + three * a * u * u);
    half * (F::one() + t) + half * u * dt
}

/// Batches above this size split in two for rayon (fixed split points).
const SPLIT_BATCH: usize = 16;

/// Causal multi-head self-attention on packed `qkv` rows.
///
/// Returns the context `(T, E)` and the softmax probabilities
/// `(batch * heads, S, S)` for the backward pass.
pub(crate) fn attention_forward<F: Real>(
    qkv: &Array2<F>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Array2<F>, Array3<F>) {
    let e = qkv.ncols() / 3;
    let mut ctx = Array2::zeros((batch * seq, e));
    let mut probs = Array3::zeros((batch * heads, seq, seq));
    let qs = qkv.as_slice().expect("standard layout");
    attn_fwd_range(
        qs,
        ctx.as_slice_mut().expect("standard layout"),
        probs.as_slice_mut().expect("standard layout"),
        batch,
        seq,
        heads,
        e,
    );
    (ctx, probs)
}

fn attn_fwd_range<F: Real>(
    qkv: &[F],
    ctx: &mut [F],
    probs: &mut [F],
    batch: usize,
    seq: usize,
    heads: usize,
    e: usize,
) {
    if batch > SPLIT_BATCH {
        let mid = batch / 2;
        let (q1, q2) = qkv.split_at(mid * seq * 3 * e);
        let (c1, c2) = ctx.split_at_mut(mid * seq * e);
        let (p1, p2) = probs.split_at_mut(mid * heads * seq * seq);
        rayon::join(
            || attn_fwd_range(q1, c1, p1, mid, seq, heads, e),
            || attn_fwd_range(q2, c2, p2, batch - mid, seq, heads, e),
        );
        return;
    }
    let hd = e / heads;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let row = 3 * e; // qkv row stride
    for b in 0..batch {
        let base = b * seq;
        for h in 0..heads {
            let qo = h * hd;
            let ko = e + h * hd;
            let vo = 2 * e + h * hd;
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let q = &qkv[(base + i) * row + qo..(base + i) * row + qo + hd];
                let pr = &mut p[i * seq..i * seq + i + 1];
                let mut maxv = F::neg_infinity();
                for (j, pj) in pr.iter_mut().enumerate() {
                    let k = &qkv[(base + j) * row + ko..(base + j) * row + ko + hd];
                    let mut s = F::zero();
                    for c in 0..hd {
                        s += q[c] * k[c];
                    }
                    s = s * scale;
                    *pj = s;
                    if s > maxv {
                        maxv = s;
                    }
                }
                let mut denom = F::zero();
                for pj in pr.iter_mut() {
                    let v = (*pj - maxv).exp();
                    *pj = v;
                    denom += v;
                }
                let inv = denom.recip();
                for pj in pr.iter_mut() {
                    *pj = *pj * inv;
                }
                let out = &mut ctx[(base + i) * e + qo..(base + i) * e + qo + hd];
                out.fill(F::zero());
                for j in 0..=i {
                    let pij = p[i * seq + j];
                    let v = &qkv[(base + j) * row + vo..(base + j) * row + vo + hd];
                    for c in 0..hd {
                        out[c] += pij * v[c];
                    }
                }
            }
        }
    }
}

/// Backward of [`attention_forward`]: gradient w.r.t. the packed qkv rows.
pub(crate) fn attention_backward<F: Real>(
    dctx: &Array2<F>,
    probs: &Array3<F>,
    qkv: &Array2<F>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Array2<F> {
    let e = qkv.ncols() / 3;
    let mut dqkv = Array2::zeros((batch * seq, 3 * e));
    attn_bwd_range(
        dctx.as_slice().expect("standard layout"),
        probs.as_slice().expect("standard layout"),
        qkv.as_slice().expect("standard layout"),
        dqkv.as_slice_mut().expect("standard layout"),
        batch,
        seq,
        heads,
        e,
    );
    dqkv
}

#[allow(clippy::too_many_arguments)]
fn attn_bwd_range<F: Real>(
    dctx: &[F],
    probs: &[F],
    qkv: &[F],
    dqkv: &mut [F],
    batch: usize,
    seq: usize,
    heads: usize,
    e: usize,
) {
    if batch > SPLIT_BATCH {
        let mid = batch / 2;
        let (dc1, dc2) = dctx.split_at(mid * seq * e);
        let (p1, p2) = probs.split_at(mid * heads * seq * seq);
        let (q1, q2) = qkv.split_at(mid * seq * 3 * e);
        let (d1, d2) = dqkv.split_at_mut(mid * seq * 3 * e);
        rayon::join(
            || attn_bwd_range(dc1, p1, q1, d1, mid, seq, heads, e),
            || attn_bwd_range(dc2, p2, q2, d2, batch - mid, seq, heads, e),
        );
        return;
    }
    let hd = e / heads;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let row = 3 * e;
    let mut dp = vec![F::zero(); seq * seq];
    for b in 0..batch {
        let base = b * seq;
        for h in 0..heads {
            let qo = h * hd;
            let ko = e + h * hd;
            let vo = 2 * e + h * hd;
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            // dV and dP
            for i in 0..seq {
                let dc = &dctx[(base + i) * e + qo..(base + i) * e + qo + hd];
                for j in 0..=i {
                    let v = &qkv[(base + j) * row + vo..(base + j) * row + vo + hd];
                    let mut acc = F::zero();
                    for c in 0..hd {
                        acc += dc[c] * v[c];
                    }
                    dp[i * seq + j] = acc;
                    let pij = p[i * seq + j];
                    let dv = &mut dqkv[(base + j) * row + vo..(base + j) * row + vo + hd];
                    for c in 0..hd {
                        dv[c] += pij * dc[c];
                    }
                }
            }
            // softmax backward, then dQ/dK through the scaled scores
            for i in 0..seq {
                let mut dot = F::zero();
                for j in 0..=i {
                    dot += dp[i * seq + j] * p[i * seq + j];
                }
                for j in 0..=i {
                    let ds = p[i * seq + j] * (dp[i * seq + j] - dot) * scale;
                    let kslice = (base + j) * row + ko;
                    let qslice = (base + i) * row + qo;
                    for c in 0..hd {
                        let kv = qkv[kslice + c];
                        let qv = qkv[qslice + c];
                        dqkv[qslice + c] += ds * kv;
                        dqkv[kslice + c] += ds * qv;
                    }
                }
            }
        }
    }
}
