//! Graph-free numeric kernels shared by the autodiff ops, the prefill path
//! and the single-token decode path.

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// `c (+)= op(a) · op(b)` for row-major buffers.
///
/// `a` is `[m, k]` (stored `[k, m]` when `ta`), `b` is `[k, n]` (stored
/// `[n, k]` when `tb`), `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[m, k] · [k, n] -> [m, n]`.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(false, false, m, k, n, a.data(), b.data(), &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `x · wᵀ` where `x` is `[.., k]` and `w` is `[n, k]`.
pub fn linear<T: Float>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.shape().len() != 2 || x.cols() != w.shape()[1] {
        return Err(Error::shape(
            "linear",
            format!("input {:?} with weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (m, k, n) = (x.rows(), x.cols(), w.shape()[0]);
    let mut out = vec![T::zero(); m * n];
    gemm(false, true, m, k, n, x.data(), w.data(), &mut out, false);
    let mut shape = x.shape().to_vec();
    if shape.is_empty() {
        shape.push(n);
    } else {
        *shape.last_mut().unwrap() = n;
    }
    Ok(Tensor::from_parts(shape, out))
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Float>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Row softmax over the last dimension; `mask[i] == false` excludes entry `i`.
pub fn softmax_rows<T: Float>(x: &[T], cols: usize, mask: Option<&[bool]>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let keep = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
        let mut mx = T::neg_infinity();
        let mut kept = false;
        for (j, &v) in xr.iter().enumerate() {
            kept |= keep(j);
            if keep(j) && v > mx {
                mx = v;
            }
        }
        if !kept {
            return Err(Error::DegenerateMask { row: r });
        }
        if mx == T::neg_infinity() {
            // non-finite inputs propagate instead of failing
            or.iter_mut().for_each(|o| *o = T::nan());
            continue;
        }
        let mut sum = T::zero();
        for (j, (&v, o)) in xr.iter().zip(or.iter_mut()).enumerate() {
            if keep(j) {
                *o = (v - mx).exp();
                sum += *o;
            }
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// RMS normalisation of each contiguous `group` of elements, scaled by
/// `weight` (length = row width). Returns the output and the per-group
/// reciprocal RMS.
pub fn rmsnorm_forward<T: Float>(x: &[T], weight: &[T], group: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let cols = weight.len();
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / group);
    for (gi, (xg, og)) in x.chunks(group).zip(out.chunks_mut(group)).enumerate() {
        let ms = xg.iter().map(|&v| v * v).sum::<T>() / T::lit(group as f64);
        let r = T::one() / (ms + eps).sqrt();
        inv.push(r);
        let off = (gi * group) % cols;
        for (j, (&v, o)) in xg.iter().zip(og.iter_mut()).enumerate() {
            *o = v * r * weight[off + j];
        }
    }
    (out, inv)
}

/// Gradients of [`rmsnorm_forward`]: `(dx, dweight)`.
pub fn rmsnorm_backward<T: Float>(
    x: &[T],
    weight: &[T],
    inv: &[T],
    dy: &[T],
    group: usize,
) -> (Vec<T>, Vec<T>) {
    let cols = weight.len();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); cols];
    let gsz = T::lit(group as f64);
    for (gi, ((xg, dyg), dxg)) in x
        .chunks(group)
        .zip(dy.chunks(group))
        .zip(dx.chunks_mut(group))
        .enumerate()
    {
        let r = inv[gi];
        let off = (gi * group) % cols;
        let mut dot = T::zero();
        for j in 0..group {
            let xhat = xg[j] * r;
            let gw = dyg[j] * weight[off + j];
            dot += gw * xhat;
            dw[off + j] += dyg[j] * xhat;
        }
        let mean = dot / gsz;
        for j in 0..group {
            let xhat = xg[j] * r;
            dxg[j] = r * (dyg[j] * weight[off + j] - xhat * mean);
        }
    }
    (dx, dw)
}

/// LayerNorm over rows of width `weight.len()`. Returns output, per-row mean
/// and per-row reciprocal standard deviation.
pub fn layernorm_forward<T: Float>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cols = weight.len();
    let n = T::lit(cols as f64);
    let mut out = vec![T::zero(); x.len()];
    let (mut means, mut invs) = (Vec::new(), Vec::new());
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mu = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for j in 0..cols {
            or[j] = (xr[j] - mu) * r * weight[j] + bias[j];
        }
        means.push(mu);
        invs.push(r);
    }
    (out, means, invs)
}

/// Gradients of [`layernorm_forward`]: `(dx, dweight, dbias)`.
pub fn layernorm_backward<T: Float>(
    x: &[T],
    weight: &[T],
    means: &[T],
    invs: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cols = weight.len();
    let n = T::lit(cols as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); cols];
    let mut db = vec![T::zero(); cols];
    for (r, ((xr, dyr), dxr)) in x
        .chunks(cols)
        .zip(dy.chunks(cols))
        .zip(dx.chunks_mut(cols))
        .enumerate()
    {
        let (mu, inv) = (means[r], invs[r]);
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for j in 0..cols {
            let xhat = (xr[j] - mu) * inv;
            let g = dyr[j] * weight[j];
            s1 += g;
            s2 += g * xhat;
            dw[j] += dyr[j] * xhat;
            db[j] += dyr[j];
        }
        for j in 0..cols {
            let xhat = (xr[j] - mu) * inv;
            let g = dyr[j] * weight[j];
            dxr[j] = inv * (g - s1 / n - xhat * s2 / n);
        }
    }
    (dx, dw, db)
}

/// Depthwise causal convolution over `seqs` stacked sequences of `n` rows.
///
/// `x` is `[seqs * n, c]`, `kernel` is `[c, k]`; output row `t` only sees
/// rows `t - k + 1 ..= t` of its own sequence (zero left padding).
pub fn conv1d_causal<T: Float>(x: &[T], kernel: &[T], seqs: usize, c: usize, k: usize) -> Vec<T> {
    let n = x.len() / (seqs * c).max(1);
    let mut out = vec![T::zero(); x.len()];
    for q in 0..seqs {
        for t in 0..n {
            let row = (q * n + t) * c;
            for j in 0..k {
                let Some(src_t) = (t + j + 1).checked_sub(k) else {
                    continue;
                };
                let src = (q * n + src_t) * c;
                for ch in 0..c {
                    out[row + ch] += kernel[ch * k + j] * x[src + ch];
                }
            }
        }
    }
    out
}

/// Gradients of [`conv1d_causal`]: `(dx, dkernel)`.
pub fn conv1d_causal_backward<T: Float>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    seqs: usize,
    c: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let n = x.len() / (seqs * c).max(1);
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    for q in 0..seqs {
        for t in 0..n {
            let row = (q * n + t) * c;
            for j in 0..k {
                let Some(src_t) = (t + j + 1).checked_sub(k) else {
                    continue;
                };
                let src = (q * n + src_t) * c;
                for ch in 0..c {
                    dx[src + ch] += kernel[ch * k + j] * dy[row + ch];
                    dk[ch * k + j] += dy[row + ch] * x[src + ch];
                }
            }
        }
    }
    (dx, dk)
}

/// Inputs of the selective scan
/// `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t u_t`, `y_t = C_t · h_t + D ⊙ u_t`.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    /// `[rows, d]`
    pub u: &'a [T],
    /// `[rows, d]`, positive step sizes
    pub delta: &'a [T],
    /// `[d, s]`, negative decay rates
    pub a: &'a [T],
    /// `[rows, s]`
    pub b: &'a [T],
    /// `[rows, s]`
    pub c: &'a [T],
    /// `[d]`
    pub dskip: &'a [T],
}

pub struct ScanOutput<T> {
    pub y: Vec<T>,
    /// State after the final row of the last sequence, `[d, s]`.
    pub last_state: Vec<T>,
    /// Post-update states for every row, `[rows, d, s]`, when requested.
    pub states: Option<Vec<T>>,
}

/// Sequential selective scan over `seqs` stacked sequences.
///
/// Every sequence starts from `h0` (zeros when `None`).
pub fn selective_scan<T: Float>(
    inp: ScanInputs<'_, T>,
    seqs: usize,
    d: usize,
    s: usize,
    h0: Option<&[T]>,
    keep_states: bool,
) -> ScanOutput<T> {
    let rows = inp.u.len() / d;
    let n = rows / seqs.max(1);
    let mut y = vec![T::zero(); rows * d];
    let mut states = keep_states.then(|| vec![T::zero(); rows * d * s]);
    let mut h = vec![T::zero(); d * s];
    for q in 0..seqs {
        match h0 {
            Some(init) => h.copy_from_slice(init),
            None => h.iter_mut().for_each(|v| *v = T::zero()),
        }
        for t in 0..n {
            let r = q * n + t;
            let (br, cr) = (&inp.b[r * s..(r + 1) * s], &inp.c[r * s..(r + 1) * s]);
            for ch in 0..d {
                let dt = inp.delta[r * d + ch];
                let uu = inp.u[r * d + ch];
                let du = dt * uu;
                let hs = &mut h[ch * s..(ch + 1) * s];
                let ar = &inp.a[ch * s..(ch + 1) * s];
                let mut acc = T::zero();
                for st in 0..s {
                    hs[st] = (dt * ar[st]).exp() * hs[st] + du * br[st];
                    acc += cr[st] * hs[st];
                }
                y[r * d + ch] = acc + inp.dskip[ch] * uu;
            }
            if let Some(st) = states.as_mut() {
                st[r * d * s..(r + 1) * d * s].copy_from_slice(&h);
            }
        }
    }
    ScanOutput {
        y,
        last_state: h,
        states,
    }
}

pub struct ScanGrads<T> {
    pub du: Vec<T>,
    pub ddelta: Vec<T>,
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub ddskip: Vec<T>,
}

/// Reverse pass of [`selective_scan`] from zero initial state, given the
/// stored post-update states.
pub fn selective_scan_backward<T: Float>(
    inp: ScanInputs<'_, T>,
    states: &[T],
    dy: &[T],
    seqs: usize,
    d: usize,
    s: usize,
) -> ScanGrads<T> {
    let rows = inp.u.len() / d;
    let n = rows / seqs.max(1);
    let mut g = ScanGrads {
        du: vec![T::zero(); rows * d],
        ddelta: vec![T::zero(); rows * d],
        da: vec![T::zero(); d * s],
        db: vec![T::zero(); rows * s],
        dc: vec![T::zero(); rows * s],
        ddskip: vec![T::zero(); d],
    };
    let mut dh = vec![T::zero(); d * s];
    for q in 0..seqs {
        dh.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..n).rev() {
            let r = q * n + t;
            for ch in 0..d {
                let dyv = dy[r * d + ch];
                let dt = inp.delta[r * d + ch];
                let uu = inp.u[r * d + ch];
                g.ddskip[ch] += dyv * uu;
                let mut du = dyv * inp.dskip[ch];
                let mut ddt = T::zero();
                for st in 0..s {
                    let idx = ch * s + st;
                    let h_t = states[r * d * s + idx];
                    g.dc[r * s + st] += dyv * h_t;
                    let gh = dh[idx] + dyv * inp.c[r * s + st];
                    let av = inp.a[idx];
                    let decay = (dt * av).exp();
                    let h_prev = if t > 0 {
                        states[(r - 1) * d * s + idx]
                    } else {
                        T::zero()
                    };
                    let gd = gh * h_prev * decay;
                    ddt += gd * av;
                    g.da[idx] += gd * dt;
                    let bv = inp.b[r * s + st];
                    ddt += gh * bv * uu;
                    g.db[r * s + st] += gh * dt * uu;
                    du += gh * dt * bv;
                    dh[idx] = gh * decay;
                }
                g.du[r * d + ch] += du;
                g.ddelta[r * d + ch] += ddt;
            }
        }
    }
    g
}

/// Geometry of a causal (optionally windowed) grouped-query attention call.
///
/// Queries are `[seqs * n_q, q_heads * dk]`, keys `[seqs * n_k, kv_heads * dk]`,
/// values `[seqs * n_k, kv_heads * dv]`. Query `i` sits at absolute position
/// `q_offset + i`; key `j` at position `j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnDims {
    pub seqs: usize,
    pub n_q: usize,
    pub n_k: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub dk: usize,
    pub dv: usize,
    pub scale: f64,
    pub window: Option<usize>,
    pub q_offset: usize,
}

impl AttnDims {
    /// Inclusive key range visible to query `i`.
    #[inline]
    pub fn key_range(&self, i: usize) -> (usize, usize) {
        let pos = self.q_offset + i;
        let hi = pos.min(self.n_k.saturating_sub(1));
        let lo = match self.window {
            Some(w) => (pos + 1).saturating_sub(w),
            None => 0,
        };
        (lo, hi)
    }

    fn group(&self) -> usize {
        self.q_heads / self.kv_heads
    }
}

/// Attention forward. Returns the output and the per-row log-sum-exp
/// (`[seqs, q_heads, n_q]`) needed by the reverse pass.
pub fn attention_forward<T: Float>(q: &[T], k: &[T], v: &[T], dims: &AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        seqs,
        n_q,
        n_k,
        q_heads,
        kv_heads,
        dk,
        dv,
        ..
    } = *dims;
    let scale = T::lit(dims.scale);
    let group = dims.group();
    let mut out = vec![T::zero(); seqs * n_q * q_heads * dv];
    let mut lse = vec![T::zero(); seqs * q_heads * n_q];
    let mut scores = vec![T::zero(); n_k];
    for sq in 0..seqs {
        for h in 0..q_heads {
            let kh = h / group;
            for i in 0..n_q {
                let (lo, hi) = dims.key_range(i);
                let qrow = &q[((sq * n_q + i) * q_heads + h) * dk..][..dk];
                let mut mx = T::neg_infinity();
                for j in lo..=hi {
                    let krow = &k[((sq * n_k + j) * kv_heads + kh) * dk..][..dk];
                    let sc = dot(qrow, krow) * scale;
                    scores[j] = sc;
                    if sc > mx {
                        mx = sc;
                    }
                }
                let mut sum = T::zero();
                for sc in &mut scores[lo..=hi] {
                    *sc = (*sc - mx).exp();
                    sum += *sc;
                }
                let orow = &mut out[((sq * n_q + i) * q_heads + h) * dv..][..dv];
                for j in lo..=hi {
                    let p = scores[j] / sum;
                    let vrow = &v[((sq * n_k + j) * kv_heads + kh) * dv..][..dv];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
                lse[(sq * q_heads + h) * n_q + i] = mx + sum.ln();
            }
        }
    }
    (out, lse)
}

/// Reverse pass of [`attention_forward`], recomputing probabilities from the
/// stored log-sum-exp. Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    out: &[T],
    lse: &[T],
    dout: &[T],
    dims: &AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims {
        seqs,
        n_q,
        n_k,
        q_heads,
        kv_heads,
        dk,
        dv,
        ..
    } = *dims;
    let scale = T::lit(dims.scale);
    let group = dims.group();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    for sq in 0..seqs {
        for h in 0..q_heads {
            let kh = h / group;
            for i in 0..n_q {
                let (lo, hi) = dims.key_range(i);
                let qoff = ((sq * n_q + i) * q_heads + h) * dk;
                let ooff = ((sq * n_q + i) * q_heads + h) * dv;
                let do_row = &dout[ooff..ooff + dv];
                let delta_i = dot(do_row, &out[ooff..ooff + dv]);
                let l = lse[(sq * q_heads + h) * n_q + i];
                for j in lo..=hi {
                    let koff = ((sq * n_k + j) * kv_heads + kh) * dk;
                    let voff = ((sq * n_k + j) * kv_heads + kh) * dv;
                    let p = (dot(&q[qoff..qoff + dk], &k[koff..koff + dk]) * scale - l).exp();
                    let dp = dot(do_row, &v[voff..voff + dv]);
                    for c in 0..dv {
                        gv[voff + c] += p * do_row[c];
                    }
                    let ds = p * (dp - delta_i) * scale;
                    for c in 0..dk {
                        gq[qoff + c] += ds * k[koff + c];
                        gk[koff + c] += ds * q[qoff + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Rotary position embedding (half-split layout) applied in place to
/// `[seqs * n, heads * hd]`; row `t` of each sequence sits at `offset + t`.
/// `inverse` applies the transpose rotation (used for gradients).
#[allow(clippy::too_many_arguments)]
pub fn rope_in_place<T: Float>(
    x: &mut [T],
    seqs: usize,
    heads: usize,
    hd: usize,
    offset: usize,
    base: f64,
    inverse: bool,
) {
    let half = hd / 2;
    let width = heads * hd;
    let n = x.len() / (seqs * width).max(1);
    for (r, row) in x.chunks_mut(width).enumerate() {
        let pos = (offset + r % n.max(1)) as f64;
        for i in 0..half {
            let theta = pos * base.powf(-2.0 * i as f64 / hd as f64);
            let (sin, cos) = theta.sin_cos();
            let sin = T::lit(if inverse { -sin } else { sin });
            let cos = T::lit(cos);
            for h in 0..heads {
                let a = row[h * hd + i];
                let b = row[h * hd + half + i];
                row[h * hd + i] = a * cos - b * sin;
                row[h * hd + half + i] = a * sin + b * cos;
            }
        }
    }
}

/// Weighted mean cross-entropy of `[rows, vocab]` logits. Returns the loss
/// and the row softmax probabilities.
pub fn cross_entropy_forward<T: Float>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    weights: &[T],
) -> (T, Vec<T>) {
    let probs = softmax_rows(logits, vocab, None).expect("unmasked softmax");
    let total: T = weights.iter().copied().sum();
    let mut loss = T::zero();
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if w != T::zero() {
            loss -= w * probs[r * vocab + t].max(T::min_positive_value()).ln();
        }
    }
    (loss / total.max(T::min_positive_value()), probs)
}
