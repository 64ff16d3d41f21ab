//! Causal grouped-query attention in sliding-window, full and cross modes,
//! plus Differential Attention.
//!
//! Projection layout for Differential Attention: the first half of the
//! query (key) columns holds the first query (key) group for every head, the
//! second half the second group; values keep the full head width.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, AttnDims};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    Sliding,
    Full,
    /// Queries only; keys and values come from an earlier layer.
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnGeometry {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Number of visible keys (including the query's own position) in
    /// sliding mode.
    pub window: Option<usize>,
    pub logit_scale: f64,
    /// RoPE base; `None` for no positional encoding.
    pub rope_base: Option<f64>,
}

impl AttnGeometry {
    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    fn validate(&self, mode: AttnMode) -> Result<()> {
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 || self.head_dim == 0 {
            return Err(Error::Config(format!(
                "{} query heads cannot share {} kv heads",
                self.n_heads, self.n_kv_heads
            )));
        }
        if mode == AttnMode::Sliding && !matches!(self.window, Some(w) if w >= 1) {
            return Err(Error::Config("sliding attention needs a window ≥ 1".into()));
        }
        if self.rope_base.is_some() && self.head_dim % 2 != 0 {
            return Err(Error::Config("rotary embedding needs an even head_dim".into()));
        }
        Ok(())
    }

    fn window_for(&self, mode: AttnMode) -> Option<usize> {
        match mode {
            AttnMode::Sliding => self.window,
            _ => None,
        }
    }
}

/// `q_proj [H·hd, d_m]`, `k_proj`/`v_proj [H_kv·hd, d_m]` (absent for cross
/// attention), `o_proj [d_m, H·hd]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<P> {
    pub q_proj: P,
    pub k_proj: Option<P>,
    pub v_proj: Option<P>,
    pub o_proj: P,
    pub geom: AttnGeometry,
}

impl<P> AttnParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> AttnParams<Q> {
        AttnParams {
            q_proj: f(&self.q_proj),
            k_proj: self.k_proj.as_ref().map(&mut f),
            v_proj: self.v_proj.as_ref().map(&mut f),
            o_proj: f(&self.o_proj),
            geom: self.geom,
        }
    }
}

/// Differential Attention: `λ_* [head_dim]`, `norm_weight [H·hd]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffAttnParams<P> {
    pub attn: AttnParams<P>,
    pub lambda_q1: P,
    pub lambda_k1: P,
    pub lambda_q2: P,
    pub lambda_k2: P,
    pub norm_weight: P,
    pub lambda_init: f64,
    pub norm_eps: f64,
}

impl<P> DiffAttnParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> DiffAttnParams<Q> {
        DiffAttnParams {
            attn: self.attn.map(&mut f),
            lambda_q1: f(&self.lambda_q1),
            lambda_k1: f(&self.lambda_k1),
            lambda_q2: f(&self.lambda_q2),
            lambda_k2: f(&self.lambda_k2),
            norm_weight: f(&self.norm_weight),
            lambda_init: self.lambda_init,
            norm_eps: self.norm_eps,
        }
    }
}

/// `0.8 − 0.6·exp(−0.3·l)` for 1-based depth index `l`.
pub fn lambda_init(l: usize) -> f64 {
    0.8 - 0.6 * (-0.3 * l as f64).exp()
}

/// Recorded attention outputs: the layer output, the pre-`o_proj` head
/// outputs (a memory tap), and the keys/values this layer produced.
#[derive(Clone, Copy, Debug)]
pub struct AttnGraphOut {
    pub out: Var,
    pub pre_o: Var,
    pub kv: Option<(Var, Var)>,
}

/// Eager counterpart of [`AttnGraphOut`].
#[derive(Clone, Debug)]
pub struct AttnOutput<T> {
    pub out: Tensor<T>,
    pub pre_o: Tensor<T>,
    pub kv: Option<(Tensor<T>, Tensor<T>)>,
}

fn graph_qkv<T: Float>(
    g: &mut Graph<T>,
    p: &AttnParams<Var>,
    x: Var,
    seqs: usize,
    mode: AttnMode,
    shared: Option<(Var, Var)>,
    split_halves: bool,
) -> Result<(Var, Option<(Var, Var)>, Var, Var)> {
    p.geom.validate(mode)?;
    let q = g.linear(x, p.q_proj)?;
    let (k, v, own) = match mode {
        AttnMode::Cross => {
            let (k, v) = shared.ok_or_else(|| {
                Error::Config("cross attention requires a shared key/value cache".into())
            })?;
            (k, v, None)
        }
        _ => {
            let (kp, vp) = match (p.k_proj, p.v_proj) {
                (Some(k), Some(v)) => (k, v),
                _ => return Err(Error::Config("self attention needs k_proj and v_proj".into())),
            };
            let k = g.linear(x, kp)?;
            let v = g.linear(x, vp)?;
            (k, v, Some((k, v)))
        }
    };
    let (q, k) = match p.geom.rope_base {
        Some(base) => {
            let geo = &p.geom;
            let (hq, hk, hd) = if split_halves {
                (2 * geo.n_heads, 2 * geo.n_kv_heads, geo.head_dim / 2)
            } else {
                (geo.n_heads, geo.n_kv_heads, geo.head_dim)
            };
            // Shared keys arrive already rotated.
            let k = if own.is_some() { g.rope(k, seqs, hk, hd, base)? } else { k };
            (g.rope(q, seqs, hq, hd, base)?, k)
        }
        None => (q, k),
    };
    // Keys produced by this layer are returned post-rotation, as cached.
    let own = own.map(|(_, v)| (k, v));
    Ok((q, own, k, v))
}

fn dims_for<T: Float>(
    g: &Graph<T>,
    geom: &AttnGeometry,
    q: Var,
    k: Var,
    seqs: usize,
    mode: AttnMode,
    dk: usize,
) -> Result<AttnDims> {
    let (nq_rows, nk_rows) = (g.value(q).rows(), g.value(k).rows());
    if seqs == 0 || nq_rows % seqs != 0 || nk_rows % seqs != 0 {
        return Err(Error::shape("attention", format!("{nq_rows} query rows over {seqs} sequences")));
    }
    let n_q = nq_rows / seqs;
    let n_k = nk_rows / seqs;
    if n_q == 0 {
        return Err(Error::Empty("attention input"));
    }
    if n_k < n_q {
        return Err(Error::shape("attention", format!("{n_q} queries but only {n_k} keys")));
    }
    Ok(AttnDims {
        seqs,
        n_q,
        n_k,
        q_heads: geom.n_heads,
        kv_heads: geom.n_kv_heads,
        dk,
        dv: geom.head_dim,
        scale: geom.logit_scale,
        window: geom.window_for(mode),
        q_offset: n_k - n_q,
    })
}

impl AttnParams<Var> {
    /// Graph forward over `seqs` stacked sequences of equal length. Cross
    /// mode reads `shared` keys/values (one row per position).
    pub fn forward_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        seqs: usize,
        mode: AttnMode,
        shared: Option<(Var, Var)>,
    ) -> Result<AttnGraphOut> {
        let (q, kv, k, v) = graph_qkv(g, self, x, seqs, mode, shared, false)?;
        let dims = dims_for(g, &self.geom, q, k, seqs, mode, self.geom.head_dim)?;
        let pre_o = g.attention(q, k, v, dims)?;
        let out = g.linear(pre_o, self.o_proj)?;
        Ok(AttnGraphOut { out, pre_o, kv })
    }
}

impl DiffAttnParams<Var> {
    /// Effective per-layer `λ` as a scalar node.
    pub fn lambda_graph<T: Float>(&self, g: &mut Graph<T>) -> Result<Var> {
        let a = g.mul(self.lambda_q1, self.lambda_k1)?;
        let a = g.sum_all(a);
        let a = g.exp(a);
        let b = g.mul(self.lambda_q2, self.lambda_k2)?;
        let b = g.sum_all(b);
        let b = g.exp(b);
        let d = g.sub(a, b)?;
        Ok(g.add_scalar(d, T::lit(self.lambda_init)))
    }

    pub fn forward_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        seqs: usize,
        mode: AttnMode,
        shared: Option<(Var, Var)>,
    ) -> Result<AttnGraphOut> {
        let geom = self.attn.geom;
        check_diff_geometry(&geom)?;
        let (q, kv, k, v) = graph_qkv(g, &self.attn, x, seqs, mode, shared, true)?;
        let (qh, kh) = (geom.q_width() / 2, geom.kv_width() / 2);
        let q1 = g.slice_cols(q, 0, qh)?;
        let q2 = g.slice_cols(q, qh, qh)?;
        let k1 = g.slice_cols(k, 0, kh)?;
        let k2 = g.slice_cols(k, kh, kh)?;
        let dims = dims_for(g, &geom, q, k, seqs, mode, geom.head_dim / 2)?;
        let a1 = g.attention(q1, k1, v, dims)?;
        let a2 = g.attention(q2, k2, v, dims)?;
        let lam = self.lambda_graph(g)?;
        let a2 = g.mul(a2, lam)?;
        let diff = g.sub(a1, a2)?;
        let pre_o = g.rmsnorm_grouped(diff, self.norm_weight, geom.head_dim, T::lit(self.norm_eps))?;
        let out = g.linear(pre_o, self.attn.o_proj)?;
        Ok(AttnGraphOut { out, pre_o, kv })
    }
}

fn check_diff_geometry(geom: &AttnGeometry) -> Result<()> {
    if geom.head_dim % 2 != 0 {
        return Err(Error::Config("differential attention needs an even head_dim".into()));
    }
    if geom.rope_base.is_some() && geom.head_dim % 4 != 0 {
        return Err(Error::Config(
            "differential attention with rotary embedding needs head_dim divisible by 4".into(),
        ));
    }
    Ok(())
}

fn bind<T: Float>(g: &mut Graph<T>, t: &&Tensor<T>) -> Var {
    g.input((*t).clone())
}

fn eager<T: Float>(
    g: &mut Graph<T>,
    r: AttnGraphOut,
) -> AttnOutput<T> {
    AttnOutput {
        out: g.value(r.out).clone(),
        pre_o: g.value(r.pre_o).clone(),
        kv: r.kv.map(|(k, v)| (g.value(k).clone(), g.value(v).clone())),
    }
}

/// Eager whole-sequence attention. `shared` supplies keys/values for cross
/// mode and is ignored otherwise.
pub fn attention_forward<T: Float>(
    x: &Tensor<T>,
    p: &AttnParams<&Tensor<T>>,
    mode: AttnMode,
    shared: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<AttnOutput<T>> {
    super::require_rows(x, "attention input")?;
    let mut g = Graph::new();
    let pv = p.map(|t| bind(&mut g, t));
    let xv = g.input(x.clone());
    let sh = shared.map(|(k, v)| (g.input(k.clone()), g.input(v.clone())));
    let r = pv.forward_graph(&mut g, xv, 1, mode, sh)?;
    Ok(eager(&mut g, r))
}

/// Eager whole-sequence Differential Attention.
pub fn diff_attention_forward<T: Float>(
    x: &Tensor<T>,
    p: &DiffAttnParams<&Tensor<T>>,
    mode: AttnMode,
    shared: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<AttnOutput<T>> {
    super::require_rows(x, "attention input")?;
    let mut g = Graph::new();
    let pv = p.map(|t| bind(&mut g, t));
    let xv = g.input(x.clone());
    let sh = shared.map(|(k, v)| (g.input(k.clone()), g.input(v.clone())));
    let r = pv.forward_graph(&mut g, xv, 1, mode, sh)?;
    Ok(eager(&mut g, r))
}

/// Key/value cache for decoding. With a capacity it is a ring buffer that
/// keeps the most recent `capacity` positions; slot order is irrelevant
/// because keys are stored already position-encoded.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub k_width: usize,
    pub v_width: usize,
    pub capacity: Option<usize>,
    /// Positions ever appended.
    pub pushed: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(k_width: usize, v_width: usize, capacity: Option<usize>) -> Self {
        Self {
            k: Vec::new(),
            v: Vec::new(),
            k_width,
            v_width,
            capacity,
            pushed: 0,
        }
    }

    /// Cache holding the tail of prefilled keys/values `[n, width]`.
    pub fn from_prefill(k: &Tensor<T>, v: &Tensor<T>, capacity: Option<usize>) -> Result<Self> {
        if k.rows() != v.rows() {
            return Err(Error::shape("kv_cache", "key and value rows differ"));
        }
        let mut c = Self::new(k.cols(), v.cols(), capacity);
        for r in 0..k.rows() {
            c.push(k.row(r), v.row(r))?;
        }
        Ok(c)
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.k.len() / self.k_width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn floats(&self) -> usize {
        self.k.len() + self.v.len()
    }

    pub fn push(&mut self, k: &[T], v: &[T]) -> Result<()> {
        if k.len() != self.k_width || v.len() != self.v_width {
            return Err(Error::shape("kv_cache", "row width mismatch"));
        }
        match self.capacity {
            Some(cap) if self.len() >= cap => {
                let slot = self.pushed % cap;
                self.k[slot * self.k_width..][..self.k_width].copy_from_slice(k);
                self.v[slot * self.v_width..][..self.v_width].copy_from_slice(v);
            }
            _ => {
                self.k.extend_from_slice(k);
                self.v.extend_from_slice(v);
            }
        }
        self.pushed += 1;
        Ok(())
    }

    /// Columns `start..start + len` of every cached key row.
    fn key_cols(&self, start: usize, len: usize) -> Vec<T> {
        self.k
            .chunks(self.k_width)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect()
    }
}

fn project_row<T: Float>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (out, inp) = (w.rows(), w.cols());
    let mut y = vec![T::zero(); out];
    kernels::gemm(false, true, 1, inp, out, x, w.data(), &mut y, false);
    y
}

fn attend_one<T: Float>(q: &[T], k: &[T], v: &[T], n_k: usize, geom: &AttnGeometry, dk: usize) -> Vec<T> {
    let dims = AttnDims {
        seqs: 1,
        n_q: 1,
        n_k,
        q_heads: geom.n_heads,
        kv_heads: geom.n_kv_heads,
        dk,
        dv: geom.head_dim,
        scale: geom.logit_scale,
        window: None,
        q_offset: n_k - 1,
    };
    kernels::attention_forward(q, k, v, &dims).0
}

impl<T: Float> AttnParams<&Tensor<T>> {
    /// Queries, and for self modes the new key/value row, for one token at
    /// absolute position `pos`; `halves` selects the Differential layout.
    fn step_qkv(&self, x_t: &[T], pos: usize, mode: AttnMode, halves: bool) -> Result<(Vec<T>, Option<(Vec<T>, Vec<T>)>)> {
        self.geom.validate(mode)?;
        if x_t.len() != self.q_proj.cols() {
            return Err(Error::shape("attention_step", "input width mismatch"));
        }
        let g = &self.geom;
        let (heads_q, heads_k, hd) = if halves {
            (2 * g.n_heads, 2 * g.n_kv_heads, g.head_dim / 2)
        } else {
            (g.n_heads, g.n_kv_heads, g.head_dim)
        };
        let mut q = project_row(x_t, self.q_proj);
        let kv = match mode {
            AttnMode::Cross => None,
            _ => {
                let (kp, vp) = match (self.k_proj, self.v_proj) {
                    (Some(k), Some(v)) => (k, v),
                    _ => return Err(Error::Config("self attention needs k_proj and v_proj".into())),
                };
                let mut k = project_row(x_t, kp);
                if let Some(base) = g.rope_base {
                    kernels::rope_in_place(&mut k, 1, heads_k, hd, pos, base, false);
                }
                Some((k, project_row(x_t, vp)))
            }
        };
        if let Some(base) = g.rope_base {
            kernels::rope_in_place(&mut q, 1, heads_q, hd, pos, base, false);
        }
        Ok((q, kv))
    }

    /// Position-encoded keys and values `[n, kv_width]` of a whole sequence
    /// starting at position 0, in the layout decode caches store.
    pub fn project_kv(&self, x: &Tensor<T>, halves: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        let (kp, vp) = match (self.k_proj, self.v_proj) {
            (Some(k), Some(v)) => (k, v),
            _ => return Err(Error::Config("layer has no key/value projections".into())),
        };
        let g = &self.geom;
        let mut k = kernels::linear(x, kp)?;
        if let Some(base) = g.rope_base {
            let (heads, hd) = if halves {
                (2 * g.n_kv_heads, g.head_dim / 2)
            } else {
                (g.n_kv_heads, g.head_dim)
            };
            kernels::rope_in_place(k.data_mut(), 1, heads, hd, 0, base, false);
        }
        Ok((k, kernels::linear(x, vp)?))
    }

    /// One decode step. Self modes append this token's keys/values to
    /// `cache` before attending; cross mode only reads `cache`. Returns
    /// `(output, pre_o)`.
    pub fn step(&self, x_t: &[T], pos: usize, mode: AttnMode, cache: &mut KvCache<T>) -> Result<(Vec<T>, Vec<T>)> {
        let (q, kv) = self.step_qkv(x_t, pos, mode, false)?;
        if let Some((k, v)) = kv {
            cache.push(&k, &v)?;
        }
        self.attend_cached(&q, cache)
    }

    /// Cross-attention step over a cache that is only read.
    pub fn step_cross(&self, x_t: &[T], pos: usize, cache: &KvCache<T>) -> Result<(Vec<T>, Vec<T>)> {
        let (q, _) = self.step_qkv(x_t, pos, AttnMode::Cross, false)?;
        self.attend_cached(&q, cache)
    }

    fn attend_cached(&self, q: &[T], cache: &KvCache<T>) -> Result<(Vec<T>, Vec<T>)> {
        if cache.is_empty() {
            return Err(Error::StateMismatch("attention over an empty cache".into()));
        }
        if cache.k_width != self.geom.kv_width() || cache.v_width != self.geom.kv_width() {
            return Err(Error::StateMismatch("cache width does not match attention geometry".into()));
        }
        let pre = attend_one(q, &cache.k, &cache.v, cache.len(), &self.geom, self.geom.head_dim);
        Ok((project_row(&pre, self.o_proj), pre))
    }
}

impl<T: Float> DiffAttnParams<&Tensor<T>> {
    pub fn lambda(&self) -> f64 {
        let d1 = kernels::dot(self.lambda_q1.data(), self.lambda_k1.data()).as_f64();
        let d2 = kernels::dot(self.lambda_q2.data(), self.lambda_k2.data()).as_f64();
        d1.exp() - d2.exp() + self.lambda_init
    }

    pub fn step(&self, x_t: &[T], pos: usize, mode: AttnMode, cache: &mut KvCache<T>) -> Result<(Vec<T>, Vec<T>)> {
        check_diff_geometry(&self.attn.geom)?;
        let (q, kv) = self.attn.step_qkv(x_t, pos, mode, true)?;
        if let Some((k, v)) = kv {
            cache.push(&k, &v)?;
        }
        self.attend_cached(&q, cache)
    }

    pub fn step_cross(&self, x_t: &[T], pos: usize, cache: &KvCache<T>) -> Result<(Vec<T>, Vec<T>)> {
        let (q, _) = self.attn.step_qkv(x_t, pos, AttnMode::Cross, true)?;
        self.attend_cached(&q, cache)
    }

    fn attend_cached(&self, q: &[T], cache: &KvCache<T>) -> Result<(Vec<T>, Vec<T>)> {
        let geom = &self.attn.geom;
        if cache.is_empty() {
            return Err(Error::StateMismatch("attention over an empty cache".into()));
        }
        if cache.k_width != geom.kv_width() || cache.v_width != geom.kv_width() {
            return Err(Error::StateMismatch("cache width does not match attention geometry".into()));
        }
        let (qh, kh, hd) = (geom.q_width() / 2, geom.kv_width() / 2, geom.head_dim);
        let n = cache.len();
        let a1 = attend_one(&q[..qh], &cache.key_cols(0, kh), &cache.v, n, geom, hd / 2);
        let a2 = attend_one(&q[qh..], &cache.key_cols(kh, kh), &cache.v, n, geom, hd / 2);
        let lam = T::lit(self.lambda());
        let diff: Vec<T> = a1.iter().zip(&a2).map(|(&a, &b)| a - lam * b).collect();
        let (pre, _) = kernels::rmsnorm_forward(&diff, self.norm_weight.data(), hd, T::lit(self.norm_eps));
        Ok((project_row(&pre, self.attn.o_proj), pre))
    }
}
