//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order together with the
//! values it needs for the reverse pass. [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients into every leaf created with
//! [`Graph::param`]. Gradients accumulate across calls until
//! [`Graph::zero_grad`].

use super::kernels::{self, AttnDims, ScanInputs};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        w: Var,
        group: usize,
        inv: Vec<T>,
    },
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        means: Vec<T>,
        invs: Vec<T>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        seqs: usize,
    },
    Scan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        dskip: Var,
        seqs: usize,
        states: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        lse: Vec<T>,
    },
    Rope {
        x: Var,
        seqs: usize,
        heads: usize,
        hd: usize,
        base: f64,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    RepeatEach {
        x: Var,
        times: usize,
    },
    SumLast(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward/backward pass.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    let bn: usize = b.iter().product();
    bn == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

fn reduce_generic<T: Float>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with [`Graph::param`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x · wᵀ` with `w` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Linear(x, w), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::shape(
                name,
                format!("cannot broadcast {:?} onto {:?}", bv.shape(), av.shape()),
            ));
        }
        let bn = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bn]))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    /// `a + b`; `b` may be a scalar or a trailing-dimension suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::silu);
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    /// Softmax over the last dimension. `mask[i] == false` zeroes entry `i`;
    /// a row with no unmasked entry is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of {} for {:?}", m.len(), x.shape()),
                ));
            }
        }
        if x.cols() == 0 {
            return Err(Error::shape("softmax", "empty last dimension"));
        }
        let data = kernels::softmax_rows(x.data(), x.cols(), mask)?;
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// RMSNorm over contiguous groups of `group` elements (the whole row when
    /// `group == weight.len()`).
    pub fn rmsnorm_grouped(&mut self, x: Var, w: Var, group: usize, eps: T) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 1 || xv.cols() != wv.numel() || group == 0 || wv.numel() % group != 0
        {
            return Err(Error::shape(
                "rmsnorm",
                format!("input {:?}, weight {:?}, group {group}", xv.shape(), wv.shape()),
            ));
        }
        let (data, inv) = kernels::rmsnorm_forward(xv.data(), wv.data(), group, eps);
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::RmsNorm { x, w, group, inv }, rg))
    }

    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: T) -> Result<Var> {
        let cols = self.value(w).numel();
        self.rmsnorm_grouped(x, w, cols, eps)
    }

    pub fn layernorm(&mut self, x: Var, w: Var, b: Var, eps: T) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.numel() || wv.numel() != bv.numel() {
            return Err(Error::shape(
                "layernorm",
                format!("input {:?}, weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (data, means, invs) = kernels::layernorm_forward(xv.data(), wv.data(), bv.data(), eps);
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                w,
                b,
                means,
                invs,
            },
            rg,
        ))
    }

    /// Depthwise causal convolution; `x` is `[seqs * n, c]`, `kernel` `[c, k]`.
    pub fn conv1d_causal(&mut self, x: Var, kernel: Var, seqs: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if kv.shape().len() != 2 || kv.shape()[0] != xv.cols() || kv.shape()[1] == 0 {
            return Err(Error::shape(
                "conv1d_causal",
                format!("input {:?}, kernel {:?}", xv.shape(), kv.shape()),
            ));
        }
        if seqs == 0 || xv.rows() % seqs != 0 {
            return Err(Error::shape("conv1d_causal", "rows not divisible by seqs"));
        }
        let (c, k) = (kv.shape()[0], kv.shape()[1]);
        let data = kernels::conv1d_causal(xv.data(), kv.data(), seqs, c, k);
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(out, Op::Conv1d { x, kernel, seqs }, rg))
    }

    /// Selective scan from zero state; see [`kernels::selective_scan`].
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        dskip: Var,
        seqs: usize,
    ) -> Result<Var> {
        let (uv, dv, av, bv, cv, sv) = (
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(dskip),
        );
        let (rows, d) = (uv.rows(), uv.cols());
        let s = av.cols();
        let ok = dv.shape() == uv.shape()
            && av.shape() == [d, s]
            && bv.shape() == [rows, s]
            && cv.shape() == [rows, s]
            && sv.shape() == [d]
            && seqs > 0
            && rows % seqs == 0;
        if !ok {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "u {:?} delta {:?} A {:?} B {:?} C {:?} D {:?}",
                    uv.shape(),
                    dv.shape(),
                    av.shape(),
                    bv.shape(),
                    cv.shape(),
                    sv.shape()
                ),
            ));
        }
        let inp = ScanInputs {
            u: uv.data(),
            delta: dv.data(),
            a: av.data(),
            b: bv.data(),
            c: cv.data(),
            dskip: sv.data(),
        };
        let out = kernels::selective_scan(inp, seqs, d, s, None, true);
        let value = Tensor::from_parts(vec![rows, d], out.y);
        let rg = [u, delta, a, b, c, dskip].iter().any(|&v| self.rg(v));
        Ok(self.push(
            value,
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                dskip,
                seqs,
                states: out.states.unwrap_or_default(),
            },
            rg,
        ))
    }

    /// Causal grouped-query attention; see [`AttnDims`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let ok = dims.kv_heads > 0
            && dims.q_heads % dims.kv_heads == 0
            && qv.numel() == dims.seqs * dims.n_q * dims.q_heads * dims.dk
            && kv.numel() == dims.seqs * dims.n_k * dims.kv_heads * dims.dk
            && vv.numel() == dims.seqs * dims.n_k * dims.kv_heads * dims.dv
            && dims.window.map_or(true, |w| w >= 1)
            && dims.q_offset + dims.n_q <= dims.n_k;
        if !ok {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} with {dims:?}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            ));
        }
        let (out, lse) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), &dims);
        let value = Tensor::from_parts(vec![dims.seqs * dims.n_q, dims.q_heads * dims.dv], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(value, Op::Attention { q, k, v, dims, lse }, rg))
    }

    /// Rotary embedding over `[seqs * n, heads * hd]` from position 0.
    pub fn rope(&mut self, x: Var, seqs: usize, heads: usize, hd: usize, base: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != heads * hd || hd % 2 != 0 || seqs == 0 || xv.rows() % seqs != 0 {
            return Err(Error::shape(
                "rope",
                format!("{:?} with {heads} heads of {hd}", xv.shape()),
            ));
        }
        let mut data = xv.data().to_vec();
        kernels::rope_in_place(&mut data, seqs, heads, hd, 0, base, false);
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                seqs,
                heads,
                hd,
                base,
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} of {:?}", xv.shape()),
            ));
        }
        let out = xv.slice_cols(start, len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Gather rows of a 2-D value.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if rows.iter().any(|&r| r >= xv.rows()) {
            return Err(Error::shape("select_rows", "row index out of range"));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), c], data);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Rows of `table` selected by token id.
    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, c) = (tv.rows(), tv.cols());
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::shape(
                "embedding",
                format!("token {bad} outside vocabulary of {v}"),
            ));
        }
        let mut data = Vec::with_capacity(tokens.len() * c);
        for &t in tokens {
            data.extend_from_slice(tv.row(t));
        }
        let out = Tensor::from_parts(vec![tokens.len(), c], data);
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            rg,
        ))
    }

    /// `[.., h] -> [.., h * times]`, repeating each element `times` times.
    pub fn repeat_each(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let data: Vec<T> = xv
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(times))
            .collect();
        let mut shape = xv.shape().to_vec();
        match shape.last_mut() {
            Some(l) => *l *= times,
            None => shape.push(times),
        }
        let out = Tensor::from_parts(shape, data);
        let rg = self.rg(x);
        self.push(out, Op::RepeatEach { x, times }, rg)
    }

    /// Sum over the last dimension.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let data: Vec<T> = xv.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let mut shape = xv.shape().to_vec();
        shape.pop();
        let out = Tensor::from_parts(shape, data);
        let rg = self.rg(x);
        self.push(out, Op::SumLast(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    /// Weighted mean cross-entropy over rows of `[rows, vocab]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        if targets.len() != lv.rows()
            || weights.len() != lv.rows()
            || targets.iter().any(|&t| t >= vocab)
        {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{} targets, {} weights for logits {:?}",
                    targets.len(),
                    weights.len(),
                    lv.shape()
                ),
            ));
        }
        let (loss, probs) = kernels::cross_entropy_forward(lv.data(), vocab, targets, weights);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rshape = self.shape(root);
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(rshape.to_vec()));
        }
        let n = root.0 + 1;
        let mut g: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        g[root.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(gi) = g[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                g[i] = Some(gi);
                continue;
            }
            self.propagate(i, &gi, &mut g);
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        for (i, gi) in g.into_iter().enumerate() {
            let Some(gi) = gi else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(gi),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut g[v.0] {
                Some(a) => a.iter_mut().zip(&delta).for_each(|(x, &y)| *x += y),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(false, true, m, nn, k, gout, bv.data(), &mut da, false);
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * nn];
                    kernels::gemm(true, false, k, m, nn, av.data(), gout, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, k, nn) = (xv.rows(), xv.cols(), wv.shape()[0]);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    kernels::gemm(false, false, m, nn, k, gout, wv.data(), &mut dx, false);
                    acc(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); nn * k];
                    kernels::gemm(true, false, nn, m, k, gout, xv.data(), &mut dw, false);
                    acc(*w, dw);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.rg(*a) {
                    acc(*a, gout.to_vec());
                }
                if self.rg(*b) {
                    let mut db = reduce_generic(gout, val(*b).numel());
                    if neg {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(*b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bn = bv.numel();
                if self.rg(*a) {
                    let da = gout
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * bv.data()[j % bn])
                        .collect();
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let prod: Vec<T> = gout.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    acc(*b, reduce_generic(&prod, bn));
                }
            }
            Op::Scale(a, c) => acc(*a, gout.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(a) => acc(*a, gout.to_vec()),
            Op::Silu(a) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &gv)| gv * kernels::silu_grad(x))
                    .collect();
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                acc(*a, d);
            }
            Op::Exp(a) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&e, &gv)| gv * e)
                    .collect();
                acc(*a, d);
            }
            Op::Softplus(a) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &gv)| gv * kernels::sigmoid(x))
                    .collect();
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let p = node.value.data();
                let c = node.value.cols();
                let mut d = vec![T::zero(); p.len()];
                for ((pr, gr), dr) in p.chunks(c).zip(gout.chunks(c)).zip(d.chunks_mut(c)) {
                    let dotp = kernels::dot(pr, gr);
                    for j in 0..c {
                        dr[j] = pr[j] * (gr[j] - dotp);
                    }
                }
                acc(*a, d);
            }
            Op::RmsNorm { x, w, group, inv } => {
                let (dx, dw) =
                    kernels::rmsnorm_backward(val(*x).data(), val(*w).data(), inv, gout, *group);
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::LayerNorm {
                x,
                w,
                b,
                means,
                invs,
            } => {
                let (dx, dw, db) =
                    kernels::layernorm_backward(val(*x).data(), val(*w).data(), means, invs, gout);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Conv1d { x, kernel, seqs } => {
                let kv = val(*kernel);
                let (c, k) = (kv.shape()[0], kv.shape()[1]);
                let (dx, dk) =
                    kernels::conv1d_causal_backward(val(*x).data(), kv.data(), gout, *seqs, c, k);
                acc(*x, dx);
                acc(*kernel, dk);
            }
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                dskip,
                seqs,
                states,
            } => {
                let uv = val(*u);
                let (d, s) = (uv.cols(), val(*a).cols());
                let inp = ScanInputs {
                    u: uv.data(),
                    delta: val(*delta).data(),
                    a: val(*a).data(),
                    b: val(*b).data(),
                    c: val(*c).data(),
                    dskip: val(*dskip).data(),
                };
                let gr = kernels::selective_scan_backward(inp, states, gout, *seqs, d, s);
                acc(*u, gr.du);
                acc(*delta, gr.ddelta);
                acc(*a, gr.da);
                acc(*b, gr.db);
                acc(*c, gr.dc);
                acc(*dskip, gr.ddskip);
            }
            Op::Attention { q, k, v, dims, lse } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    node.value.data(),
                    lse,
                    gout,
                    dims,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Rope {
                x,
                seqs,
                heads,
                hd,
                base,
            } => {
                let mut d = gout.to_vec();
                kernels::rope_in_place(&mut d, *seqs, *heads, *hd, 0, *base, true);
                acc(*x, d);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let len = node.value.cols();
                let mut d = vec![T::zero(); r * c];
                for row in 0..r {
                    d[row * c + start..row * c + start + len]
                        .copy_from_slice(&gout[row * len..(row + 1) * len]);
                }
                acc(*x, d);
            }
            Op::SelectRows { x, rows } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut d = vec![T::zero(); xv.numel()];
                for (j, &r) in rows.iter().enumerate() {
                    for col in 0..c {
                        d[r * c + col] += gout[j * c + col];
                    }
                }
                acc(*x, d);
            }
            Op::Embedding { table, tokens } => {
                let tv = val(*table);
                let c = tv.cols();
                let mut d = vec![T::zero(); tv.numel()];
                for (j, &t) in tokens.iter().enumerate() {
                    for col in 0..c {
                        d[t * c + col] += gout[j * c + col];
                    }
                }
                acc(*table, d);
            }
            Op::RepeatEach { x, times } => {
                let d = gout.chunks(*times).map(|ch| ch.iter().copied().sum()).collect();
                acc(*x, d);
            }
            Op::SumLast(x) => {
                let c = val(*x).cols();
                let d = (0..val(*x).numel()).map(|j| gout[j / c]).collect();
                acc(*x, d);
            }
            Op::SumAll(x) => acc(*x, vec![gout[0]; val(*x).numel()]),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = val(*logits).cols();
                let total: T = weights.iter().copied().sum();
                let total = total.max(T::min_positive_value());
                let mut d = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let f = w / total * gout[0];
                    let row = &mut d[r * vocab..(r + 1) * vocab];
                    row[t] -= T::one();
                    row.iter_mut().for_each(|v| *v *= f);
                }
                acc(*logits, d);
            }
        }
    }
}
