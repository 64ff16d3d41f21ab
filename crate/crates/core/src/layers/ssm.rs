//! Selective state-space mixer (Mamba block).
//!
//! `x -> in_proj -> (x̃, z)`; `x̃ -> causal depthwise conv -> SiLU = u`;
//! `u -> x_proj -> (Δ_raw, B, C)`; `Δ = softplus(dt_proj Δ_raw + b_dt)`;
//! selective scan with `A = -exp(A_log)` gives the kernel output `y`, which
//! is also the memory tap; the block output is `(y ⊙ SiLU(z)) out_projᵀ`.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ScanInputs};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmDims {
    pub d_model: usize,
    /// Inner width `d_h = 2 d_model`.
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub dt_rank: usize,
}

impl SsmDims {
    /// Expansion 2, state 16, conv 4, `Δ`-rank `ceil(d_model / 16)`.
    pub fn standard(d_model: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            d_state: 16,
            d_conv: 4,
            dt_rank: d_model.div_ceil(16),
        }
    }

    /// Floats of recurrent state carried between decode steps.
    pub fn state_floats(&self) -> usize {
        self.d_inner * self.d_state + self.d_inner * (self.d_conv - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<P> {
    /// `[2 d_inner, d_model]`
    pub in_proj: P,
    /// `[d_inner, d_conv]`
    pub conv_kernel: P,
    /// `[d_inner]`
    pub conv_bias: P,
    /// `[dt_rank + 2 d_state, d_inner]`
    pub x_proj: P,
    /// `[d_inner, dt_rank]`
    pub dt_proj: P,
    /// `[d_inner]`
    pub dt_bias: P,
    /// `[d_inner, d_state]`
    pub a_log: P,
    /// `[d_inner]`
    pub d_skip: P,
    /// `[d_model, d_inner]`
    pub out_proj: P,
    pub dims: SsmDims,
}

impl<P> SsmParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SsmParams<Q> {
        SsmParams {
            in_proj: f(&self.in_proj),
            conv_kernel: f(&self.conv_kernel),
            conv_bias: f(&self.conv_bias),
            x_proj: f(&self.x_proj),
            dt_proj: f(&self.dt_proj),
            dt_bias: f(&self.dt_bias),
            a_log: f(&self.a_log),
            d_skip: f(&self.d_skip),
            out_proj: f(&self.out_proj),
            dims: self.dims,
        }
    }
}

/// Recurrent state: scan state `[d_inner, d_state]` and the last
/// `d_conv - 1` conv inputs `[d_conv - 1, d_inner]`, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState<T> {
    pub h: Vec<T>,
    pub conv: Vec<T>,
}

impl<T: Float> SsmState<T> {
    pub fn zeros(dims: &SsmDims) -> Self {
        Self {
            h: vec![T::zero(); dims.d_inner * dims.d_state],
            conv: vec![T::zero(); dims.d_inner * (dims.d_conv - 1)],
        }
    }

    pub fn floats(&self) -> usize {
        self.h.len() + self.conv.len()
    }
}

fn neg_exp<T: Float>(a_log: &Tensor<T>) -> Tensor<T> {
    a_log.map(|v| -v.exp())
}

impl<T: Float> SsmParams<&Tensor<T>> {
    fn check(&self) -> Result<()> {
        let d = self.dims;
        let ok = self.in_proj.shape() == [2 * d.d_inner, d.d_model]
            && self.conv_kernel.shape() == [d.d_inner, d.d_conv]
            && self.conv_bias.shape() == [d.d_inner]
            && self.x_proj.shape() == [d.dt_rank + 2 * d.d_state, d.d_inner]
            && self.dt_proj.shape() == [d.d_inner, d.dt_rank]
            && self.dt_bias.shape() == [d.d_inner]
            && self.a_log.shape() == [d.d_inner, d.d_state]
            && self.d_skip.shape() == [d.d_inner]
            && self.out_proj.shape() == [d.d_model, d.d_inner]
            && d.d_conv >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("ssm", format!("parameters inconsistent with {d:?}")))
        }
    }

    /// Whole-sequence forward from zero state, returning the output, the
    /// memory tap and the state after the last position.
    pub fn prefill(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, SsmState<T>)> {
        self.check()?;
        super::require_rows(x, "ssm input")?;
        let d = self.dims;
        let n = x.rows();
        let xz = kernels::linear(x, self.in_proj)?;
        let xs = xz.slice_cols(0, d.d_inner);
        let z = xz.slice_cols(d.d_inner, d.d_inner);
        let conv = kernels::conv1d_causal(xs.data(), self.conv_kernel.data(), 1, d.d_inner, d.d_conv);
        let u: Vec<T> = conv
            .iter()
            .enumerate()
            .map(|(i, &v)| kernels::silu(v + self.conv_bias.data()[i % d.d_inner]))
            .collect();
        let u = Tensor::from_parts(vec![n, d.d_inner], u);
        let dbc = kernels::linear(&u, self.x_proj)?;
        let dt_in = dbc.slice_cols(0, d.dt_rank);
        let b = dbc.slice_cols(d.dt_rank, d.d_state);
        let c = dbc.slice_cols(d.dt_rank + d.d_state, d.d_state);
        let dt = kernels::linear(&dt_in, self.dt_proj)?;
        let delta: Vec<T> = dt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| kernels::softplus(v + self.dt_bias.data()[i % d.d_inner]))
            .collect();
        let a = neg_exp(self.a_log);
        let scan = kernels::selective_scan(
            ScanInputs {
                u: u.data(),
                delta: &delta,
                a: a.data(),
                b: b.data(),
                c: c.data(),
                dskip: self.d_skip.data(),
            },
            1,
            d.d_inner,
            d.d_state,
            None,
            false,
        );
        let y = Tensor::from_parts(vec![n, d.d_inner], scan.y);
        let gated: Vec<T> = y
            .data()
            .iter()
            .zip(z.data())
            .map(|(&yv, &zv)| yv * kernels::silu(zv))
            .collect();
        let out = kernels::linear(&Tensor::from_parts(vec![n, d.d_inner], gated), self.out_proj)?;

        let keep = d.d_conv - 1;
        let mut conv_state = vec![T::zero(); keep * d.d_inner];
        for slot in 0..keep {
            // slot 0 is the oldest retained input, position n - keep
            if let Some(src) = (n + slot).checked_sub(keep) {
                conv_state[slot * d.d_inner..(slot + 1) * d.d_inner].copy_from_slice(xs.row(src));
            }
        }
        Ok((
            out,
            y,
            SsmState {
                h: scan.last_state,
                conv: conv_state,
            },
        ))
    }

    /// One-token recurrent update. Returns `(y_t, m_t)` and advances `state`.
    pub fn step(&self, x_t: &[T], state: &mut SsmState<T>) -> Result<(Vec<T>, Vec<T>)> {
        let d = self.dims;
        if x_t.len() != d.d_model
            || state.h.len() != d.d_inner * d.d_state
            || state.conv.len() != d.d_inner * (d.d_conv - 1)
        {
            return Err(Error::shape("ssm_step", "input or state size mismatch"));
        }
        let (di, ds, k) = (d.d_inner, d.d_state, d.d_conv);
        let mut xz = vec![T::zero(); 2 * di];
        kernels::gemm(false, true, 1, d.d_model, 2 * di, x_t, self.in_proj.data(), &mut xz, false);
        let (xs, z) = xz.split_at(di);
        let kern = self.conv_kernel.data();
        let mut u = vec![T::zero(); di];
        for ch in 0..di {
            let mut acc = kern[ch * k + k - 1] * xs[ch];
            for j in 0..k - 1 {
                acc += kern[ch * k + j] * state.conv[j * di + ch];
            }
            u[ch] = kernels::silu(acc + self.conv_bias.data()[ch]);
        }
        if k > 1 {
            state.conv.copy_within(di.., 0);
            let tail = state.conv.len() - di;
            state.conv[tail..].copy_from_slice(xs);
        }
        let mut dbc = vec![T::zero(); d.dt_rank + 2 * ds];
        kernels::gemm(false, true, 1, di, dbc.len(), &u, self.x_proj.data(), &mut dbc, false);
        let (dt_in, rest) = dbc.split_at(d.dt_rank);
        let (b, c) = rest.split_at(ds);
        let mut dt = vec![T::zero(); di];
        kernels::gemm(false, true, 1, d.dt_rank, di, dt_in, self.dt_proj.data(), &mut dt, false);
        let a_log = self.a_log.data();
        let mut y = vec![T::zero(); di];
        for ch in 0..di {
            let delta = kernels::softplus(dt[ch] + self.dt_bias.data()[ch]);
            let du = delta * u[ch];
            let mut acc = T::zero();
            for s in 0..ds {
                let a = -a_log[ch * ds + s].exp();
                let h = &mut state.h[ch * ds + s];
                *h = (delta * a).exp() * *h + du * b[s];
                acc += c[s] * *h;
            }
            y[ch] = acc + self.d_skip.data()[ch] * u[ch];
        }
        let gated: Vec<T> = y.iter().zip(z).map(|(&yv, &zv)| yv * kernels::silu(zv)).collect();
        let mut out = vec![T::zero(); d.d_model];
        kernels::gemm(false, true, 1, di, d.d_model, &gated, self.out_proj.data(), &mut out, false);
        Ok((out, y))
    }
}

/// Full-sequence SSM forward: `(y [n, d_model], m_tap [n, d_inner])`.
pub fn ssm_forward_parallel<T: Float>(
    x: &Tensor<T>,
    p: &SsmParams<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (y, m, _) = p.prefill(x)?;
    Ok((y, m))
}

/// Single-token SSM update: `(y_t, m_t)`, advancing `state` in place.
pub fn ssm_step<T: Float>(
    x_t: &[T],
    state: &mut SsmState<T>,
    p: &SsmParams<&Tensor<T>>,
) -> Result<(Vec<T>, Vec<T>)> {
    p.step(x_t, state)
}

impl SsmParams<Var> {
    /// Graph forward over `seqs` stacked sequences: `(output, memory tap)`.
    pub fn forward_graph<T: Float>(&self, g: &mut Graph<T>, x: Var, seqs: usize) -> Result<(Var, Var)> {
        let d = self.dims;
        let xz = g.linear(x, self.in_proj)?;
        let xs = g.slice_cols(xz, 0, d.d_inner)?;
        let z = g.slice_cols(xz, d.d_inner, d.d_inner)?;
        let xc = g.conv1d_causal(xs, self.conv_kernel, seqs)?;
        let xc = g.add(xc, self.conv_bias)?;
        let u = g.silu(xc);
        let dbc = g.linear(u, self.x_proj)?;
        let dt_in = g.slice_cols(dbc, 0, d.dt_rank)?;
        let b = g.slice_cols(dbc, d.dt_rank, d.d_state)?;
        let c = g.slice_cols(dbc, d.dt_rank + d.d_state, d.d_state)?;
        let dt = g.linear(dt_in, self.dt_proj)?;
        let dt = g.add(dt, self.dt_bias)?;
        let delta = g.softplus(dt);
        let ea = g.exp(self.a_log);
        let a = g.scale(ea, -T::one());
        let y = g.selective_scan(u, delta, a, b, c, self.d_skip, seqs)?;
        let sz = g.silu(z);
        let gated = g.mul(y, sz)?;
        Ok((g.linear(gated, self.out_proj)?, y))
    }
}
