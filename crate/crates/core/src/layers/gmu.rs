//! Gated Memory Unit: `y = (m ⊙ SiLU(x W1ᵀ)) W2`, with an optional RMSNorm
//! on the gated product (nGMU). Strictly position-wise.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Float, Graph, Tensor, Var};

/// `w1` and `w2` are both `[d_h, d_m]`. `norm_weight` (`[d_h]`) is present
/// exactly for the normalised variant.
#[derive(Clone, Debug, PartialEq)]
pub struct GmuParams<P> {
    pub w1: P,
    pub w2: P,
    pub norm_weight: Option<P>,
}

impl<P> GmuParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> GmuParams<Q> {
        GmuParams {
            w1: f(&self.w1),
            w2: f(&self.w2),
            norm_weight: self.norm_weight.as_ref().map(f),
        }
    }
}

fn check_shapes<T: Float>(x: &Tensor<T>, m: &Tensor<T>, p: &GmuParams<&Tensor<T>>) -> Result<()> {
    let (dh, dm) = match p.w1.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::shape("gmu", format!("W1 {s:?} is not 2-D"))),
    };
    if p.w2.shape() != [dh, dm] {
        return Err(Error::shape(
            "gmu",
            format!("W1 {:?} and W2 {:?} disagree", p.w1.shape(), p.w2.shape()),
        ));
    }
    if x.cols() != dm {
        return Err(Error::shape("gmu", format!("input width {} != {dm}", x.cols())));
    }
    if m.cols() != dh || m.rows() != x.rows() {
        return Err(Error::shape(
            "gmu",
            format!("memory {:?} does not match d_h = {dh} over {} rows", m.shape(), x.rows()),
        ));
    }
    if let Some(w) = p.norm_weight {
        if w.shape() != [dh] {
            return Err(Error::shape("ngmu", format!("norm weight {:?}", w.shape())));
        }
    }
    Ok(())
}

/// Eager GMU; applies the nGMU normalisation when `p.norm_weight` is set.
pub fn gmu_forward<T: Float>(
    x: &Tensor<T>,
    m: &Tensor<T>,
    p: &GmuParams<&Tensor<T>>,
    eps: T,
) -> Result<Tensor<T>> {
    check_shapes(x, m, p)?;
    let gate = kernels::linear(x, p.w1)?.map(kernels::silu);
    let mut gated = gate.mul(m)?;
    if let Some(w) = p.norm_weight {
        gated = super::rmsnorm(&gated, w, eps)?;
    }
    kernels::matmul(&gated, p.w2)
}

/// Eager nGMU: `RMSNorm(m ⊙ SiLU(x W1ᵀ)) W2`.
pub fn ngmu_forward<T: Float>(
    x: &Tensor<T>,
    m: &Tensor<T>,
    p: &GmuParams<&Tensor<T>>,
    eps: T,
) -> Result<Tensor<T>> {
    if p.norm_weight.is_none() {
        return Err(Error::Config("nGMU requires a norm weight".into()));
    }
    gmu_forward(x, m, p, eps)
}

impl GmuParams<Var> {
    pub fn forward_graph<T: Float>(&self, g: &mut Graph<T>, x: Var, m: Var, eps: T) -> Result<Var> {
        let (dh, rows) = (g.shape(self.w1)[0], g.value(x).rows());
        if g.value(m).cols() != dh || g.value(m).rows() != rows {
            return Err(Error::shape(
                "gmu",
                format!("memory {:?} does not match d_h = {dh}", g.shape(m)),
            ));
        }
        let pre = g.linear(x, self.w1)?;
        let gate = g.silu(pre);
        let mut gated = g.mul(gate, m)?;
        if let Some(w) = self.norm_weight {
            gated = g.rmsnorm(gated, w, eps)?;
        }
        g.matmul(gated, self.w2)
    }
}
