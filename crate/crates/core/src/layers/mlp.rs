//! SwiGLU channel mixer.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Float, Graph, Tensor, Var};

/// `gate`, `up`: `[w_mlp, d_m]`; `down`: `[d_m, w_mlp]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<P> {
    pub gate: P,
    pub up: P,
    pub down: P,
}

impl<P> MlpParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> MlpParams<Q> {
        MlpParams {
            gate: f(&self.gate),
            up: f(&self.up),
            down: f(&self.down),
        }
    }
}

/// Returns `(y, up_branch)`; the linear up-projection branch is the memory
/// tap used by the MLP-sourced GMU variant.
pub fn swiglu_forward<T: Float>(
    x: &Tensor<T>,
    p: &MlpParams<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if p.gate.shape() != p.up.shape() {
        return Err(Error::shape("swiglu", "gate and up projections differ"));
    }
    let gate = kernels::linear(x, p.gate)?.map(kernels::silu);
    let up = kernels::linear(x, p.up)?;
    let y = kernels::linear(&gate.mul(&up)?, p.down)?;
    Ok((y, up))
}

impl MlpParams<Var> {
    pub fn forward_graph<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let pre = g.linear(x, self.gate)?;
        let gate = g.silu(pre);
        let up = g.linear(x, self.up)?;
        let h = g.mul(gate, up)?;
        Ok((g.linear(h, self.down)?, up))
    }
}
