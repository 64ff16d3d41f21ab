//! Token-mixing and channel-mixing layers.
//!
//! Every layer exposes three entry points over the same parameters:
//! a graph-recording forward (training and the reference full forward),
//! an eager whole-sequence forward (prefill), and where the layer mixes
//! tokens, a single-token step over cached state (decode).
//!
//! Parameter structs are generic over the handle type `P`: models store
//! parameter ids, graph code binds them to [`Var`](crate::Var)s and eager
//! code to `&Tensor`s.

pub mod attention;
pub mod gmu;
pub mod mlp;
pub mod norm;
pub mod ssm;

pub use attention::{
    attention_forward, diff_attention_forward, lambda_init, AttnGeometry, AttnMode, AttnParams,
    DiffAttnParams, KvCache,
};
pub use gmu::{gmu_forward, ngmu_forward, GmuParams};
pub use mlp::{swiglu_forward, MlpParams};
pub use norm::{rmsnorm, NormParams};
pub use ssm::{ssm_forward_parallel, ssm_step, SsmDims, SsmParams, SsmState};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub(crate) fn require_rows<T: Float>(x: &Tensor<T>, what: &'static str) -> Result<()> {
    if x.rows() == 0 {
        Err(Error::Empty(what))
    } else {
        Ok(())
    }
}
