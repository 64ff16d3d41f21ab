use crate::error::{Error, Result};
use crate::tensor::{kernels, Float, Graph, Tensor, Var};

/// Pre-norm parameters; RMSNorm unless the model opts into LayerNorm.
#[derive(Clone, Debug, PartialEq)]
pub enum NormParams<P> {
    Rms { weight: P },
    Layer { weight: P, bias: P },
}

impl<P> NormParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> NormParams<Q> {
        match self {
            NormParams::Rms { weight } => NormParams::Rms { weight: f(weight) },
            NormParams::Layer { weight, bias } => NormParams::Layer {
                weight: f(weight),
                bias: f(bias),
            },
        }
    }
}

impl NormParams<Var> {
    pub fn forward_graph<T: Float>(&self, g: &mut Graph<T>, x: Var, eps: T) -> Result<Var> {
        match self {
            NormParams::Rms { weight } => g.rmsnorm(x, *weight, eps),
            NormParams::Layer { weight, bias } => g.layernorm(x, *weight, *bias, eps),
        }
    }
}

impl<T: Float> NormParams<&Tensor<T>> {
    pub fn forward(&self, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        match self {
            NormParams::Rms { weight } => rmsnorm(x, weight, eps),
            NormParams::Layer { weight, bias } => {
                if x.cols() != weight.numel() {
                    return Err(Error::shape("layernorm", "width mismatch"));
                }
                let (y, _, _) = kernels::layernorm_forward(x.data(), weight.data(), bias.data(), eps);
                Ok(Tensor::from_parts(x.shape().to_vec(), y))
            }
        }
    }
}

/// `x / sqrt(mean(x²) + eps) ⊙ weight` over the last dimension.
pub fn rmsnorm<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::Config("rmsnorm eps must be positive".into()));
    }
    if weight.shape().len() != 1 || x.cols() != weight.numel() {
        return Err(Error::shape(
            "rmsnorm",
            format!("input {:?}, weight {:?}", x.shape(), weight.shape()),
        ));
    }
    let (y, _) = kernels::rmsnorm_forward(x.data(), weight.data(), weight.numel(), eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}
