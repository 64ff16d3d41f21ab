use super::config::{MemorySource, ModelConfig};
use super::params::{init_weights, ParamId, ParamStore};
use super::plan::{LayerPlan, MixerKind};
use crate::error::{Error, Result};
use crate::layers::{AttnMode, AttnParams, DiffAttnParams, GmuParams, MlpParams, NormParams, SsmParams};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer<P> {
    Ssm(SsmParams<P>),
    Attn { params: AttnParams<P>, mode: AttnMode },
    DiffAttn { params: DiffAttnParams<P>, mode: AttnMode },
    Gmu(GmuParams<P>),
}

impl<P> Mixer<P> {
    pub fn map<Q>(&self, f: impl FnMut(&P) -> Q) -> Mixer<Q> {
        match self {
            Mixer::Ssm(p) => Mixer::Ssm(p.map(f)),
            Mixer::Attn { params, mode } => Mixer::Attn { params: params.map(f), mode: *mode },
            Mixer::DiffAttn { params, mode } => Mixer::DiffAttn { params: params.map(f), mode: *mode },
            Mixer::Gmu(p) => Mixer::Gmu(p.map(f)),
        }
    }
}

/// Pre-norm residual block: `h += r·mixer(norm(h)); h += r·mlp(norm(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub kind: MixerKind,
    pub mixer_norm: NormParams<P>,
    pub mixer: Mixer<P>,
    pub mlp_norm: NormParams<P>,
    pub mlp: MlpParams<P>,
}

impl<P> Block<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Block<Q> {
        Block {
            kind: self.kind,
            mixer_norm: self.mixer_norm.map(&mut f),
            mixer: self.mixer.map(&mut f),
            mlp_norm: self.mlp_norm.map(&mut f),
            mlp: self.mlp.map(&mut f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    pub embed: ParamId,
    pub unembed: Option<ParamId>,
    pub final_norm: NormParams<ParamId>,
    pub blocks: Vec<Block<ParamId>>,
}

impl ModelLayout {
    pub fn output_matrix(&self) -> ParamId {
        self.unembed.unwrap_or(self.embed)
    }
}

/// A configured, initialised model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub plan: LayerPlan,
    pub layout: ModelLayout,
    pub params: ParamStore<T>,
}

/// Nodes of a recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub logits: Var,
    /// Residual stream entering the final norm.
    pub hidden: Var,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (params, layout, plan) = init_weights(&config, seed)?;
        Ok(Self { config, plan, layout, params })
    }

    /// Reassemble a model from stored tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if named.len() != m.params.len() {
            return Err(Error::StateMismatch(format!(
                "expected {} tensors, found {}",
                m.params.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            let spec = &m.params.specs[i];
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::StateMismatch(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
            m.params.tensors[i] = t;
        }
        Ok(m)
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.params.specs.iter().map(|s| s.name.clone()).zip(self.params.tensors.iter()).collect()
    }

    /// Put every parameter on the tape; trainable leaves receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    /// Full parallel forward over `seqs` stacked sequences of equal length.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], tokens: &[usize], seqs: usize) -> Result<ForwardNodes> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if seqs == 0 || tokens.len() % seqs != 0 {
            return Err(Error::Config(format!("{} tokens do not split into {seqs} sequences", tokens.len())));
        }
        let cfg = &self.config;
        let eps = T::lit(cfg.norm_eps);
        let res = T::lit(cfg.residual_multiplier());
        let v = |id: &ParamId| vars[id.0];
        let mut h = g.embedding(vars[self.layout.embed.0], tokens)?;
        let mut shared: Option<(Var, Var)> = None;
        let mut tap: Option<Var> = None;
        let tap_point = self.plan.tap;
        for (l, block) in self.layout.blocks.iter().enumerate() {
            let b = block.map(v);
            let a = b.mixer_norm.forward_graph(g, h, eps)?;
            let is_tap = tap_point.is_some_and(|t| t.layer == l);
            let y = match &b.mixer {
                Mixer::Ssm(p) => {
                    let (y, m) = p.forward_graph(g, a, seqs)?;
                    if is_tap {
                        tap = Some(m);
                    }
                    y
                }
                Mixer::Attn { params, mode } => {
                    let r = params.forward_graph(g, a, seqs, *mode, shared)?;
                    self.after_attention(l, r.kv, r.pre_o, is_tap, &mut shared, &mut tap);
                    r.out
                }
                Mixer::DiffAttn { params, mode } => {
                    let r = params.forward_graph(g, a, seqs, *mode, shared)?;
                    self.after_attention(l, r.kv, r.pre_o, is_tap, &mut shared, &mut tap);
                    r.out
                }
                Mixer::Gmu(p) => {
                    let m = tap.ok_or_else(|| Error::Config(format!("GMU at layer {l} has no memory")))?;
                    p.forward_graph(g, a, m, eps)?
                }
            };
            let y = g.scale(y, res);
            h = g.add(h, y)?;
            let a = b.mlp_norm.forward_graph(g, h, eps)?;
            let (y, up) = b.mlp.forward_graph(g, a)?;
            if is_tap && tap_point.is_some_and(|t| t.source == MemorySource::MlpBranch) {
                tap = Some(up);
            }
            let y = g.scale(y, res);
            h = g.add(h, y)?;
        }
        let hidden = h;
        let hf = self.layout.final_norm.map(v).forward_graph(g, h, eps)?;
        let logits = g.linear(hf, vars[self.layout.output_matrix().0])?;
        let logits = g.scale(logits, T::lit(cfg.logit_multiplier()));
        Ok(ForwardNodes { logits, hidden })
    }

    fn after_attention(
        &self,
        l: usize,
        kv: Option<(Var, Var)>,
        pre_o: Var,
        is_tap: bool,
        shared: &mut Option<(Var, Var)>,
        tap: &mut Option<Var>,
    ) {
        if self.plan.kv_producer == Some(l) {
            *shared = kv;
        }
        let attn_tap = self
            .plan
            .tap
            .is_some_and(|t| matches!(t.source, MemorySource::LastAttention | MemorySource::MiddleAttention));
        if is_tap && attn_tap {
            *tap = Some(pre_o);
        }
    }

    /// Logits `[n, vocab]` of a full parallel forward over one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, tokens, 1)?;
        Ok(g.value(out.logits).clone())
    }

    /// Logits and the pre-final-norm residual stream for stacked sequences.
    pub fn forward_with_hidden(&self, tokens: &[usize], seqs: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, tokens, seqs)?;
        Ok((g.value(out.logits).clone(), g.value(out.hidden).clone()))
    }
}
