use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::Serialize;

use super::config::{MemorySource, ModelConfig, NormKind, Parameterization};
use super::model::{Block, Mixer, ModelLayout};
use super::plan::{build_layer_plan, LayerPlan, MixerKind};
use crate::error::Result;
use crate::layers::{lambda_init, AttnGeometry, AttnMode, AttnParams, DiffAttnParams, GmuParams, MlpParams, NormParams, SsmDims, SsmParams};
use crate::tensor::{Float, Tensor};

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ParamId(pub usize);

/// Optimizer / parameterization group of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Unembedding,
    /// Matrices with two width-scaling dimensions.
    HiddenMatrix,
    /// Norm weights, biases, λ vectors and other tensors with at most one
    /// width-scaling dimension.
    VectorLike,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Embedding,
        ParamGroup::Unembedding,
        ParamGroup::HiddenMatrix,
        ParamGroup::VectorLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Unembedding => "unembedding",
            ParamGroup::HiddenMatrix => "hidden_matrix",
            ParamGroup::VectorLike => "vector_like",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum InitRule {
    Normal { std: f64 },
    Uniform { bound: f64 },
    Constant(f64),
    /// Row `i` of `[channels, state]` holds `ln(1..=state)`.
    ALogRange,
    /// Inverse softplus of `Δ` log-uniform in `[min, max]`.
    DtBias { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: InitRule,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter tensors with their specs, addressed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub specs: Vec<ParamSpec>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    specs: Vec<ParamSpec>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: Vec<usize>, group: ParamGroup, init: InitRule) -> ParamId {
        self.specs.push(ParamSpec { name, shape, group, init });
        ParamId(self.specs.len() - 1)
    }

    /// Matrix applied as `x Wᵀ` (`[out, in]`) or, with `fan_in_rows`, as
    /// `x W` (`[in, out]`). `output` marks residual-branch output projections.
    fn matrix(&mut self, name: String, shape: [usize; 2], fan_in_rows: bool, output: bool) -> ParamId {
        let fan_in = if fan_in_rows { shape[0] } else { shape[1] };
        let init = match self.cfg.parameterization {
            Parameterization::Sp => {
                let scale = if output { (2.0 * self.cfg.depth as f64).sqrt() } else { 1.0 };
                InitRule::Normal { std: 0.02 / scale }
            }
            _ => InitRule::Uniform { bound: 1.0 / (fan_in as f64).sqrt() },
        };
        self.add(name, shape.to_vec(), ParamGroup::HiddenMatrix, init)
    }

    fn vector(&mut self, name: String, shape: Vec<usize>, init: InitRule) -> ParamId {
        self.add(name, shape, ParamGroup::VectorLike, init)
    }

    fn norm(&mut self, prefix: &str, width: usize) -> NormParams<ParamId> {
        let weight = self.vector(format!("{prefix}.weight"), vec![width], InitRule::Constant(1.0));
        match self.cfg.norm {
            NormKind::Rms => NormParams::Rms { weight },
            NormKind::Layer => NormParams::Layer {
                weight,
                bias: self.vector(format!("{prefix}.bias"), vec![width], InitRule::Constant(0.0)),
            },
        }
    }

    fn ssm(&mut self, p: &str) -> SsmParams<ParamId> {
        let dims = ssm_dims(self.cfg);
        let (w, di) = (dims.d_model, dims.d_inner);
        SsmParams {
            in_proj: self.matrix(format!("{p}.in_proj"), [2 * di, w], false, false),
            conv_kernel: self.vector(
                format!("{p}.conv_kernel"),
                vec![di, dims.d_conv],
                InitRule::Uniform { bound: 1.0 / (dims.d_conv as f64).sqrt() },
            ),
            conv_bias: self.vector(format!("{p}.conv_bias"), vec![di], InitRule::Constant(0.0)),
            x_proj: self.matrix(format!("{p}.x_proj"), [dims.dt_rank + 2 * dims.d_state, di], false, false),
            dt_proj: self.matrix(format!("{p}.dt_proj"), [di, dims.dt_rank], false, false),
            dt_bias: self.vector(format!("{p}.dt_bias"), vec![di], InitRule::DtBias { min: 1e-3, max: 1e-1 }),
            a_log: self.vector(format!("{p}.a_log"), vec![di, dims.d_state], InitRule::ALogRange),
            d_skip: self.vector(format!("{p}.d_skip"), vec![di], InitRule::Constant(1.0)),
            out_proj: self.matrix(format!("{p}.out_proj"), [w, di], false, true),
            dims,
        }
    }

    fn attn(&mut self, p: &str, with_kv: bool, geom: AttnGeometry) -> AttnParams<ParamId> {
        let (w, wa, wkv) = (self.cfg.width, self.cfg.attn_width(), self.cfg.kv_width());
        AttnParams {
            q_proj: self.matrix(format!("{p}.q_proj"), [wa, w], false, false),
            k_proj: with_kv.then(|| self.matrix(format!("{p}.k_proj"), [wkv, w], false, false)),
            v_proj: with_kv.then(|| self.matrix(format!("{p}.v_proj"), [wkv, w], false, false)),
            o_proj: self.matrix(format!("{p}.o_proj"), [w, wa], false, true),
            geom,
        }
    }
}

/// Recurrent-state floats of one SSM layer under `cfg`.
pub fn ssm_state_floats(cfg: &ModelConfig) -> usize {
    ssm_dims(cfg).state_floats()
}

pub(crate) fn ssm_dims(cfg: &ModelConfig) -> SsmDims {
    SsmDims {
        d_model: cfg.width,
        d_inner: 2 * cfg.width,
        d_state: cfg.ssm_state,
        d_conv: cfg.ssm_conv,
        dt_rank: cfg.width.div_ceil(16),
    }
}

fn geometry(cfg: &ModelConfig, kind: MixerKind) -> AttnGeometry {
    AttnGeometry {
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_kv_heads,
        head_dim: cfg.head_dim,
        window: (kind == MixerKind::Swa).then_some(cfg.window),
        logit_scale: cfg.attn_logit_scale(),
        rope_base: cfg.arch.is_transformer().then_some(cfg.rope_base),
    }
}

/// Enumerate every parameter of the model and bind them into layer structs.
pub fn param_layout(cfg: &ModelConfig) -> Result<(Vec<ParamSpec>, ModelLayout, LayerPlan)> {
    cfg.validate()?;
    let plan = build_layer_plan(cfg)?;
    let mut b = Builder { cfg, specs: Vec::new() };
    let w = cfg.width;
    let embed = b.add("embed".into(), vec![cfg.vocab_size, w], ParamGroup::Embedding, InitRule::Normal { std: 0.02 });
    let d_h = cfg.memory_width();

    let mut blocks = Vec::with_capacity(plan.depth());
    for (l, &kind) in plan.mixers.iter().enumerate() {
        let p = format!("layers.{l}");
        let mixer_norm = b.norm(&format!("{p}.mixer_norm"), w);
        let mixer = match kind {
            MixerKind::Ssm => Mixer::Ssm(b.ssm(&format!("{p}.ssm"))),
            MixerKind::Gmu => {
                let dh = d_h.expect("GMU layers imply a memory source");
                let w1 = b.matrix(format!("{p}.gmu.w1"), [dh, w], false, false);
                let w2 = b.matrix(format!("{p}.gmu.w2"), [dh, w], true, true);
                let norm_weight = cfg
                    .normalized_gmu
                    .then(|| b.vector(format!("{p}.gmu.norm.weight"), vec![dh], InitRule::Constant(1.0)));
                Mixer::Gmu(GmuParams { w1, w2, norm_weight })
            }
            MixerKind::Swa | MixerKind::Full | MixerKind::Cross => {
                let mode = match kind {
                    MixerKind::Swa => AttnMode::Sliding,
                    MixerKind::Full => AttnMode::Full,
                    _ => AttnMode::Cross,
                };
                let geom = geometry(cfg, kind);
                let attn = b.attn(&format!("{p}.attn"), kind != MixerKind::Cross, geom);
                if cfg.arch.uses_diff_attention() {
                    let hd = cfg.head_dim;
                    let lam = |b: &mut Builder, n: &str| {
                        b.vector(format!("{p}.attn.{n}"), vec![hd], InitRule::Normal { std: 0.1 })
                    };
                    let params = DiffAttnParams {
                        attn,
                        lambda_q1: lam(&mut b, "lambda_q1"),
                        lambda_k1: lam(&mut b, "lambda_k1"),
                        lambda_q2: lam(&mut b, "lambda_q2"),
                        lambda_k2: lam(&mut b, "lambda_k2"),
                        norm_weight: b.vector(
                            format!("{p}.attn.head_norm.weight"),
                            vec![cfg.attn_width()],
                            InitRule::Constant(1.0),
                        ),
                        lambda_init: cfg.lambda_init_override.unwrap_or_else(|| lambda_init(l + 1)),
                        norm_eps: cfg.norm_eps,
                    };
                    Mixer::DiffAttn { params, mode }
                } else {
                    Mixer::Attn { params: attn, mode }
                }
            }
        };
        let mlp_norm = b.norm(&format!("{p}.mlp_norm"), w);
        let wm = cfg.mlp_width;
        let mlp = MlpParams {
            gate: b.matrix(format!("{p}.mlp.gate"), [wm, w], false, false),
            up: b.matrix(format!("{p}.mlp.up"), [wm, w], false, false),
            down: b.matrix(format!("{p}.mlp.down"), [w, wm], false, true),
        };
        blocks.push(Block { kind, mixer_norm, mixer, mlp_norm, mlp });
    }
    let final_norm = b.norm("final_norm", w);
    let unembed = (!cfg.tie_embeddings).then(|| {
        b.add("unembed".into(), vec![cfg.vocab_size, w], ParamGroup::Unembedding, InitRule::Normal { std: 0.02 })
    });
    let layout = ModelLayout { embed, unembed, final_norm, blocks };
    Ok((b.specs, layout, plan))
}

/// Closed-form component counts, the exact instantiated count, and the
/// enumerated terms that the closed form leaves out.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamBreakdown {
    pub attn: u64,
    pub mamba: u64,
    pub gmu: u64,
    pub mlp: u64,
    /// `attn + mamba + gmu + mlp`.
    pub closed_nonembed: u64,
    /// Sum over every instantiated non-embedding tensor.
    pub exact_nonembed: u64,
    pub embed: u64,
    /// Terms present in the model but outside the closed form.
    pub neglected: Vec<(String, u64)>,
}

impl ParamBreakdown {
    pub fn neglected_total(&self) -> u64 {
        self.neglected.iter().map(|(_, n)| n).sum()
    }

    pub fn exact_total(&self) -> u64 {
        self.exact_nonembed + self.embed
    }
}

/// Parameter counts for a configuration, without allocating any tensors.
///
/// The closed form charges `2·w·w_attn + 2·w·w_kv` to attention layers with
/// their own keys/values, `2·w·w_attn` to cross layers and to the shared-KV
/// producer, `6w²` per SSM, `2·d_h·w` per GMU and `3·w·w_mlp` per MLP.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    let (specs, _, plan) = param_layout(cfg)?;
    let (w, wa, wkv) = (cfg.width as u64, cfg.attn_width() as u64, cfg.kv_width() as u64);
    let dh = cfg.memory_width().unwrap_or(0) as u64;
    let (mut attn, mut mamba, mut gmu) = (0u64, 0u64, 0u64);
    let mlp = plan.depth() as u64 * 3 * w * cfg.mlp_width as u64;
    for (l, &k) in plan.mixers.iter().enumerate() {
        match k {
            MixerKind::Ssm => mamba += 6 * w * w,
            MixerKind::Gmu => gmu += 2 * dh * w,
            MixerKind::Cross => attn += 2 * w * wa,
            MixerKind::Full if plan.kv_producer == Some(l) => attn += 2 * w * wa,
            MixerKind::Swa | MixerKind::Full => attn += 2 * w * wa + 2 * w * wkv,
        }
    }

    // Independently enumerated remainder.
    let norm_cols = if cfg.norm == NormKind::Layer { 2 } else { 1 };
    let mut neglected = vec![(
        "norm weights".to_string(),
        norm_cols * w * (2 * plan.depth() as u64 + 1),
    )];
    if plan.kv_producer.is_some() {
        neglected.push(("shared-KV producer k/v projections".into(), 2 * w * wkv));
    }
    let n_ssm = plan.count(MixerKind::Ssm) as u64;
    if n_ssm > 0 {
        let d = ssm_dims(cfg);
        let (di, s, r, k) = (d.d_inner as u64, d.d_state as u64, d.dt_rank as u64, d.d_conv as u64);
        let per = di * k + di + (r + 2 * s) * di + di * r + di + di * s + di;
        neglected.push(("SSM conv, selective projections, A, D, Δ bias".into(), n_ssm * per));
    }
    if cfg.normalized_gmu {
        neglected.push(("nGMU norm weights".into(), plan.count(MixerKind::Gmu) as u64 * dh));
    }
    if cfg.arch.uses_diff_attention() {
        let n_attn = plan.mixers.iter().filter(|k| k.is_attention()).count() as u64;
        neglected.push((
            "differential-attention λ vectors and head norms".into(),
            n_attn * (4 * cfg.head_dim as u64 + wa),
        ));
    }
    if let Some(MemorySource::LastAttention | MemorySource::MiddleAttention) = cfg.memory_source() {
        debug_assert_eq!(dh, wa);
    }

    let embed_groups = [ParamGroup::Embedding, ParamGroup::Unembedding];
    let (mut exact, mut embed) = (0u64, 0u64);
    for s in &specs {
        if embed_groups.contains(&s.group) {
            embed += s.numel() as u64;
        } else {
            exact += s.numel() as u64;
        }
    }
    Ok(ParamBreakdown {
        attn,
        mamba,
        gmu,
        mlp,
        closed_nonembed: attn + mamba + gmu + mlp,
        exact_nonembed: exact,
        embed,
        neglected,
    })
}

fn sample(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.numel();
    match spec.init {
        InitRule::Normal { std } => {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        InitRule::Uniform { bound } => {
            let d = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| d.sample(rng)).collect()
        }
        InitRule::Constant(c) => vec![c; n],
        InitRule::ALogRange => {
            let s = *spec.shape.last().expect("2-D");
            (0..n).map(|i| ((i % s) as f64 + 1.0).ln()).collect()
        }
        InitRule::DtBias { min, max } => {
            let d = Uniform::new(min.ln(), max.ln());
            (0..n)
                .map(|_| {
                    let dt = d.sample(rng).exp();
                    // softplus⁻¹(dt) = dt + ln(1 − e^{−dt})
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect()
        }
    }
}

/// Allocate and initialise every parameter. Each tensor draws from its own
/// ChaCha stream keyed by its index, so results depend only on `seed`.
pub fn init_weights<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, ModelLayout, LayerPlan)> {
    let (specs, layout, plan) = param_layout(cfg)?;
    let tensors = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let v = sample(s, &mut rng);
            Tensor::from_fn(s.shape.clone(), |j| T::lit(v[j]))
        })
        .collect();
    Ok((ParamStore { specs, tensors }, layout, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Arch;

    #[test]
    fn exact_minus_closed_is_the_enumerated_remainder() {
        for arch in Arch::ALL {
            for d in [4usize, 8, 16] {
                let mut cfg = ModelConfig::desk(arch, d, 128).unwrap();
                for (norm, ngmu) in [(NormKind::Rms, false), (NormKind::Layer, true)] {
                    cfg.norm = norm;
                    cfg.normalized_gmu = ngmu;
                    let b = count_params(&cfg).unwrap();
                    assert_eq!(b.exact_nonembed, b.closed_nonembed + b.neglected_total(), "{arch} d={d}");
                }
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::desk(Arch::SambaYDA, 4, 64).unwrap();
        let (a, _, _) = init_weights::<f32>(&cfg, 7).unwrap();
        let (b, _, _) = init_weights::<f32>(&cfg, 7).unwrap();
        let (c, _, _) = init_weights::<f32>(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn names_are_unique() {
        let cfg = ModelConfig::desk(Arch::SambaYDA, 8, 64).unwrap();
        let (specs, _, _) = param_layout(&cfg).unwrap();
        let mut names: Vec<_> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(n, names.len());
    }
}
