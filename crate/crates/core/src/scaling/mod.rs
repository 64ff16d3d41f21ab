//! Hyperparameter scaling: iso-parametric aspect ratios, learning-rate,
//! token and batch rules, μP/μP++ plans, FLOPs estimates and power-law fits.

mod fit;

pub use fit::{fit_power_law, read_fit_csv, PowerLawFit, XKind};

use serde::Serialize;

use crate::arch::{count_params, Arch, MixerKind, ModelConfig, ParamGroup, Parameterization};
use crate::error::{Error, Result};

/// Base learning rate `η₀`.
pub const ETA0: f64 = 4e-4;
/// Base batch size `B₀` in tokens.
pub const B0: f64 = 2_097_152.0;
/// Base token budget `T₀`.
pub const T0: f64 = 100e9;
/// Base depth `d₀`.
pub const D0: f64 = 16.0;
/// Base weight decay `λ₀`.
pub const LAMBDA0: f64 = 0.1;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
/// Transformer++ non-embedding budget per `d³` (`14.5·128²`).
pub const BUDGET_PER_D3: f64 = 237_568.0;

/// Architectures with a registered iso-parametric polynomial. The Gated
/// DeltaNet variants are counted only; they have no layer implementation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IsoArch {
    Model(Arch),
    Gdny,
    SGdny,
}

impl IsoArch {
    pub const REGISTERED: [IsoArch; 8] = [
        IsoArch::Model(Arch::SambaY),
        IsoArch::Model(Arch::SambaYoco),
        IsoArch::Model(Arch::MambaY),
        IsoArch::Model(Arch::SambaYMlp),
        IsoArch::Model(Arch::SambaYA),
        IsoArch::Model(Arch::SambaYAA),
        IsoArch::Gdny,
        IsoArch::SGdny,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| !matches!(c, '-' | '_' | ' ')).flat_map(char::to_lowercase).collect();
        match key.as_str() {
            "gdny" => Ok(IsoArch::Gdny),
            "sgdny" => Ok(IsoArch::SGdny),
            _ => s.parse().map(IsoArch::Model),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IsoArch::Model(a) => a.name(),
            IsoArch::Gdny => "GDNY",
            IsoArch::SGdny => "S-GDNY",
        }
    }

    /// `(c₁, c₂)` of `c₁α + c₂α² = 237568`.
    pub fn polynomial(self) -> (f64, f64) {
        match self {
            IsoArch::Model(a) => a.iso_polynomial(),
            // attn 2dw·w_attn/4, GDN 6dw²/2, GMU 3dw²/4, MLP 12dw²
            IsoArch::Gdny => (64.0, 15.75),
            // SWA 2.5dw·w_attn/4 + shared-KV 2dw·w_attn/4, GDN 6dw²/4, GMU 3dw²/4
            IsoArch::SGdny => (144.0, 14.25),
        }
    }
}

/// Positive root of `c₂α² + c₁α − 237568 = 0`.
pub fn solve_aspect_ratio_exact((c1, c2): (f64, f64)) -> Result<f64> {
    let disc = c1 * c1 + 4.0 * c2 * BUDGET_PER_D3;
    let root = if c2 > 0.0 {
        (-c1 + disc.sqrt()) / (2.0 * c2)
    } else if c1 > 0.0 {
        BUDGET_PER_D3 / c1
    } else {
        f64::NAN
    };
    if root.is_finite() && root > 0.0 {
        Ok(root)
    } else {
        Err(Error::Config(format!("iso-parametric polynomial ({c1}, {c2}) has no positive root")))
    }
}

/// Positive root rounded up to the nearest even integer.
pub fn solve_aspect_ratio(poly: (f64, f64)) -> Result<usize> {
    let root = solve_aspect_ratio_exact(poly)?;
    // tolerate float noise on exactly-even roots (Transformer++: 128)
    Ok(2 * ((root - 1e-9) / 2.0).ceil() as usize)
}

/// `η = η₀ √(B·d₀ / (B₀·d))`.
pub fn learning_rate(depth: f64, batch_tokens: f64) -> f64 {
    ETA0 * (batch_tokens * D0 / (B0 * depth)).sqrt()
}

/// Closed-form non-embedding parameters of `arch` at reference scale.
pub fn reference_nonembed(arch: Arch, depth: usize) -> Result<u64> {
    Ok(count_params(&ModelConfig::reference_scale(arch, depth)?)?.closed_nonembed)
}

/// `T = T₀ · N(d) / N_Transformer++(d₀)`.
pub fn tokens_for_depth(arch: Arch, depth: usize) -> Result<f64> {
    let base = reference_nonembed(Arch::TransformerPP, D0 as usize)? as f64;
    Ok(T0 * reference_nonembed(arch, depth)? as f64 / base)
}

/// `B = B₀ √(T/T₀)` (non-default ablation).
pub fn batch_for_tokens(tokens: f64) -> f64 {
    B0 * (tokens / T0).sqrt()
}

/// `η' = η (T₀/T)^(1/3)` (non-default ablation).
pub fn lr_token_scaling(eta: f64, tokens: f64) -> f64 {
    eta * (T0 / tokens).cbrt()
}

/// Independent weight decay `λ = λ₀ η₀ / η` (non-default ablation).
pub fn independent_wd(eta: f64) -> f64 {
    LAMBDA0 * ETA0 / eta
}

/// Linear warmup to the peak, then linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Warmup sized from a token count at `batch_tokens` per step.
    pub fn from_tokens(total_steps: usize, warmup_tokens: f64, batch_tokens: f64) -> Result<Self> {
        let warmup_steps = (warmup_tokens / batch_tokens).ceil() as usize;
        if batch_tokens <= 0.0 || warmup_steps > total_steps || total_steps == 0 {
            return Err(Error::Config(format!(
                "warmup of {warmup_steps} steps does not fit in {total_steps} steps"
            )));
        }
        Ok(Self { warmup_steps, total_steps })
    }

    /// Warmup over the first 1% of steps (the base ratio 1B / 100B tokens).
    pub fn one_percent(total_steps: usize) -> Self {
        Self {
            warmup_steps: (total_steps as f64 * 0.01).round() as usize,
            total_steps,
        }
    }

    pub fn multiplier(&self, step: usize) -> f64 {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step < w {
            (step + 1) as f64 / (w + 1) as f64
        } else if step >= t {
            0.0
        } else {
            (t - step) as f64 / (t - w) as f64
        }
    }
}

/// Free-function form of [`LrSchedule::multiplier`].
pub fn lr_schedule(step: usize, total_steps: usize, warmup_tokens: f64, batch_tokens: f64) -> Result<f64> {
    Ok(LrSchedule::from_tokens(total_steps, warmup_tokens, batch_tokens)?.multiplier(step))
}

/// Per-group optimizer and initialisation settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupRecord {
    pub group: ParamGroup,
    pub lr_multiplier: f64,
    pub init: String,
    pub weight_decay: f64,
    pub weight_multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MuPPlan {
    pub parameterization: Parameterization,
    pub groups: Vec<GroupRecord>,
    pub residual_multiplier: f64,
    pub logit_multiplier: f64,
    pub attention_scale: f64,
    pub eta0: f64,
    pub b0: f64,
    pub t0: f64,
    pub d0: f64,
    pub lambda0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl MuPPlan {
    pub fn group(&self, g: ParamGroup) -> &GroupRecord {
        self.groups.iter().find(|r| r.group == g).expect("every group has a record")
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>10} {:>8} {:>12}  init\n",
            "group", "lr mult", "wd", "weight mult"
        );
        for r in &self.groups {
            s += &format!(
                "{:<14} {:>10.4} {:>8} {:>12.4}  {}\n",
                r.group.name(),
                r.lr_multiplier,
                r.weight_decay,
                r.weight_multiplier,
                r.init
            );
        }
        s += &format!(
            "residual multiplier {:.6}, logit multiplier {:.6}, attention scale {:.6}\n",
            self.residual_multiplier, self.logit_multiplier, self.attention_scale
        );
        s
    }
}

/// Parameterization plan for a configuration.
pub fn mup_plan(cfg: &ModelConfig) -> MuPPlan {
    let p = cfg.parameterization;
    let width_ratio = cfg.base_width as f64 / cfg.width as f64;
    let hidden_lr = if p == Parameterization::Sp { 1.0 } else { width_ratio };
    let hidden_init = if p == Parameterization::Sp {
        "N(0, 0.02²); output projections ÷ √(2d)".to_string()
    } else {
        "U(±1/√fan_in)".to_string()
    };
    let zero_wd = p == Parameterization::MupPlusPlus;
    let wd = |exempt: bool| if exempt && zero_wd { 0.0 } else { LAMBDA0 };
    let groups = vec![
        GroupRecord {
            group: ParamGroup::Embedding,
            lr_multiplier: 1.0,
            init: "N(0, 0.02²)".into(),
            weight_decay: wd(true),
            weight_multiplier: 1.0,
        },
        GroupRecord {
            group: ParamGroup::Unembedding,
            lr_multiplier: 1.0,
            init: if cfg.tie_embeddings { "tied to embedding".into() } else { "N(0, 0.02²)".into() },
            weight_decay: wd(true),
            weight_multiplier: cfg.logit_multiplier(),
        },
        GroupRecord {
            group: ParamGroup::HiddenMatrix,
            lr_multiplier: hidden_lr,
            init: hidden_init,
            weight_decay: LAMBDA0,
            weight_multiplier: 1.0,
        },
        GroupRecord {
            group: ParamGroup::VectorLike,
            lr_multiplier: 1.0,
            init: "ones (norms), zeros (biases), layer-specific (SSM, λ)".into(),
            weight_decay: wd(true),
            weight_multiplier: 1.0,
        },
    ];
    MuPPlan {
        parameterization: p,
        groups,
        residual_multiplier: cfg.residual_multiplier(),
        logit_multiplier: cfg.logit_multiplier(),
        attention_scale: cfg.attn_logit_scale(),
        eta0: ETA0,
        b0: B0,
        t0: T0,
        d0: D0,
        lambda0: LAMBDA0,
        beta1: BETA1,
        beta2: BETA2,
        eps: ADAM_EPS,
    }
}

/// Training-compute estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsEstimate {
    /// `6·N·T` with `N` the non-embedding parameter count.
    pub baseline: f64,
    /// Baseline plus `6·w_attn·c` per token and attention layer, where `c`
    /// is the mean visible context of a causal sequence.
    pub with_attention: f64,
    pub nonembed_params: u64,
    pub estimator: &'static str,
}

pub fn flops_estimate(cfg: &ModelConfig, tokens: f64, seq_len: usize) -> Result<FlopsEstimate> {
    let counts = count_params(cfg)?;
    let plan = crate::arch::build_layer_plan(cfg)?;
    let n = counts.closed_nonembed;
    let baseline = 6.0 * n as f64 * tokens;
    let mean_ctx = |limit: usize| -> f64 {
        // average over positions t = 1..=L of min(t, limit)
        let l = seq_len.max(1);
        (1..=l).map(|t| t.min(limit) as f64).sum::<f64>() / l as f64
    };
    let mut per_token = 0.0;
    for &k in &plan.mixers {
        let ctx = match k {
            MixerKind::Swa => mean_ctx(cfg.window),
            MixerKind::Full | MixerKind::Cross => mean_ctx(usize::MAX),
            _ => 0.0,
        };
        per_token += 6.0 * cfg.attn_width() as f64 * ctx;
    }
    Ok(FlopsEstimate {
        baseline,
        with_attention: baseline + per_token * tokens,
        nonembed_params: n,
        estimator: "6NT (+ causal attention context term)",
    })
}

/// RMS of the residual stream entering the final norm, at initialisation,
/// for each width. Under a width-stable parameterization the values stay
/// within a narrow band.
pub fn coordinate_check(
    arch: Arch,
    depth: usize,
    widths: &[usize],
    parameterization: Parameterization,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    use rand::{Rng, SeedableRng};
    let mut out = Vec::with_capacity(widths.len());
    for &w in widths {
        let mut cfg = ModelConfig::desk(arch, depth, w)?;
        cfg.parameterization = parameterization;
        let model = crate::arch::Model::<f32>::new(cfg, seed)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..model.config.vocab_size)).collect();
        let (_, hidden) = model.forward_with_hidden(&tokens, 1)?;
        out.push((w, hidden.rms()));
    }
    Ok(out)
}

/// Ratio of the largest to the smallest value of a coordinate check.
pub fn band_ratio(check: &[(usize, f64)]) -> f64 {
    let max = check.iter().map(|c| c.1).fold(f64::MIN, f64::max);
    let min = check.iter().map(|c| c.1).fold(f64::MAX, f64::min);
    max / min
}
