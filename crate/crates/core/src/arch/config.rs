use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architectures in the decoder-hybrid-decoder family and their baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "Transformer++")]
    TransformerPP,
    #[serde(rename = "TransformerLS")]
    TransformerLS,
    #[serde(rename = "SambaY")]
    SambaY,
    #[serde(rename = "SambaY+DA")]
    SambaYDA,
    #[serde(rename = "Samba+YOCO")]
    SambaYoco,
    #[serde(rename = "SambaY-A")]
    SambaYA,
    #[serde(rename = "SambaY-AA")]
    SambaYAA,
    #[serde(rename = "SambaY-MLP")]
    SambaYMlp,
    #[serde(rename = "MambaY")]
    MambaY,
}

impl Arch {
    pub const ALL: [Arch; 9] = [
        Arch::TransformerPP,
        Arch::TransformerLS,
        Arch::SambaY,
        Arch::SambaYDA,
        Arch::SambaYoco,
        Arch::SambaYA,
        Arch::SambaYAA,
        Arch::SambaYMlp,
        Arch::MambaY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::TransformerPP => "Transformer++",
            Arch::TransformerLS => "TransformerLS",
            Arch::SambaY => "SambaY",
            Arch::SambaYDA => "SambaY+DA",
            Arch::SambaYoco => "Samba+YOCO",
            Arch::SambaYA => "SambaY-A",
            Arch::SambaYAA => "SambaY-AA",
            Arch::SambaYMlp => "SambaY-MLP",
            Arch::MambaY => "MambaY",
        }
    }

    /// Pure-attention baselines use RoPE; hybrids use no positional encoding.
    pub fn is_transformer(self) -> bool {
        matches!(self, Arch::TransformerPP | Arch::TransformerLS)
    }

    /// Self-decoder / cross-decoder split.
    pub fn is_decoder_decoder(self) -> bool {
        !self.is_transformer()
    }

    /// Where the GMUs take their memory from, if the arch has GMUs.
    pub fn memory_source(self) -> Option<MemorySource> {
        match self {
            Arch::SambaY | Arch::SambaYDA | Arch::MambaY => Some(MemorySource::LastSsm),
            Arch::SambaYA => Some(MemorySource::LastAttention),
            Arch::SambaYAA => Some(MemorySource::MiddleAttention),
            Arch::SambaYMlp => Some(MemorySource::MlpBranch),
            _ => None,
        }
    }

    /// `(c₁, c₂)` in the iso-parametric equation `c₁α + c₂α² = 237568`
    /// (per `d³`), for the reference-scale bookkeeping of this arch.
    pub fn iso_polynomial(self) -> (f64, f64) {
        match self {
            Arch::TransformerPP | Arch::TransformerLS => (0.0, 14.5),
            Arch::SambaY | Arch::SambaYDA => (144.0, 14.5),
            Arch::SambaYoco | Arch::SambaYA | Arch::SambaYAA => (208.0, 13.5),
            Arch::SambaYMlp => (144.0, 15.5),
            Arch::MambaY => (64.0, 16.0),
        }
    }

    pub fn uses_diff_attention(self) -> bool {
        self == Arch::SambaYDA
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        let arch = match key.as_str() {
            "transformer++" | "transformerpp" | "tfpp" => Arch::TransformerPP,
            "transformerls" | "tfls" => Arch::TransformerLS,
            "sambay" => Arch::SambaY,
            "sambay+da" | "sambayda" => Arch::SambaYDA,
            "samba+yoco" | "sambayoco" => Arch::SambaYoco,
            "sambaya" => Arch::SambaYA,
            "sambayaa" => Arch::SambaYAA,
            "sambaymlp" => Arch::SambaYMlp,
            "mambay" => Arch::MambaY,
            _ => return Err(Error::Config(format!("unknown architecture `{s}`"))),
        };
        Ok(arch)
    }
}

/// Which intermediate representation the GMUs gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemorySource {
    /// Scan output of the last SSM layer of the self-decoder (`d_h = 2w`).
    LastSsm,
    /// Pre-output-projection heads of the shared-KV producer (`d_h = w_attn`).
    LastAttention,
    /// Pre-output-projection heads of the full-attention layer in the middle
    /// of the stack (`d_h = w_attn`).
    MiddleAttention,
    /// Linear (up) branch of the SwiGLU following the producer (`d_h = w_mlp`).
    MlpBranch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Sp,
    Mup,
    #[serde(rename = "mupp")]
    MupPlusPlus,
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sp" => Ok(Parameterization::Sp),
            "mup" | "μp" => Ok(Parameterization::Mup),
            "mupp" | "mup++" | "μp++" => Ok(Parameterization::MupPlusPlus),
            _ => Err(Error::Config(format!("unknown parameterization `{s}` (sp, mup, mupp)"))),
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameterization::Sp => "SP",
            Parameterization::Mup => "μP",
            Parameterization::MupPlusPlus => "μP++",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rms,
    Layer,
}

/// Complete model description. Reference-scale configs tie `width = α·d`;
/// desk-scale configs set the width directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub depth: usize,
    /// Model width `w`.
    pub width: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub mlp_width: usize,
    /// Sliding-window size (visible keys per query).
    pub window: usize,
    pub vocab_size: usize,
    pub parameterization: Parameterization,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    /// Normalise the gated product inside GMUs (nGMU).
    #[serde(default)]
    pub normalized_gmu: bool,
    #[serde(default = "default_rope")]
    pub rope_base: f64,
    /// Width at which μP multipliers equal one.
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_state")]
    pub ssm_state: usize,
    #[serde(default = "default_conv")]
    pub ssm_conv: usize,
    /// Override for the Differential Attention `λ_init` (otherwise depth
    /// dependent).
    #[serde(default)]
    pub lambda_init_override: Option<f64>,
}

fn default_true() -> bool {
    true
}
fn default_norm() -> NormKind {
    NormKind::Rms
}
fn default_eps() -> f64 {
    1e-5
}
fn default_rope() -> f64 {
    10000.0
}
fn default_base_width() -> usize {
    128
}
fn default_state() -> usize {
    16
}
fn default_conv() -> usize {
    4
}

impl ModelConfig {
    /// Scaling-study configuration: `w = α·d`, `h_q = d`, `h_kv = d/4`,
    /// head dim 128, `w_mlp = 4w`, 32K vocabulary, window 128, μP++.
    pub fn reference_scale(arch: Arch, depth: usize) -> Result<Self> {
        let alpha = crate::scaling::solve_aspect_ratio(arch.iso_polynomial())?;
        let width = alpha * depth;
        let cfg = Self {
            arch,
            depth,
            width,
            n_heads: depth,
            n_kv_heads: (depth / 4).max(1),
            head_dim: 128,
            mlp_width: 4 * width,
            window: 128,
            vocab_size: 32000,
            parameterization: Parameterization::MupPlusPlus,
            tie_embeddings: true,
            norm: NormKind::Rms,
            norm_eps: 1e-5,
            normalized_gmu: false,
            rope_base: 10000.0,
            base_width: 128 * 16,
            ssm_state: 16,
            ssm_conv: 4,
            lambda_init_override: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Small configuration for tests and CPU runs: head dim 32,
    /// `h_q = w/32`, GQA group 4 where possible, byte vocabulary.
    pub fn desk(arch: Arch, depth: usize, width: usize) -> Result<Self> {
        let head_dim = 32;
        let n_heads = (width / head_dim).max(1);
        let n_kv_heads = if n_heads % 4 == 0 { n_heads / 4 } else { 1 };
        let cfg = Self {
            arch,
            depth,
            width,
            n_heads,
            n_kv_heads,
            head_dim,
            mlp_width: 4 * width,
            window: 128,
            vocab_size: 259,
            parameterization: Parameterization::MupPlusPlus,
            tie_embeddings: true,
            norm: NormKind::Rms,
            norm_eps: 1e-5,
            normalized_gmu: false,
            rope_base: 10000.0,
            base_width: 128,
            ssm_state: 16,
            ssm_conv: 4,
            lambda_init_override: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// `α = w / d` (fractional at desk scale).
    pub fn aspect_ratio(&self) -> f64 {
        self.width as f64 / self.depth as f64
    }

    pub fn memory_source(&self) -> Option<MemorySource> {
        self.arch.memory_source()
    }

    /// Width of the tapped memory `d_h`.
    pub fn memory_width(&self) -> Option<usize> {
        self.memory_source().map(|m| match m {
            MemorySource::LastSsm => 2 * self.width,
            MemorySource::LastAttention | MemorySource::MiddleAttention => self.attn_width(),
            MemorySource::MlpBranch => self.mlp_width,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.width == 0 {
            return bad("depth and width must be positive".into());
        }
        if self.arch != Arch::TransformerPP && self.depth % 4 != 0 {
            return bad(format!(
                "{} requires depth divisible by 4 (got {})",
                self.arch, self.depth
            ));
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "{} query heads cannot be grouped over {} kv heads",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.head_dim == 0 || self.mlp_width == 0 || self.window == 0 || self.vocab_size == 0 {
            return bad("head_dim, mlp_width, window and vocab_size must be positive".into());
        }
        if self.arch.is_transformer() && self.head_dim % 2 != 0 {
            return bad("rotary embedding needs an even head_dim".into());
        }
        if self.arch.uses_diff_attention() && self.head_dim % 2 != 0 {
            return bad("differential attention needs an even head_dim".into());
        }
        if self.norm_eps <= 0.0 || self.ssm_state == 0 || self.ssm_conv == 0 || self.base_width == 0 {
            return bad("norm_eps, ssm_state, ssm_conv and base_width must be positive".into());
        }
        Ok(())
    }

    /// Residual-branch multiplier: `1/√(2d)` under μP++, else 1.
    pub fn residual_multiplier(&self) -> f64 {
        match self.parameterization {
            Parameterization::MupPlusPlus => 1.0 / (2.0 * self.depth as f64).sqrt(),
            _ => 1.0,
        }
    }

    /// Output-logit multiplier: `base_width / w` under μP and μP++.
    pub fn logit_multiplier(&self) -> f64 {
        match self.parameterization {
            Parameterization::Sp => 1.0,
            _ => self.base_width as f64 / self.width as f64,
        }
    }

    /// Attention logit scale. Under μP++ it is `1/√α` with `α = w/d`;
    /// otherwise `1/√d_k`, where Differential Attention uses half-width keys.
    pub fn attn_logit_scale(&self) -> f64 {
        match self.parameterization {
            Parameterization::MupPlusPlus => 1.0 / self.aspect_ratio().sqrt(),
            _ => {
                let dk = if self.arch.uses_diff_attention() {
                    self.head_dim / 2
                } else {
                    self.head_dim
                };
                1.0 / (dk as f64).sqrt()
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Format { what: "model config".into(), detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_names_round_trip() {
        for a in Arch::ALL {
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
            let j = serde_json::to_string(&a).unwrap();
            assert_eq!(serde_json::from_str::<Arch>(&j).unwrap(), a);
        }
        assert_eq!("samba-yoco".parse::<Arch>().unwrap(), Arch::SambaYoco);
        assert!("GPT".parse::<Arch>().is_err());
    }

    #[test]
    fn depth_must_divide_by_four_for_hybrids() {
        assert!(ModelConfig::desk(Arch::SambaY, 10, 128).is_err());
        assert!(ModelConfig::desk(Arch::TransformerPP, 10, 128).is_ok());
    }

    #[test]
    fn config_json_round_trip_and_unknown_fields() {
        let c = ModelConfig::desk(Arch::SambaYMlp, 8, 128).unwrap();
        assert_eq!(ModelConfig::from_json(&c.to_json()).unwrap(), c);
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["bogus"] = 1.into();
        assert!(matches!(ModelConfig::from_json(&v.to_string()), Err(Error::Format { .. })));
    }
}
