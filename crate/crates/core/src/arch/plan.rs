use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{Arch, MemorySource, ModelConfig};
use crate::error::{Error, Result};

/// Token mixer of one layer; every layer is followed by a SwiGLU MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixerKind {
    Ssm,
    /// Sliding-window self attention.
    Swa,
    /// Full causal self attention.
    Full,
    /// Attention over the shared KV of the producer layer.
    Cross,
    Gmu,
}

impl MixerKind {
    pub fn label(self) -> &'static str {
        match self {
            MixerKind::Ssm => "SSM",
            MixerKind::Swa => "SWA",
            MixerKind::Full => "Full",
            MixerKind::Cross => "Cross",
            MixerKind::Gmu => "GMU",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, MixerKind::Swa | MixerKind::Full | MixerKind::Cross)
    }
}

/// The layer and representation feeding the GMUs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TapPoint {
    pub layer: usize,
    pub source: MemorySource,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerPlan {
    pub mixers: Vec<MixerKind>,
    /// First layer of the cross-decoder.
    pub cross_start: Option<usize>,
    /// Full-attention layer whose keys/values are shared by cross layers.
    pub kv_producer: Option<usize>,
    pub tap: Option<TapPoint>,
}

impl LayerPlan {
    pub fn depth(&self) -> usize {
        self.mixers.len()
    }

    pub fn count(&self, kind: MixerKind) -> usize {
        self.mixers.iter().filter(|&&k| k == kind).count()
    }

    /// Layers whose attention reads the shared KV (the producer included).
    pub fn shared_kv_readers(&self) -> usize {
        self.count(MixerKind::Cross) + usize::from(self.kv_producer.is_some())
    }

    /// Whether layer `l` belongs to the cross-decoder.
    pub fn in_cross_decoder(&self, l: usize) -> bool {
        self.cross_start.is_some_and(|s| l >= s)
    }
}

impl fmt::Display for LayerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:<7} {:<14} note", "layer", "mixer", "decoder")?;
        for (l, k) in self.mixers.iter().enumerate() {
            let part = match self.cross_start {
                Some(s) if l >= s => "cross",
                Some(_) => "self",
                None => "-",
            };
            let mut notes = Vec::new();
            if self.kv_producer == Some(l) {
                notes.push("shared KV producer".to_string());
            }
            if let Some(t) = self.tap.filter(|t| t.layer == l) {
                notes.push(format!("memory tap ({:?})", t.source));
            }
            writeln!(f, "{l:>5}  {:<7} {part:<14} {}", format!("{}+MLP", k.label()), notes.join(", "))?;
        }
        Ok(())
    }
}

/// Expand an architecture into its ordered layer plan.
pub fn build_layer_plan(config: &ModelConfig) -> Result<LayerPlan> {
    use MixerKind::*;
    let d = config.depth;
    let arch = config.arch;
    if d == 0 {
        return Err(Error::Config("depth must be positive".into()));
    }
    if arch != Arch::TransformerPP && d % 4 != 0 {
        return Err(Error::Config(format!("{arch} requires depth divisible by 4 (got {d})")));
    }
    let half = d / 2;
    let samba_self = || -> Vec<MixerKind> { (0..half).map(|i| if i % 2 == 0 { Ssm } else { Swa }).collect() };
    // [Full(producer), GMU, Cross, GMU, Cross, ...]
    let gmu_cross = || -> Vec<MixerKind> {
        let mut v = vec![Full];
        v.extend((1..half).map(|i| if i % 2 == 1 { Gmu } else { Cross }));
        v
    };

    let plan = match arch {
        Arch::TransformerPP => LayerPlan {
            mixers: vec![Full; d],
            cross_start: None,
            kv_producer: None,
            tap: None,
        },
        Arch::TransformerLS => LayerPlan {
            mixers: (0..d).map(|i| if i % 4 == 3 { Full } else { Swa }).collect(),
            cross_start: None,
            kv_producer: None,
            tap: None,
        },
        Arch::SambaYoco => {
            let mut m = samba_self();
            m.push(Full);
            m.extend(std::iter::repeat(Cross).take(half - 1));
            LayerPlan {
                mixers: m,
                cross_start: Some(half),
                kv_producer: Some(half),
                tap: None,
            }
        }
        Arch::SambaY | Arch::SambaYDA | Arch::SambaYA | Arch::SambaYMlp | Arch::MambaY => {
            let mut m = if arch == Arch::MambaY { vec![Ssm; half] } else { samba_self() };
            m.extend(gmu_cross());
            let source = arch.memory_source().expect("GMU arch has a memory source");
            let layer = match source {
                MemorySource::LastSsm => m[..half].iter().rposition(|&k| k == Ssm).expect("self-decoder has an SSM"),
                _ => half,
            };
            LayerPlan {
                mixers: m,
                cross_start: Some(half),
                kv_producer: Some(half),
                tap: Some(TapPoint { layer, source }),
            }
        }
        Arch::SambaYAA => {
            let mut m = samba_self();
            *m.last_mut().expect("non-empty self-decoder") = Full;
            m.extend(std::iter::repeat(Gmu).take(half));
            LayerPlan {
                mixers: m,
                cross_start: Some(half),
                kv_producer: None,
                tap: Some(TapPoint {
                    layer: half - 1,
                    source: MemorySource::MiddleAttention,
                }),
            }
        }
    };
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use MixerKind::*;

    fn plan(arch: Arch, d: usize) -> LayerPlan {
        build_layer_plan(&ModelConfig::desk(arch, d, 128).unwrap()).unwrap()
    }

    #[test]
    fn sambay_depth_eight() {
        let p = plan(Arch::SambaY, 8);
        assert_eq!(p.mixers, vec![Ssm, Swa, Ssm, Swa, Full, Gmu, Cross, Gmu]);
        assert_eq!(p.tap.unwrap().layer, 2);
        assert_eq!(p.kv_producer, Some(4));
        assert_eq!(p.cross_start, Some(4));
    }

    #[test]
    fn yoco_and_ls_depth_eight() {
        assert_eq!(plan(Arch::SambaYoco, 8).mixers, vec![Ssm, Swa, Ssm, Swa, Full, Cross, Cross, Cross]);
        assert_eq!(plan(Arch::TransformerLS, 8).mixers, vec![Swa, Swa, Swa, Full, Swa, Swa, Swa, Full]);
    }

    #[test]
    fn sambay_quarter_counts() {
        for d in [4, 8, 12, 16, 20, 24, 32] {
            let p = plan(Arch::SambaY, d);
            for k in [Ssm, Swa, Gmu] {
                assert_eq!(p.count(k), d / 4, "{k:?} at d={d}");
            }
            assert_eq!(p.shared_kv_readers(), d / 4);
            assert_eq!(p.depth(), d);
        }
    }

    #[test]
    fn ablation_taps() {
        let a = plan(Arch::SambaYA, 8);
        assert_eq!(a.mixers, plan(Arch::SambaY, 8).mixers);
        assert_eq!(a.tap.unwrap(), TapPoint { layer: 4, source: MemorySource::LastAttention });
        let aa = plan(Arch::SambaYAA, 8);
        assert_eq!(aa.mixers, vec![Ssm, Swa, Ssm, Full, Gmu, Gmu, Gmu, Gmu]);
        assert_eq!(aa.tap.unwrap().layer, 3);
        assert_eq!(aa.kv_producer, None);
        let m = plan(Arch::MambaY, 8);
        assert_eq!(m.mixers, vec![Ssm, Ssm, Ssm, Ssm, Full, Gmu, Cross, Gmu]);
        assert_eq!(m.tap.unwrap().layer, 3);
    }
}
