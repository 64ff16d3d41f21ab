//! Architecture family: configuration, layer plans, parameter layout and
//! counting, initialisation, and the reference (graph) forward pass.

mod config;
mod model;
mod params;
mod plan;

pub use config::{Arch, MemorySource, ModelConfig, NormKind, Parameterization};
pub use model::{Block, ForwardNodes, Mixer, Model, ModelLayout};
pub use params::{
    count_params, init_weights, param_layout, InitRule, ParamBreakdown, ParamGroup, ParamId, ParamSpec,
    ParamStore, ssm_state_floats,
};
pub use plan::{build_layer_plan, LayerPlan, MixerKind, TapPoint};
