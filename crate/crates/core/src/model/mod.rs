//! The ViT-P network: configuration, parameter storage, and forward pass.

pub mod check;
pub mod config;
pub mod params;
pub mod vit;

pub use check::{model_grad_check, GradCheckReport};
pub use config::{BiasMode, Preset, ViTPConfig, IN_CHANNELS};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use vit::{AttentionMaps, AttentionWeights, ForwardOptions, ForwardPass, ViTPModel};
