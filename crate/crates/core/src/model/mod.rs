//! Generative Equilibrium Transformer and ViT baseline.
//!
//! Both models map a noise image to a clean image in one network evaluation.
//! GET splits the network into an injection transformer, run once, and a
//! weight-tied equilibrium transformer iterated `K` times from zero.

mod accounting;
mod config;
mod forward;
mod layers;
mod params;

pub use accounting::{count_flops, count_params, equilibrium_macs};
pub use config::{default_heads, GetConfig, ImageDims, ModelConfig, VitConfig, DEFAULT_EXPANSION};
pub use forward::{
    class_token, embed, equilibrium_inputs, equilibrium_step, get_forward, injection_transform,
    vit_forward, Model,
};
pub use layers::{
    attention_with_injection, patch_index, patchify, sinusoidal_pos_encoding, transformer_block,
    unpatchify, unpatchify_var, LN_EPS,
};
pub use params::{BlockVars, ModelParams, ParamVars, POS_EMBED};

#[cfg(test)]
mod tests;
