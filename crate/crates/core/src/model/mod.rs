//! The hybrid-fusion segmentation network.

pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod forward;
pub mod fusion;
pub mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use complexity::estimate_flops;
pub use config::{FusionMode, ModelConfig};
pub use forward::{
    decoder_forward, encoder_forward, model_forward, msa, patch_embed_and_position, predict,
    transformer_encoder, transformer_layer, EncoderOutput, ForwardOutput,
};
pub use fusion::{make_fusion_spec, FusionSpec};
pub use params::{count_parameters, param_specs, BoundParams, ModelParams};
