//! Analytic multiply-accumulate counts for one forward pass.

use super::config::ModelConfig;
use super::params::{decoder_stage_dims, encoder_block_dims};
use crate::error::Result;

pub fn conv_macs(cin: usize, cout: usize, k: usize, out_voxels: usize) -> u64 {
    (cout * cin * k * k * k * out_voxels) as u64
}

/// Transposed conv: every input voxel scatters `Cout · k³` products per input channel.
pub fn conv_transpose_macs(cin: usize, cout: usize, k: usize, in_voxels: usize) -> u64 {
    (cin * cout * k * k * k * in_voxels) as u64
}

pub fn linear_macs(rows: usize, din: usize, dout: usize) -> u64 {
    (rows * din * dout) as u64
}

/// `QKᵀ` and `attn · V`: `2 · M² · C`.
pub fn attention_macs(tokens: usize, width: usize) -> u64 {
    (2 * tokens * tokens * width) as u64
}

/// Multiply-accumulates of one forward pass. Normalization, activations and
/// softmax are not counted.
pub fn estimate_flops(cfg: &ModelConfig) -> Result<u64> {
    cfg.validate()?;
    let spec = cfg.fusion_spec()?;
    let e = spec.num_encoders();
    let vol = |div: usize| cfg.extents.iter().map(|x| x / div).product::<usize>();

    let mut total = 0u64;
    for inputs in &spec.encoder_inputs {
        let mut scale = 1;
        for (cin, cout, stride) in encoder_block_dims(cfg, inputs.len()) {
            scale *= stride;
            total += conv_macs(cin, cout, 3, vol(scale));
        }
    }

    let c = cfg.embed_dim;
    let m = e * cfg.tokens_per_encoder();
    total += linear_macs(m, 8 * cfg.encoder_channels, c);
    for _ in 0..cfg.layers {
        total += 4 * linear_macs(m, c, c);
        total += attention_macs(m, c);
        total += 2 * linear_macs(m, c, cfg.mlp_ratio * c);
    }

    total += conv_transpose_macs(e * c, e * c, 2, vol(16));
    total += conv_macs(e * c, cfg.encoder_channels, 3, vol(8));
    let mut div = 8;
    for (_, cin, cout) in decoder_stage_dims(cfg) {
        total += conv_transpose_macs(cin, cout, 2, vol(div));
        div /= 2;
        total += conv_macs(cout + e * cout, cout, 3, vol(div));
    }
    total += conv_macs(cfg.base_width, cfg.num_classes, 1, vol(1));
    Ok(total)
}
