//! Forward pass: fusion-spec encoders, patch embedding, transformer fusion,
//! and the multi-encoder skip decoder.

use super::config::{ModelConfig, NORM_EPS};
use super::params::{
    decoder_stage_dims, encoder_block_dims, BoundParams, ModelParams, ENCODER_BLOCKS,
};
use crate::error::{shape_err, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Features from one CNN encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[K, W/8, H/8, D/8]`
    pub f: Var,
    /// Block outputs at scales 1, 1/2, 1/4.
    pub skips: [Var; 3],
}

/// Conv (3×3×3, padding 1) → optional instance norm → ReLU.
fn conv_block<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    prefix: &str,
    stride: usize,
    norm: bool,
) -> Result<Var> {
    let y = g.conv3d(
        x,
        p.get(&format!("{prefix}.w"))?,
        p.get(&format!("{prefix}.b"))?,
        stride,
        1,
    )?;
    let y = if norm {
        g.instance_norm(
            y,
            p.get(&format!("{prefix}.gamma"))?,
            p.get(&format!("{prefix}.beta"))?,
            NORM_EPS,
        )?
    } else {
        y
    };
    g.relu(y)
}

/// Channels `subset` of a `[N, W, H, D]` volume, in subset order.
pub fn select_modalities<T: Element>(
    g: &mut Graph<T>,
    input: Var,
    subset: &[usize],
) -> Result<Var> {
    let n = g.shape(input)[0];
    if subset.iter().any(|&m| m >= n) {
        return shape_err(
            "select_modalities",
            format!("{subset:?} out of range for {n} modalities"),
        );
    }
    if subset.len() == n && subset.iter().enumerate().all(|(i, &m)| i == m) {
        return Ok(input);
    }
    let parts = subset
        .iter()
        .map(|&m| g.slice(input, 0, m, 1))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat(&parts, 0)
}

/// Encoder `index`: three stride-2 stages, each preceded by a 3×3×3 block.
pub fn encoder_forward<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
    index: usize,
) -> Result<EncoderOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1..].iter().any(|e| e % 8 != 0) {
        return shape_err(
            "encoder",
            format!("input {shape:?} must be [C, W, H, D] with extents divisible by 8"),
        );
    }
    let w = p.get(&format!("enc{index}.stage1.w"))?;
    if g.shape(w)[1] != shape[0] {
        return shape_err(
            "encoder",
            format!(
                "encoder {index} expects {} channels, got {}",
                g.shape(w)[1],
                shape[0]
            ),
        );
    }
    let dims = encoder_block_dims(cfg, shape[0]);
    let mut h = x;
    let mut outs = Vec::with_capacity(6);
    for (name, (_, _, stride)) in ENCODER_BLOCKS.iter().zip(dims) {
        h = conv_block(
            g,
            h,
            p,
            &format!("enc{index}.{name}"),
            stride,
            cfg.instance_norm,
        )?;
        outs.push(h);
    }
    // stage1, stage2, stage3 feed the decoder; down3 is f
    Ok(EncoderOutput {
        f: outs[5],
        skips: [outs[0], outs[2], outs[4]],
    })
}

/// `[K, a, b, c]` → `[a/2 · b/2 · c/2, 8K]`: non-overlapping 2×2×2 patches in
/// row-major patch order, each flattened channel-major.
pub fn patch_tokens<T: Element>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 4 || s[1..].iter().any(|e| e % 2 != 0) {
        return shape_err(
            "patch_embed",
            format!("feature map {s:?} must have even spatial extents"),
        );
    }
    let (k, a, b, c) = (s[0], s[1] / 2, s[2] / 2, s[3] / 2);
    let split = g.reshape(f, &[k, a, 2, b, 2, c, 2])?;
    let moved = g.permute(split, &[1, 3, 5, 0, 2, 4, 6])?;
    g.reshape(moved, &[a * b * c, 8 * k])
}

/// Tokens from every encoder, concatenated in encoder order, projected to the
/// embedding width, plus the learned positional embedding.
pub fn patch_embed_and_position<T: Element>(
    g: &mut Graph<T>,
    f_list: &[Var],
    p: &BoundParams,
) -> Result<Var> {
    let Some(&first) = f_list.first() else {
        return shape_err("patch_embed", "no encoder features");
    };
    let base = g.shape(first).to_vec();
    let mut tokens = Vec::with_capacity(f_list.len());
    for &f in f_list {
        if g.shape(f) != base.as_slice() {
            return shape_err(
                "patch_embed",
                format!("{:?} differs from {base:?}", g.shape(f)),
            );
        }
        tokens.push(patch_tokens(g, f)?);
    }
    let all = if tokens.len() == 1 {
        tokens[0]
    } else {
        g.concat(&tokens, 0)?
    };
    let z = g.linear(all, p.get("embed.w")?, p.get("embed.b")?)?;
    let pos = p.get("embed.pos")?;
    if g.shape(pos) != g.shape(z) {
        return shape_err(
            "patch_embed",
            format!(
                "positional embedding {:?} vs tokens {:?}",
                g.shape(pos),
                g.shape(z)
            ),
        );
    }
    g.add(z, pos)
}

/// Multi-head self-attention over all `M` tokens.
pub fn msa<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    p: &BoundParams,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let (m, c) = (s[0], s[1]);
    if heads == 0 || c % heads != 0 {
        return shape_err("msa", format!("width {c} not divisible by {heads} heads"));
    }
    let dh = c / heads;
    let split = |g: &mut Graph<T>, proj: &str| -> Result<Var> {
        let y = g.linear(
            z,
            p.get(&format!("{prefix}.{proj}.w"))?,
            p.get(&format!("{prefix}.{proj}.b"))?,
        )?;
        let y = g.reshape(y, &[m, heads, dh])?;
        g.permute(y, &[1, 0, 2])
    };
    let q = split(g, "q")?;
    let k = split(g, "k")?;
    let v = split(g, "v")?;
    let scores = g.matmul(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores, 2)?;
    let ctx = g.matmul(attn, v, false, false)?;
    let ctx = g.permute(ctx, &[1, 0, 2])?;
    let ctx = g.reshape(ctx, &[m, c])?;
    g.linear(
        ctx,
        p.get(&format!("{prefix}.o.w"))?,
        p.get(&format!("{prefix}.o.b"))?,
    )
}

/// Pre-norm layer: `z* = MSA(LN(z)) + z`, then `MLP(LN(z*)) + z*`.
pub fn transformer_layer<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    p: &BoundParams,
    layer: usize,
    heads: usize,
) -> Result<Var> {
    let pre = format!("tf{layer}");
    let a = g.layer_norm(
        z,
        p.get(&format!("{pre}.ln1.gamma"))?,
        p.get(&format!("{pre}.ln1.beta"))?,
        NORM_EPS,
    )?;
    let a = msa(g, a, p, &format!("{pre}.attn"), heads)?;
    let mid = g.add(a, z)?;
    let b = g.layer_norm(
        mid,
        p.get(&format!("{pre}.ln2.gamma"))?,
        p.get(&format!("{pre}.ln2.beta"))?,
        NORM_EPS,
    )?;
    let b = g.linear(
        b,
        p.get(&format!("{pre}.mlp.fc1.w"))?,
        p.get(&format!("{pre}.mlp.fc1.b"))?,
    )?;
    let b = g.gelu(b)?;
    let b = g.linear(
        b,
        p.get(&format!("{pre}.mlp.fc2.w"))?,
        p.get(&format!("{pre}.mlp.fc2.b"))?,
    )?;
    g.add(b, mid)
}

pub fn transformer_encoder<T: Element>(
    g: &mut Graph<T>,
    z0: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    (0..cfg.layers).try_fold(z0, |z, l| transformer_layer(g, z, p, l, cfg.heads))
}

/// Tokens back to volumes, then three upsampling stages that each fuse the
/// same-scale skips of every encoder; ends in a 1×1×1 conv to class logits.
pub fn decoder_forward<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    encoders: &[EncoderOutput],
    p: &BoundParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    let e = encoders.len();
    let [a, b, c] = cfg.token_grid();
    let width = cfg.embed_dim;
    if g.shape(z) != [e * a * b * c, width] {
        return shape_err(
            "decoder",
            format!(
                "{:?} tokens do not match {e} encoders on a {a}x{b}x{c} grid",
                g.shape(z)
            ),
        );
    }
    let d = g.reshape(z, &[e, a, b, c, width])?;
    let d = g.permute(d, &[0, 4, 1, 2, 3])?;
    let d = g.reshape(d, &[e * width, a, b, c])?;
    let d = g.conv_transpose3d(d, p.get("dec.up0.w")?, p.get("dec.up0.b")?, 2)?;
    let mut d = conv_block(g, d, p, "dec.map", 1, cfg.instance_norm)?;

    for (scale, (stage, _, _)) in (0..3).rev().zip(decoder_stage_dims(cfg)) {
        let up = g.conv_transpose3d(
            d,
            p.get(&format!("dec.up{stage}.w"))?,
            p.get(&format!("dec.up{stage}.b"))?,
            2,
        )?;
        let mut parts = vec![up];
        for enc in encoders {
            let skip = enc.skips[scale];
            if g.shape(skip)[1..] != g.shape(up)[1..] {
                return shape_err(
                    "decoder",
                    format!(
                        "skip {:?} does not match upsampled {:?}",
                        g.shape(skip),
                        g.shape(up)
                    ),
                );
            }
            parts.push(skip);
        }
        let cat = g.concat(&parts, 0)?;
        d = conv_block(g, cat, p, &format!("dec.fuse{stage}"), 1, cfg.instance_norm)?;
    }
    g.conv3d(d, p.get("head.w")?, p.get("head.b")?, 1, 0)
}

/// Handles produced by [`model_forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Softmax over the class axis, `[num_classes, W, H, D]`.
    pub probs: Var,
    /// Transformer input `z0`, `[M, C]`.
    pub tokens: Var,
    pub encoders: usize,
}

pub fn model_forward<T: Element>(
    g: &mut Graph<T>,
    input: Var,
    cfg: &ModelConfig,
    p: &BoundParams,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let shape = g.shape(input).to_vec();
    let expected = [
        cfg.modalities,
        cfg.extents[0],
        cfg.extents[1],
        cfg.extents[2],
    ];
    if shape != expected {
        return shape_err(
            "model_forward",
            format!("input {shape:?}, config expects {expected:?}"),
        );
    }
    let spec = cfg.fusion_spec()?;
    let mut encoders = Vec::with_capacity(spec.num_encoders());
    for (j, subset) in spec.encoder_inputs.iter().enumerate() {
        let x = select_modalities(g, input, subset)?;
        encoders.push(encoder_forward(g, x, p, cfg, j)?);
    }
    let f_list: Vec<Var> = encoders.iter().map(|e| e.f).collect();
    let tokens = patch_embed_and_position(g, &f_list, p)?;
    let z = transformer_encoder(g, tokens, p, cfg)?;
    let logits = decoder_forward(g, z, &encoders, p, cfg)?;
    let probs = g.softmax(logits, 0)?;
    Ok(ForwardOutput {
        logits,
        probs,
        tokens,
        encoders: encoders.len(),
    })
}

/// Class probabilities for one volume without keeping the tape around.
pub fn predict<T: Element>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let x = g.constant(input.clone());
    let out = model_forward(&mut g, x, cfg, &p)?;
    Ok(g.value(out.probs).clone())
}
