//! Independent reference implementations used by the integration tests. None
//! of these call into the engine's kernels.
#![allow(dead_code, unused_imports, clippy::needless_range_loop)]

mod losses;
pub use losses::*;

use hftrans::metrics::BinaryMask;
use hftrans::model::{ModelConfig, ModelParams};
use hftrans::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Plain six-deep loop cross-correlation with zero padding.
pub fn conv3d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [cin, iw, ih, id] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [cout, _, k, _, _] = [
        w.shape()[0],
        w.shape()[1],
        w.shape()[2],
        w.shape()[3],
        w.shape()[4],
    ];
    let out_len = |n: usize| (n + 2 * pad - k) / stride + 1;
    let (ow, oh, od) = (out_len(iw), out_len(ih), out_len(id));
    let mut out = Tensor::zeros(&[cout, ow, oh, od]);
    for co in 0..cout {
        for ox in 0..ow {
            for oy in 0..oh {
                for oz in 0..od {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for a in 0..k {
                            for bb in 0..k {
                                for c in 0..k {
                                    let ix = (ox * stride + a) as isize - pad as isize;
                                    let iy = (oy * stride + bb) as isize - pad as isize;
                                    let iz = (oz * stride + c) as isize - pad as isize;
                                    if ix < 0 || iy < 0 || iz < 0 {
                                        continue;
                                    }
                                    let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
                                    if ix >= iw || iy >= ih || iz >= id {
                                        continue;
                                    }
                                    acc += x.at(&[ci, ix, iy, iz]) * w.at(&[co, ci, a, bb, c]);
                                }
                            }
                        }
                    }
                    let o = out.offset(&[co, ox, oy, oz]);
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution as: interleave `stride − 1` zeros between input
/// voxels, pad by `k − 1`, correlate with the flipped, channel-swapped kernel,
/// then crop `(k − stride)/2` from each side.
pub fn conv_transpose3d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
) -> Tensor<f64> {
    let cin = x.shape()[0];
    let ext = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let cout = w.shape()[1];
    let k = w.shape()[2];
    let up = ext.map(|n| (n - 1) * stride + 1 + 2 * (k - 1));
    let mut z = Tensor::zeros(&[cin, up[0], up[1], up[2]]);
    for ci in 0..cin {
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for l in 0..ext[2] {
                    let o = z.offset(&[
                        ci,
                        k - 1 + i * stride,
                        k - 1 + j * stride,
                        k - 1 + l * stride,
                    ]);
                    z.data_mut()[o] = x.at(&[ci, i, j, l]);
                }
            }
        }
    }
    let flipped = Tensor::from_fn(&[cout, cin, k, k, k], |idx| {
        let c = idx % k;
        let bb = (idx / k) % k;
        let a = (idx / (k * k)) % k;
        let ci = (idx / (k * k * k)) % cin;
        let co = idx / (k * k * k * cin);
        w.at(&[ci, co, k - 1 - a, k - 1 - bb, k - 1 - c])
    });
    let full = conv3d_oracle(&z, &flipped, b, 1, 0);
    let crop = (k - stride) / 2;
    let out_ext = ext.map(|n| n * stride);
    Tensor::from_fn(&[cout, out_ext[0], out_ext[1], out_ext[2]], |idx| {
        let c = idx % out_ext[2];
        let bb = (idx / out_ext[2]) % out_ext[1];
        let a = (idx / (out_ext[2] * out_ext[1])) % out_ext[0];
        let co = idx / (out_ext[0] * out_ext[1] * out_ext[2]);
        full.at(&[co, a + crop, bb + crop, c + crop])
    })
}

/// `x [rows, din] · wᵀ + b` by explicit triple loop.
pub fn linear_oracle(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    rows: usize,
    din: usize,
    dout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b[o];
            for i in 0..din {
                acc += x[r * din + i] * w[o * din + i];
            }
            out[r * dout + o] = acc;
        }
    }
    out
}

/// Mean and population variance by two passes.
pub fn layer_norm_oracle(row: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    row.iter()
        .map(|x| (x - mean) / (var + eps).sqrt())
        .collect()
}

pub fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn centres(m: &BinaryMask, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let [_, h, d] = m.extents;
    m.voxels
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| {
            [
                (i / (h * d)) as f64 * spacing[0],
                ((i / d) % h) as f64 * spacing[1],
                (i % d) as f64 * spacing[2],
            ]
        })
        .collect()
}

/// All-pairs 95th-percentile Hausdorff distance.
pub fn hd95_oracle(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> f64 {
    let pa = centres(a, spacing);
    let pb = centres(b, spacing);
    if pa.is_empty() && pb.is_empty() {
        return 0.0;
    }
    if pa.is_empty() || pb.is_empty() {
        return a
            .extents
            .iter()
            .zip(spacing)
            .map(|(&e, s)| (e as f64 * s) * (e as f64 * s))
            .sum::<f64>()
            .sqrt();
    }
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = (0.95 * d.len() as f64).ceil() as usize;
        d[rank - 1]
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

/// Closed-form parameter count of the whole network, layer by layer.
pub fn parameter_count_oracle(cfg: &ModelConfig, encoder_inputs: &[usize]) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * (cin * k * k * k + 1);
    let norm = |c: usize| if cfg.instance_norm { 2 * c } else { 0 };
    let (b, kk, c, r) = (
        cfg.base_width,
        cfg.encoder_channels,
        cfg.embed_dim,
        cfg.mlp_ratio,
    );
    let e = encoder_inputs.len();
    let mut total = 0;
    for &n in encoder_inputs {
        for (cin, cout) in [
            (n, b),
            (b, 2 * b),
            (2 * b, 2 * b),
            (2 * b, 4 * b),
            (4 * b, 4 * b),
            (4 * b, kk),
        ] {
            total += conv(cin, cout, 3) + norm(cout);
        }
    }
    let m = e * cfg.extents.iter().map(|x| x / 16).product::<usize>();
    total += 8 * kk * c + c + m * c;
    total += cfg.layers * (4 * c + 4 * (c * c + c) + (c * r * c + r * c) + (r * c * c + c));
    total += e * c * e * c * 8 + e * c;
    total += conv(e * c, kk, 3) + norm(kk);
    for (cin, cout) in [(kk, 4 * b), (4 * b, 2 * b), (2 * b, b)] {
        total += cin * cout * 8 + cout;
        total += conv(cout * (1 + e), cout, 3) + norm(cout);
    }
    total + cfg.num_classes * (b + 1)
}

/// Multiply-accumulates written out as a flat table of per-layer rows.
pub fn flops_oracle(cfg: &ModelConfig, encoder_inputs: &[usize]) -> u64 {
    let v = |div: usize| (cfg.extents[0] / div) * (cfg.extents[1] / div) * (cfg.extents[2] / div);
    let (b, kk, c, r) = (
        cfg.base_width,
        cfg.encoder_channels,
        cfg.embed_dim,
        cfg.mlp_ratio,
    );
    let e = encoder_inputs.len();
    let m = e * v(16);
    let mut rows: Vec<usize> = Vec::new();
    for &n in encoder_inputs {
        rows.push(b * n * 27 * v(1));
        rows.push(2 * b * b * 27 * v(2));
        rows.push(2 * b * 2 * b * 27 * v(2));
        rows.push(4 * b * 2 * b * 27 * v(4));
        rows.push(4 * b * 4 * b * 27 * v(4));
        rows.push(kk * 4 * b * 27 * v(8));
    }
    rows.push(m * 8 * kk * c);
    for _ in 0..cfg.layers {
        rows.push(4 * m * c * c);
        rows.push(2 * m * m * c);
        rows.push(2 * m * c * r * c);
    }
    rows.push(e * c * e * c * 8 * v(16));
    rows.push(kk * e * c * 27 * v(8));
    rows.push(kk * 4 * b * 8 * v(8));
    rows.push(4 * b * (4 * b * (1 + e)) * 27 * v(4));
    rows.push(4 * b * 2 * b * 8 * v(4));
    rows.push(2 * b * (2 * b * (1 + e)) * 27 * v(2));
    rows.push(2 * b * b * 8 * v(2));
    rows.push(b * (b * (1 + e)) * 27 * v(1));
    rows.push(cfg.num_classes * b * v(1));
    rows.iter().map(|&x| x as u64).sum()
}

/// Smallest widths the architecture allows, for fast checks.
pub fn tiny_config(modalities: usize, extent: usize) -> ModelConfig {
    ModelConfig {
        modalities,
        extents: [extent; 3],
        base_width: 2,
        encoder_channels: 2,
        embed_dim: 4,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        ..Default::default()
    }
}

/// Zeroes the attention output projection and second MLP layer of every
/// transformer layer.
pub fn zero_residual_branches<T: hftrans::tensor::Element>(
    params: &mut ModelParams<T>,
    layers: usize,
) {
    for l in 0..layers {
        for name in ["attn.o.w", "attn.o.b", "mlp.fc2.w", "mlp.fc2.b"] {
            let t = params.get_mut(&format!("tf{l}.{name}")).unwrap();
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}
