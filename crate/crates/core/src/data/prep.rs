use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::VolumeSample;
use crate::error::{shape_err, Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::Tensor;

/// Standardizes each modality over the foreground to mean 0 and standard
/// deviation 1; background voxels are left untouched.
pub fn zscore_normalize(sample: &VolumeSample) -> Result<VolumeSample> {
    let fg = &sample.foreground.voxels;
    let count = fg.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::Config(
            "z-score normalization needs a nonempty foreground".into(),
        ));
    }
    let v = fg.len();
    let mut out = sample.clone();
    for (m, chan) in out.modalities.data_mut().chunks_mut(v).enumerate() {
        let vals = || {
            chan.iter()
                .zip(fg)
                .filter(|(_, &b)| b)
                .map(|(&x, _)| x as f64)
        };
        let mean = vals().sum::<f64>() / count as f64;
        let var = vals().map(|x| (x - mean).powi(2)).sum::<f64>() / count as f64;
        let std = var.sqrt();
        if std < 1e-8 {
            return Err(Error::Config(format!(
                "modality {m} is constant over the foreground (std {std:e})"
            )));
        }
        for (x, _) in chan.iter_mut().zip(fg).filter(|(_, &b)| b) {
            *x = ((*x as f64 - mean) / std) as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into `k` validation folds whose sizes differ
/// by at most one (the first `n % k` folds take the extra sample).
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!(
            "need 2 <= k <= n for k-fold, got k = {k}, n = {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = n / k + usize::from(f < n % k);
        let mut validation = order[start..start + len].to_vec();
        validation.sort_unstable();
        let train = (0..n)
            .filter(|i| validation.binary_search(i).is_err())
            .collect();
        folds.push(Fold { train, validation });
        start += len;
    }
    Ok(folds)
}

fn resize<T: Copy>(src: &[T], from: [usize; 3], to: [usize; 3], fill: T) -> Vec<T> {
    let mut out = vec![fill; to.iter().product()];
    let run = from[2].min(to[2]);
    for x in 0..from[0].min(to[0]) {
        for y in 0..from[1].min(to[1]) {
            let s = (x * from[1] + y) * from[2];
            let d = (x * to[1] + y) * to[2];
            out[d..d + run].copy_from_slice(&src[s..s + run]);
        }
    }
    out
}

fn reshape_sample(sample: &VolumeSample, to: [usize; 3]) -> Result<VolumeSample> {
    let from = sample.extents();
    let v: usize = from.iter().product();
    let data: Vec<f32> = sample
        .modalities
        .data()
        .chunks(v)
        .flat_map(|c| resize(c, from, to, 0.0))
        .collect();
    let n = sample.num_modalities();
    let labels = resize(&sample.labels.labels, from, to, 0);
    VolumeSample::new(
        Tensor::new(vec![n, to[0], to[1], to[2]], data)?,
        LabelVolume::new(to, sample.spacing(), labels)?,
    )
}

/// Zero-pads the high side of every axis up to a multiple of `m`; returns the
/// padded sample and the original extents.
pub fn pad_to_multiple(sample: &VolumeSample, m: usize) -> Result<(VolumeSample, [usize; 3])> {
    if m == 0 {
        return Err(Error::Config("padding multiple must be positive".into()));
    }
    let from = sample.extents();
    let to = from.map(|e| e.div_ceil(m) * m);
    if to == from {
        return Ok((sample.clone(), from));
    }
    Ok((reshape_sample(sample, to)?, from))
}

/// Keeps the low corner `extents` of the sample (inverse of [`pad_to_multiple`]).
pub fn crop_to(sample: &VolumeSample, extents: [usize; 3]) -> Result<VolumeSample> {
    let from = sample.extents();
    if extents.iter().zip(from).any(|(&e, f)| e == 0 || e > f) {
        return shape_err("crop_to", format!("cannot crop {from:?} to {extents:?}"));
    }
    reshape_sample(sample, extents)
}

/// Keeps the low corner `extents` of a label map.
pub fn crop_labels(labels: &LabelVolume, extents: [usize; 3]) -> Result<LabelVolume> {
    if extents
        .iter()
        .zip(labels.extents)
        .any(|(&e, f)| e == 0 || e > f)
    {
        return shape_err(
            "crop_labels",
            format!("cannot crop {:?} to {extents:?}", labels.extents),
        );
    }
    LabelVolume::new(
        extents,
        labels.spacing,
        resize(&labels.labels, labels.extents, extents, 0),
    )
}
