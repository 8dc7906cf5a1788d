//! Synthetic multimodal phantoms, preprocessing, volume files and splits.

mod io;
mod phantom;
mod prep;

pub use io::{
    load_manifest, read_intensities, read_labels, read_manifest, read_sample, write_intensities,
    write_labels, write_manifest, write_sample, ManifestEntry, DTYPE_F32, DTYPE_U8, VOLUME_MAGIC,
    VOLUME_VERSION,
};
pub use phantom::{
    default_intensity_table, generate_dataset, generate_phantom, PhantomConfig, ANISOTROPIC_SPACING,
};
pub use prep::{crop_labels, crop_to, kfold_split, pad_to_multiple, zscore_normalize, Fold};

use crate::error::{shape_err, Result};
use crate::metrics::{BinaryMask, LabelVolume};
use crate::tensor::Tensor;

/// Aligned multimodal volume with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    /// `[N, W, H, D]` intensities.
    pub modalities: Tensor<f32>,
    pub labels: LabelVolume,
    /// Non-background voxels (`label > 0`).
    pub foreground: BinaryMask,
}

impl VolumeSample {
    pub fn new(modalities: Tensor<f32>, labels: LabelVolume) -> Result<Self> {
        let s = modalities.shape();
        if s.len() != 4 || s[1..] != labels.extents {
            return shape_err(
                "VolumeSample",
                format!(
                    "intensities {s:?} do not match label extents {:?}",
                    labels.extents
                ),
            );
        }
        let foreground = BinaryMask {
            extents: labels.extents,
            voxels: labels.labels.iter().map(|&l| l > 0).collect(),
        };
        Ok(Self {
            modalities,
            labels,
            foreground,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.shape()[0]
    }

    pub fn extents(&self) -> [usize; 3] {
        self.labels.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.labels.spacing
    }
}
