use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-voxel class indices over a `W × H × D` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub extents: [usize; 3],
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if labels.len() != n {
            return Err(Error::Shape {
                op: "LabelVolume",
                detail: format!("{} labels for extents {extents:?}", labels.len()),
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        Ok(Self {
            extents,
            spacing,
            labels,
        })
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    /// `[num_classes, W, H, D]` indicator tensor.
    pub fn one_hot<T: Element>(&self, num_classes: usize) -> Result<Tensor<T>> {
        let v = self.voxels();
        let mut data = vec![T::zero(); num_classes * v];
        for (i, &l) in self.labels.iter().enumerate() {
            let c = l as usize;
            if c >= num_classes {
                return Err(Error::Config(format!(
                    "label {c} at voxel {i} is out of range for {num_classes} classes"
                )));
            }
            data[c * v + i] = T::one();
        }
        let [w, h, d] = self.extents;
        Tensor::new(vec![num_classes, w, h, d], data)
    }

    /// Voxels whose label is in `classes`.
    pub fn mask_of(&self, classes: &[u8]) -> BinaryMask {
        BinaryMask {
            extents: self.extents,
            voxels: self.labels.iter().map(|l| classes.contains(l)).collect(),
        }
    }
}

/// Binary voxel mask on a `W × H × D` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub extents: [usize; 3],
    pub voxels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(extents: [usize; 3], voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != extents.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "BinaryMask",
                detail: format!("{} voxels for extents {extents:?}", voxels.len()),
            });
        }
        Ok(Self { extents, voxels })
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.extents == other.extents
            && self
                .voxels
                .iter()
                .zip(&other.voxels)
                .all(|(&a, &b)| !a || b)
    }
}

/// Class with the highest probability at each voxel of `[C, W, H, D]`;
/// ties resolve to the lowest class index.
pub fn argmax_labels<T: Element>(probs: &Tensor<T>, spacing: [f64; 3]) -> Result<LabelVolume> {
    let shape = probs.shape();
    if shape.len() != 4 || shape[0] > u8::MAX as usize + 1 {
        return Err(Error::Shape {
            op: "argmax_labels",
            detail: format!("expected [C, W, H, D] with at most 256 classes, got {shape:?}"),
        });
    }
    let v = shape[1] * shape[2] * shape[3];
    let data = probs.data();
    let labels = (0..v)
        .map(|i| {
            let mut best = 0;
            for c in 1..shape[0] {
                if data[c * v + i] > data[best * v + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new([shape[1], shape[2], shape[3]], spacing, labels)
}

/// A named union of classes, e.g. tumour core = {3, 4}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub classes: Vec<u8>,
}

/// Parses `ET:4;TC:3,4;WT:2,3,4`.
pub fn parse_regions(text: &str) -> Result<Vec<Region>> {
    let mut out = Vec::new();
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((name, classes)) = part.split_once(':') else {
            return Err(Error::Config(format!(
                "region `{part}` must look like NAME:c1,c2"
            )));
        };
        let classes = classes
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::Config(format!("bad class `{c}` in region `{part}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Region {
            name: name.trim().to_string(),
            classes,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("region spec is empty".into()));
    }
    Ok(out)
}

/// One mask per region, each the union of its classes.
pub fn nested_region_masks(
    labels: &LabelVolume,
    regions: &[Region],
    num_classes: usize,
) -> Result<Vec<(String, BinaryMask)>> {
    regions
        .iter()
        .map(|r| {
            if let Some(&c) = r.classes.iter().find(|&&c| c as usize >= num_classes) {
                return Err(Error::Config(format!(
                    "region `{}` references class {c}, but there are only {num_classes} classes",
                    r.name
                )));
            }
            Ok((r.name.clone(), labels.mask_of(&r.classes)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_parse_and_nest() {
        let regions = parse_regions("ET:3; TC:2,3; WT:1,2,3").unwrap();
        let labels = LabelVolume::new([2, 2, 1], [1.0; 3], vec![0, 1, 2, 3]).unwrap();
        let masks = nested_region_masks(&labels, &regions, 4).unwrap();
        assert_eq!(masks[0].1.voxels, [false, false, false, true]);
        assert_eq!(masks[1].1.voxels, [false, false, true, true]);
        assert!(masks[0].1.is_subset_of(&masks[1].1));
        assert!(masks[1].1.is_subset_of(&masks[2].1));
        assert!(nested_region_masks(&labels, &regions, 3).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        let p = Tensor::<f32>::new(vec![2, 1, 1, 2], vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        assert_eq!(argmax_labels(&p, [1.0; 3]).unwrap().labels, [0, 1]);
    }
}
