use std::io::Write;

use super::labels::{nested_region_masks, BinaryMask, LabelVolume, Region};
use crate::error::{shape_err, Result};

fn check_extents(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.extents != b.extents || a.voxels.len() != b.voxels.len() {
        return shape_err(
            op,
            format!("mask extents {:?} vs {:?}", a.extents, b.extents),
        );
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_extents("dice_score", pred, gt)?;
    let (p, g) = (pred.count(), gt.count());
    if p + g == 0 {
        return Ok(1.0);
    }
    let inter = pred
        .voxels
        .iter()
        .zip(&gt.voxels)
        .filter(|(&a, &b)| a && b)
        .count();
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// `1 − |Vp − Vg| / (Vp + Vg)`; 1 when both masks are empty.
pub fn volume_similarity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_extents("volume_similarity", pred, gt)?;
    let (p, g) = (pred.count() as f64, gt.count() as f64);
    if p + g == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (p - g).abs() / (p + g))
}

fn coords(i: usize, ext: [usize; 3]) -> [usize; 3] {
    [i / (ext[1] * ext[2]), (i / ext[2]) % ext[1], i % ext[2]]
}

fn physical(c: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    [
        c[0] as f64 * spacing[0],
        c[1] as f64 * spacing[1],
        c[2] as f64 * spacing[2],
    ]
}

/// Members of `mask` with at least one in-grid 6-neighbour outside it. For any
/// point outside the mask, its nearest member is one of these: stepping from a
/// nearest member towards the point along a differing axis stays in the grid
/// and gets strictly closer, so that neighbour must lie outside.
fn boundary(mask: &BinaryMask) -> Vec<[usize; 3]> {
    let ext = mask.extents;
    let at = |c: [usize; 3]| mask.voxels[(c[0] * ext[1] + c[1]) * ext[2] + c[2]];
    let mut out = Vec::new();
    for (i, _) in mask.voxels.iter().enumerate().filter(|(_, &b)| b) {
        let c = coords(i, ext);
        let exposed = (0..3).any(|ax| {
            let mut lo = c;
            let mut hi = c;
            (c[ax] > 0 && {
                lo[ax] -= 1;
                !at(lo)
            }) || (c[ax] + 1 < ext[ax] && {
                hi[ax] += 1;
                !at(hi)
            })
        });
        if exposed {
            out.push(c);
        }
    }
    out
}

/// Distance from every member of `from` to the nearest member of `to`.
fn directed(from: &BinaryMask, to: &BinaryMask, spacing: [f64; 3]) -> Vec<f64> {
    let candidates: Vec<[f64; 3]> = boundary(to)
        .into_iter()
        .map(|c| physical(c, spacing))
        .collect();
    from.voxels
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| {
            if to.voxels[i] {
                return 0.0;
            }
            let a = physical(coords(i, from.extents), spacing);
            candidates
                .iter()
                .map(|b| {
                    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Nearest-rank 95th percentile: the `ceil(0.95 n)`-th smallest value.
fn percentile95(mut d: Vec<f64>) -> f64 {
    d.sort_by(f64::total_cmp);
    let rank = (0.95 * d.len() as f64).ceil() as usize;
    d[rank.max(1) - 1]
}

/// Symmetric 95th-percentile Hausdorff distance in millimetres between the
/// voxel centres of two masks. Both empty gives 0; exactly one empty gives the
/// diagonal of the physical volume.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    check_extents("hd95", pred, gt)?;
    match (pred.count(), gt.count()) {
        (0, 0) => Ok(0.0),
        (0, _) | (_, 0) => Ok(pred
            .extents
            .iter()
            .zip(spacing)
            .map(|(&e, s)| (e as f64 * s).powi(2))
            .sum::<f64>()
            .sqrt()),
        _ => Ok(percentile95(directed(pred, gt, spacing))
            .max(percentile95(directed(gt, pred, spacing)))),
    }
}

/// Mean Dice over classes `1..num_classes`, each treated as its own mask.
pub fn mean_class_dice(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in 1..num_classes as u8 {
        total += dice_score(&pred.mask_of(&[c]), &gt.mask_of(&[c]))?;
    }
    Ok(total / (num_classes - 1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub region: String,
    pub dice: f64,
    pub hd95_mm: f64,
    pub volume_similarity: f64,
}

pub const METRICS_HEADER: &str = "region,dice,hd95_mm,volume_similarity";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            crate::harness::report::csv_field(&self.region),
            self.dice,
            self.hd95_mm,
            self.volume_similarity
        )
    }
}

/// Dice, HD95 and volume similarity for each region of `pred` against `gt`.
pub fn evaluate_regions(
    pred: &LabelVolume,
    gt: &LabelVolume,
    regions: &[Region],
    num_classes: usize,
) -> Result<Vec<MetricsRow>> {
    let p = nested_region_masks(pred, regions, num_classes)?;
    let g = nested_region_masks(gt, regions, num_classes)?;
    p.iter()
        .zip(&g)
        .map(|((name, pm), (_, gm))| {
            Ok(MetricsRow {
                region: name.clone(),
                dice: dice_score(pm, gm)?,
                hd95_mm: hd95(pm, gm, gt.spacing)?,
                volume_similarity: volume_similarity(pm, gm)?,
            })
        })
        .collect()
}

pub fn write_metrics_csv(mut out: impl Write, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new([1, 1, bits.len()], bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn unit_values() {
        assert_eq!(
            dice_score(&mask(&[1, 1, 0]), &mask(&[1, 1, 0])).unwrap(),
            1.0
        );
        assert_eq!(
            dice_score(&mask(&[1, 0, 0]), &mask(&[0, 1, 0])).unwrap(),
            0.0
        );
        assert_eq!(
            dice_score(&mask(&[1, 1, 0]), &mask(&[0, 1, 1])).unwrap(),
            0.5
        );
        assert_eq!(dice_score(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert_eq!(
            hd95(&mask(&[1, 0, 0]), &mask(&[0, 0, 1]), [1.0; 3]).unwrap(),
            2.0
        );
        assert_eq!(
            hd95(&mask(&[1, 1, 0]), &mask(&[1, 1, 0]), [1.0; 3]).unwrap(),
            0.0
        );
    }

    #[test]
    fn one_empty_mask_costs_the_diagonal() {
        let d = hd95(&mask(&[0, 0, 0, 0]), &mask(&[0, 1, 0, 0]), [1.0, 2.0, 3.0]).unwrap();
        assert!((d - (1.0f64 + 4.0 + 144.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rows_format_six_decimals() {
        let row = MetricsRow {
            region: "WT".into(),
            dice: 0.5,
            hd95_mm: 2.0,
            volume_similarity: 8.0 / 9.0,
        };
        assert_eq!(row.csv(), "WT,0.500000,2.000000,0.888889");
    }
}
