mod common;

use common::*;
use hftrans::metrics::{
    argmax_labels, combined_loss, cross_entropy_loss, dice_loss, dice_score, evaluate_regions,
    hd95, mean_class_dice, parse_regions, volume_similarity, BinaryMask, LabelVolume,
};
use hftrans::tensor::{grad_check, GradCheckOptions, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labels(extents: [usize; 3], classes: u8, seed: u64) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = (0..extents.iter().product::<usize>())
        .map(|_| rng.gen_range(0..classes))
        .collect();
    LabelVolume::new(extents, [1.0; 3], l).unwrap()
}

fn random_probs(c: usize, extents: [usize; 3], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: usize = extents.iter().product();
    let raw: Vec<f64> = (0..c * v).map(|_| rng.gen_range(0.01..1.0)).collect();
    let mut out = raw.clone();
    for i in 0..v {
        let s: f64 = (0..c).map(|k| raw[k * v + i]).sum();
        for k in 0..c {
            out[k * v + i] = raw[k * v + i] / s;
        }
    }
    Tensor::new(vec![c, extents[0], extents[1], extents[2]], out).unwrap()
}

fn loss_value(
    f: fn(
        &mut Graph<f64>,
        hftrans::tensor::Var,
        &LabelVolume,
    ) -> hftrans::Result<hftrans::tensor::Var>,
    p: &Tensor<f64>,
    t: &LabelVolume,
) -> f64 {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let l = f(&mut g, pv, t).unwrap();
    g.value(l).item()
}

fn mask_from(extents: [usize; 3], on: &[usize]) -> BinaryMask {
    let mut v = vec![false; extents.iter().product()];
    for &i in on {
        v[i] = true;
    }
    BinaryMask::new(extents, v).unwrap()
}

#[test]
fn dice_loss_matches_direct_summation() {
    let t = labels([3, 4, 5], 4, 1);
    for seed in 0..5 {
        let p = random_probs(4, [3, 4, 5], seed);
        let got = loss_value(dice_loss, &p, &t);
        assert!((got - dice_loss_oracle(&p, &t)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn dice_loss_uniform_two_class_balanced() {
    let t = LabelVolume::new([2, 2, 2], [1.0; 3], vec![0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
    let p = Tensor::full(&[2, 2, 2, 2], 0.5);
    // Each class: 2·(0.5·4) / (0.5·8 + 4) = 0.5.
    let eps = 1e-5;
    let per_class = (2.0 * 2.0 + eps) / (4.0 + 4.0 + eps);
    assert!((loss_value(dice_loss, &p, &t) - (1.0 - per_class)).abs() < 1e-12);
    assert!((loss_value(dice_loss, &p, &t) - dice_loss_oracle(&p, &t)).abs() < 1e-12);
}

#[test]
fn perfect_prediction_is_nearly_free() {
    let t = labels([4, 4, 4], 3, 2);
    let p: Tensor<f64> = t.one_hot(3).unwrap();
    assert!(loss_value(dice_loss, &p, &t) < 1e-4);
    assert!(loss_value(cross_entropy_loss, &p, &t).abs() < 1e-9);
    assert!(loss_value(combined_loss, &p, &t) < 1e-4);
}

#[test]
fn cross_entropy_matches_per_voxel_oracle() {
    let t = labels([5, 3, 2], 5, 3);
    let p = random_probs(5, [5, 3, 2], 4);
    assert!((loss_value(cross_entropy_loss, &p, &t) - cross_entropy_oracle(&p, &t)).abs() < 1e-12);
    let uniform = Tensor::full(&[4, 5, 3, 2], 0.25);
    let t4 = labels([5, 3, 2], 4, 5);
    assert!((loss_value(cross_entropy_loss, &uniform, &t4) - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn combined_loss_is_the_exact_sum() {
    let t = labels([3, 3, 3], 3, 6);
    let p = random_probs(3, [3, 3, 3], 7);
    let sum = loss_value(dice_loss, &p, &t) + loss_value(cross_entropy_loss, &p, &t);
    assert_eq!(loss_value(combined_loss, &p, &t), sum);
}

#[test]
fn loss_gradients_through_softmax() {
    let t = labels([2, 3, 2], 3, 8);
    let logits = random(&[3, 2, 3, 2], 9);
    for f in [dice_loss, cross_entropy_loss, combined_loss] {
        let report = grad_check(
            |g, v| {
                let p = g.softmax(v[0], 0)?;
                f(g, p, &t)
            },
            std::slice::from_ref(&logits),
            &GradCheckOptions {
                rel_tol: 1e-3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }
}

#[test]
fn loss_rejects_mismatched_shapes() {
    let t = labels([2, 2, 2], 2, 1);
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::full(&[2, 2, 2, 3], 0.5));
    assert!(dice_loss(&mut g, p, &t).is_err());
    assert!(cross_entropy_loss(&mut g, p, &t).is_err());
}

#[test]
fn score_unit_values() {
    let e = [1, 1, 4];
    assert_eq!(
        dice_score(&mask_from(e, &[0, 1]), &mask_from(e, &[0, 1])).unwrap(),
        1.0
    );
    assert_eq!(
        dice_score(&mask_from(e, &[0]), &mask_from(e, &[3])).unwrap(),
        0.0
    );
    assert_eq!(
        dice_score(&mask_from(e, &[0, 1]), &mask_from(e, &[1, 2])).unwrap(),
        0.5
    );
    assert_eq!(
        hd95(&mask_from(e, &[0, 1]), &mask_from(e, &[0, 1]), [1.0; 3]).unwrap(),
        0.0
    );
    assert_eq!(
        hd95(&mask_from(e, &[0]), &mask_from(e, &[2]), [1.0; 3]).unwrap(),
        2.0
    );
    assert_eq!(
        hd95(&mask_from(e, &[0]), &mask_from(e, &[2]), [1.0, 1.0, 3.0]).unwrap(),
        6.0
    );
    assert_eq!(
        hd95(&mask_from(e, &[]), &mask_from(e, &[]), [1.0; 3]).unwrap(),
        0.0
    );

    let big = [10, 10, 2];
    let p = mask_from(big, &(0..80).collect::<Vec<_>>());
    let g = mask_from(big, &(0..100).collect::<Vec<_>>());
    assert!((volume_similarity(&p, &g).unwrap() - 0.8889).abs() < 1e-4);
    assert!(dice_score(&p, &mask_from([10, 10, 1], &[])).is_err());
}

#[test]
fn hd95_uses_nearest_rank_percentile() {
    // 20 gt voxels on a line, pred covers the first 19 plus nothing else: the
    // one unmatched gt voxel is the top 5% and is dropped.
    let e = [1, 1, 40];
    let gt = mask_from(e, &(0..20).collect::<Vec<_>>());
    let pred = mask_from(e, &(0..19).collect::<Vec<_>>());
    assert_eq!(hd95(&pred, &gt, [1.0; 3]).unwrap(), 0.0);
    let pred = mask_from(e, &(0..18).collect::<Vec<_>>());
    assert_eq!(hd95(&pred, &gt, [1.0; 3]).unwrap(), 1.0);
    assert_eq!(
        hd95(&pred, &gt, [1.0; 3]).unwrap(),
        hd95_oracle(&pred, &gt, [1.0; 3])
    );
}

#[test]
fn argmax_and_regions() {
    let mut probs = Tensor::<f64>::zeros(&[3, 1, 1, 3]);
    for (i, c) in [2usize, 0, 1].iter().enumerate() {
        let o = probs.offset(&[*c, 0, 0, i]);
        probs.data_mut()[o] = 1.0;
    }
    let l = argmax_labels(&probs, [1.0; 3]).unwrap();
    assert_eq!(l.labels, [2, 0, 1]);

    let gt = labels([6, 6, 6], 5, 10);
    let rows =
        evaluate_regions(&gt, &gt, &parse_regions("ET:4;TC:3,4;WT:2,3,4").unwrap(), 5).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.region.as_str()).collect::<Vec<_>>(),
        ["ET", "TC", "WT"]
    );
    for r in rows {
        assert_eq!((r.dice, r.hd95_mm, r.volume_similarity), (1.0, 0.0, 1.0));
    }
    assert_eq!(mean_class_dice(&gt, &gt, 5).unwrap(), 1.0);
    assert!(evaluate_regions(&gt, &gt, &parse_regions("X:5").unwrap(), 5).is_err());
}
