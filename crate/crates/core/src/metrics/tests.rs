use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn mask(h: usize, w: usize, labels: Vec<u8>) -> LabelMask {
    LabelMask::new(h, w, labels).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, k: u8) -> LabelMask {
    mask(16, 16, (0..256).map(|_| rng.random_range(0..k)).collect())
}

#[test]
fn perfect_prediction_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gts: Vec<LabelMask> = (0..4).map(|_| random_mask(&mut rng, 4)).collect();
    let r = miou(&gts, &gts, 4).unwrap();
    assert_eq!(r.mean, Some(1.0));
    let rates = fp_fn_rates(&gts, &gts, 4).unwrap().unwrap();
    assert_eq!((rates.fp, rates.fn_), (0.0, 0.0));
}

#[test]
fn all_background_against_half_foreground() {
    let pred = mask(2, 2, vec![0; 4]);
    let gt = mask(2, 2, vec![1, 1, 0, 0]);
    let r = miou(&[pred.clone()], &[gt.clone()], 2).unwrap();
    assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
    assert_eq!(r.mean, Some(0.25));
    let rates = fp_fn_rates(&[pred], &[gt], 2).unwrap().unwrap();
    assert_eq!((rates.fp, rates.fn_), (0.0, 0.5));
}

#[test]
fn absent_classes_are_left_out() {
    let m = mask(1, 2, vec![0, 1]);
    let r = miou(&[m.clone()], &[m], 5).unwrap();
    assert_eq!(r.per_class[3], None);
    assert_eq!(r.mean, Some(1.0));
}

#[test]
fn counts_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = 4usize;
    let preds: Vec<LabelMask> = (0..5).map(|_| random_mask(&mut rng, k as u8)).collect();
    let gts: Vec<LabelMask> = (0..5).map(|_| random_mask(&mut rng, k as u8)).collect();
    let r = miou(&preds, &gts, k).unwrap();
    let rates = fp_fn_rates(&preds, &gts, k).unwrap().unwrap();
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let (mut inter, mut uni) = (0usize, 0usize);
        for (p, g) in preds.iter().zip(&gts) {
            for i in 0..p.len() {
                let (a, b) = (p.labels()[i] == c, g.labels()[i] == c);
                inter += (a && b) as usize;
                uni += (a || b) as usize;
            }
        }
        ious.push(inter as f64 / uni as f64);
    }
    for (got, want) in r.per_class.iter().zip(&ious) {
        assert_eq!(got.unwrap(), *want);
    }
    let mean = ious.iter().sum::<f64>() / k as f64;
    assert!((r.mean.unwrap() - mean).abs() < 1e-15);
    let total = (preds.len() * 256) as f64;
    let (mut over, mut under) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(&gts) {
        for (&a, &b) in p.labels().iter().zip(g.labels()) {
            over += (a != 0 && a != b) as usize;
            under += (b != 0 && a != b) as usize;
        }
    }
    assert_eq!(rates.fp, over as f64 / total);
    assert_eq!(rates.fn_, under as f64 / total);
}

#[test]
fn empty_dataset_has_no_score() {
    assert_eq!(miou(&[], &[], 3).unwrap().mean, None);
    assert_eq!(fp_fn_rates(&[], &[], 3).unwrap(), None);
    assert_eq!(best_threshold_miou(&[], &[], &default_thresholds(), 3).unwrap(), None);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let a = mask(2, 2, vec![0; 4]);
    let b = mask(1, 4, vec![0; 4]);
    assert!(matches!(miou(&[a.clone()], &[b], 2), Err(AcrError::Dimension(_))));
    assert!(miou(&[a.clone()], &[], 2).is_err());
    let bad = mask(2, 2, vec![0, 0, 0, 3]);
    assert!(matches!(miou(&[bad], &[a], 2), Err(AcrError::Contract(_))));
}

#[test]
fn default_threshold_grid() {
    let t = default_thresholds();
    assert_eq!(t.len(), 19);
    assert_eq!(t[0], 0.05);
    assert_eq!(t[18], 0.95);
}

fn up(class_index: usize, values: Vec<f64>) -> UpsampledMap {
    UpsampledMap {
        class_index,
        height: 1,
        width: values.len(),
        values,
    }
}

#[test]
fn best_threshold_beats_every_fixed_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut maps = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..6 {
        let gt: Vec<u8> = (0..20).map(|_| rng.random_range(0..3)).collect();
        let m: Vec<UpsampledMap> = (0..2)
            .map(|c| {
                up(
                    c,
                    gt.iter()
                        .map(|&l| if l as usize == c + 1 { rng.random_range(0.4..1.0) } else { rng.random_range(0.0..0.6) })
                        .collect(),
                )
            })
            .collect();
        maps.push(m);
        gts.push(mask(1, 20, gt));
    }
    let thresholds = default_thresholds();
    let best = best_threshold_miou(&maps, &gts, &thresholds, 3).unwrap().unwrap();
    assert_eq!(best.curve.len(), thresholds.len());
    for &t in &thresholds {
        let preds: Vec<LabelMask> = maps
            .iter()
            .map(|m| seed_from_maps(m, t, 1, 20).unwrap().mask)
            .collect();
        let fixed = miou(&preds, &gts, 3).unwrap().mean.unwrap();
        assert!(best.best_miou >= fixed);
    }
}

#[test]
fn ties_go_to_the_smaller_threshold() {
    let maps = vec![vec![up(0, vec![1.0, 0.0])]];
    let gts = vec![mask(1, 2, vec![1, 0])];
    let best = best_threshold_miou(&maps, &gts, &[0.7, 0.2, 0.5], 2).unwrap().unwrap();
    assert_eq!(best.best_threshold, 0.2);
    assert_eq!(best.best_miou, 1.0);
}

#[test]
fn csv_lists_every_class() {
    let mut acc = ConfusionAccumulator::new(3);
    acc.add(&mask(1, 3, vec![0, 1, 1]), &mask(1, 3, vec![0, 1, 0])).unwrap();
    let csv = per_class_csv(&acc);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[2], "1,0.500000,1,2,1,0");
    assert_eq!(lines[3], "2,,0,0,0,0");
}

proptest! {
    #[test]
    fn merge_equals_pooled_accumulation(seed in 0u64..500, split in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<LabelMask> = (0..6).map(|_| random_mask(&mut rng, 3)).collect();
        let gts: Vec<LabelMask> = (0..6).map(|_| random_mask(&mut rng, 3)).collect();
        let mut a = ConfusionAccumulator::new(3);
        let mut b = ConfusionAccumulator::new(3);
        for i in 0..6 {
            if i < split { &mut a } else { &mut b }.add(&preds[i], &gts[i]).unwrap();
        }
        a.merge(&b).unwrap();
        let mut all = ConfusionAccumulator::new(3);
        for (p, g) in preds.iter().zip(&gts) {
            all.add(p, g).unwrap();
        }
        prop_assert_eq!(a, all);
    }

    #[test]
    fn image_order_does_not_matter(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<LabelMask> = (0..4).map(|_| random_mask(&mut rng, 3)).collect();
        let gts: Vec<LabelMask> = (0..4).map(|_| random_mask(&mut rng, 3)).collect();
        let r1 = miou(&preds, &gts, 3).unwrap();
        let rp: Vec<LabelMask> = preds.iter().rev().cloned().collect();
        let rg: Vec<LabelMask> = gts.iter().rev().cloned().collect();
        prop_assert_eq!(r1, miou(&rp, &rg, 3).unwrap());
    }
}
