//! Pooled segmentation metrics.
//!
//! Counts are pooled over the whole dataset before dividing (IoU of class k is
//! `Σ intersection / Σ union`). Classes with an empty union are left out of the
//! mean. Over- and under-activation rates are normalized by the total pixel
//! count:
//!
//! * FP rate: pixels predicted as some foreground class other than the truth.
//! * FN rate: foreground pixels of the truth predicted as anything else.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, AcrError, Result};
use crate::localization::{seed_from_maps, UpsampledMap};
use crate::mask::LabelMask;

/// Mergeable per-class pixel counts; classes include background (label 0).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    num_classes: usize,
    intersection: Vec<u64>,
    union: Vec<u64>,
    false_pos: Vec<u64>,
    false_neg: Vec<u64>,
    total_pixels: u64,
    over_pixels: u64,
    under_pixels: u64,
}

impl ConfusionAccumulator {
    /// `num_classes` counts the background.
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            false_pos: vec![0; num_classes],
            false_neg: vec![0; num_classes],
            total_pixels: 0,
            over_pixels: 0,
            under_pixels: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(dim_err!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ));
        }
        let k = self.num_classes;
        if let Some(&bad) = pred.labels().iter().chain(gt.labels()).find(|&&l| l as usize >= k) {
            return Err(AcrError::Contract(format!("label {bad} out of range for {k} classes")));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (p, g) = (p as usize, g as usize);
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
                self.false_pos[p] += 1;
                self.false_neg[g] += 1;
                if p > 0 {
                    self.over_pixels += 1;
                }
                if g > 0 {
                    self.under_pixels += 1;
                }
            }
        }
        self.total_pixels += pred.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(dim_err!(
                "merging accumulators over {} and {} classes",
                self.num_classes,
                other.num_classes
            ));
        }
        for k in 0..self.num_classes {
            self.intersection[k] += other.intersection[k];
            self.union[k] += other.union[k];
            self.false_pos[k] += other.false_pos[k];
            self.false_neg[k] += other.false_neg[k];
        }
        self.total_pixels += other.total_pixels;
        self.over_pixels += other.over_pixels;
        self.under_pixels += other.under_pixels;
        Ok(())
    }

    pub fn intersection(&self) -> &[u64] {
        &self.intersection
    }

    pub fn union(&self) -> &[u64] {
        &self.union
    }

    pub fn false_positives(&self) -> &[u64] {
        &self.false_pos
    }

    pub fn false_negatives(&self) -> &[u64] {
        &self.false_neg
    }

    pub fn total_pixels(&self) -> u64 {
        self.total_pixels
    }

    pub fn iou(&self, k: usize) -> Option<f64> {
        (self.union[k] > 0).then(|| self.intersection[k] as f64 / self.union[k] as f64)
    }

    pub fn report(&self) -> MiouReport {
        let per_class: Vec<Option<f64>> = (0..self.num_classes).map(|k| self.iou(k)).collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        MiouReport { per_class, mean }
    }

    pub fn rates(&self) -> Option<ErrorRates> {
        (self.total_pixels > 0).then(|| ErrorRates {
            fp: self.over_pixels as f64 / self.total_pixels as f64,
            fn_: self.under_pixels as f64 / self.total_pixels as f64,
        })
    }
}

/// Per-class IoU (`None` when a class never occurs in prediction or truth)
/// and their mean (`None` on an empty dataset).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    /// Foreground pixels predicted with the wrong class, over all pixels.
    pub fp: f64,
    /// Ground-truth foreground pixels missed, over all pixels.
    #[serde(rename = "fn")]
    pub fn_: f64,
}

fn accumulate(preds: &[LabelMask], gts: &[LabelMask], num_classes: usize) -> Result<ConfusionAccumulator> {
    if preds.len() != gts.len() {
        return Err(dim_err!("{} predictions for {} ground-truth masks", preds.len(), gts.len()));
    }
    let mut acc = ConfusionAccumulator::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc)
}

/// Pooled mIoU; `num_classes` includes the background.
pub fn miou(preds: &[LabelMask], gts: &[LabelMask], num_classes: usize) -> Result<MiouReport> {
    Ok(accumulate(preds, gts, num_classes)?.report())
}

/// Pooled FP / FN rates; `None` on an empty dataset.
pub fn fp_fn_rates(preds: &[LabelMask], gts: &[LabelMask], num_classes: usize) -> Result<Option<ErrorRates>> {
    Ok(accumulate(preds, gts, num_classes)?.rates())
}

/// `k / 20` for `k = 1..=19`.
pub fn default_thresholds() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub best_threshold: f64,
    pub best_miou: f64,
    pub report: MiouReport,
    pub rates: ErrorRates,
    /// `(threshold, mIoU)` for every threshold tried.
    pub curve: Vec<(f64, f64)>,
}

/// Seeds every image at each threshold and keeps the best pooled mIoU; ties
/// go to the smaller threshold. `None` on an empty dataset.
pub fn best_threshold_miou(
    maps: &[Vec<UpsampledMap>],
    gts: &[LabelMask],
    thresholds: &[f64],
    num_classes: usize,
) -> Result<Option<ThresholdSweep>> {
    if maps.len() != gts.len() {
        return Err(dim_err!("{} map sets for {} ground-truth masks", maps.len(), gts.len()));
    }
    if thresholds.is_empty() {
        return Err(AcrError::Contract("empty threshold grid".into()));
    }
    if gts.is_empty() {
        return Ok(None);
    }
    let mut best: Option<ThresholdSweep> = None;
    let mut curve = Vec::with_capacity(thresholds.len());
    for &theta in thresholds {
        let mut acc = ConfusionAccumulator::new(num_classes);
        for (m, g) in maps.iter().zip(gts) {
            let seed = seed_from_maps(m, theta, g.height(), g.width())?;
            acc.add(&seed.mask, g)?;
        }
        let report = acc.report();
        let value = report.mean.unwrap_or(0.0);
        curve.push((theta, value));
        if best
            .as_ref()
            .is_none_or(|b| value > b.best_miou || (value == b.best_miou && theta < b.best_threshold))
        {
            best = Some(ThresholdSweep {
                best_threshold: theta,
                best_miou: value,
                report,
                rates: acc.rates().expect("non-empty"),
                curve: Vec::new(),
            });
        }
    }
    Ok(best.map(|mut b| {
        b.curve = curve;
        b
    }))
}

/// `class,iou,intersection,union` rows, background first.
pub fn per_class_csv(acc: &ConfusionAccumulator) -> String {
    let mut out = String::from("class,iou,intersection,union,false_pos,false_neg\n");
    for k in 0..acc.num_classes() {
        let iou = acc.iou(k).map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{k},{iou},{},{},{},{}",
            acc.intersection[k], acc.union[k], acc.false_pos[k], acc.false_neg[k]
        );
    }
    out
}

#[cfg(test)]
mod tests;
