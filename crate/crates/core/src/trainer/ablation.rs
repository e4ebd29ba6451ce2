//! Ablation tables: the regularizer on/off grid, the distance sweep and the
//! augmentation sweep. Each row trains one model per seed and scores seeds
//! from refined and unrefined maps on the training images.
//!
//! With [`Pretraining`], every seed first trains a classification-only model
//! on a separate dataset, and each row fine-tunes a copy of it.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, train_from, TrainConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::grid::SpatialTransform;
use crate::regularizer::Distance;
use crate::vit::ViTParams;

/// Shared classification-only starting point for every row.
#[derive(Clone, Debug)]
pub struct Pretraining {
    pub epochs: usize,
    pub dataset: Dataset,
}

/// Per-seed starting parameters and the seconds spent producing them.
struct Start {
    seed: u64,
    params: Option<ViTParams>,
    seconds: f64,
}

fn starts(base: &TrainConfig, seeds: &[u64], pretraining: Option<&Pretraining>) -> Result<Vec<Start>> {
    seeds
        .iter()
        .map(|&seed| {
            let Some(p) = pretraining else {
                return Ok(Start { seed, params: None, seconds: 0.0 });
            };
            let clock = Instant::now();
            let cfg = TrainConfig {
                seed,
                epochs: p.epochs,
                alpha: 0.0,
                beta: 0.0,
                ..base.clone()
            };
            let params = train(&cfg, &p.dataset, None)?.params;
            info!("pretrained seed {seed} for {} epochs", p.epochs);
            Ok(Start {
                seed,
                params: Some(params),
                seconds: clock.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Scores of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub seed: u64,
    pub miou_unrefined: f64,
    pub miou_refined: f64,
    pub fp_refined: f64,
    pub fn_refined: f64,
    pub final_l_cls: f64,
    /// Wall time of training and scoring, pretraining included.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub alpha: f64,
    pub beta: f64,
    pub distance: Distance,
    pub augmentations: Vec<SpatialTransform>,
    pub runs: Vec<RunScore>,
    pub mean_miou_unrefined: f64,
    pub mean_miou_refined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n{:<16} {:>8} {:>8} {:>10} {:>10}\n", self.name, "row", "alpha", "beta", "unrefined", "refined");
        for r in &self.rows {
            out += &format!(
                "{:<16} {:>8} {:>8} {:>10.2} {:>10.2}\n",
                r.label,
                r.alpha,
                r.beta,
                100.0 * r.mean_miou_unrefined,
                100.0 * r.mean_miou_refined
            );
        }
        out
    }
}

fn run_row(label: &str, config: &TrainConfig, dataset: &Dataset, starts: &[Start]) -> Result<AblationRow> {
    let mut runs = Vec::with_capacity(starts.len());
    for start in starts {
        let clock = Instant::now();
        let seed = start.seed;
        let cfg = TrainConfig { seed, ..config.clone() };
        let outcome = match &start.params {
            Some(p) => train_from(p.clone(), &cfg, dataset, None)?,
            None => train(&cfg, dataset, None)?,
        };
        let report = evaluate(&outcome.params, &dataset.samples, &cfg.eval_config()?)?;
        let score = RunScore {
            seed,
            miou_unrefined: report.unrefined.best_miou,
            miou_refined: report.refined.best_miou,
            fp_refined: report.refined.rates.fp,
            fn_refined: report.refined.rates.fn_,
            final_l_cls: outcome.epochs.last().map_or(f64::NAN, |e| e.l_cls),
            seconds: start.seconds + clock.elapsed().as_secs_f64(),
        };
        info!(
            "{label} seed {seed}: unrefined {:.4} refined {:.4}",
            score.miou_unrefined, score.miou_refined
        );
        runs.push(score);
    }
    let n = runs.len().max(1) as f64;
    Ok(AblationRow {
        label: label.to_string(),
        alpha: config.alpha,
        beta: config.beta,
        distance: config.distance,
        augmentations: config.augmentations.clone(),
        mean_miou_unrefined: runs.iter().map(|r| r.miou_unrefined).sum::<f64>() / n,
        mean_miou_refined: runs.iter().map(|r| r.miou_refined).sum::<f64>() / n,
        runs,
    })
}

/// Baseline, activation-only, affinity-only and full objective. The
/// non-zero weights come from `base`.
pub fn regularizer_grid(
    base: &TrainConfig,
    dataset: &Dataset,
    seeds: &[u64],
    pretraining: Option<&Pretraining>,
) -> Result<AblationTable> {
    let starts = starts(base, seeds, pretraining)?;
    let cells = [
        ("baseline", 0.0, 0.0),
        ("act_only", base.alpha, 0.0),
        ("aff_only", 0.0, base.beta),
        ("full", base.alpha, base.beta),
    ];
    let rows = cells
        .iter()
        .map(|&(label, alpha, beta)| {
            run_row(label, &TrainConfig { alpha, beta, ..base.clone() }, dataset, &starts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        name: "regularizers".into(),
        rows,
    })
}

pub fn distance_sweep(
    base: &TrainConfig,
    dataset: &Dataset,
    seeds: &[u64],
    pretraining: Option<&Pretraining>,
) -> Result<AblationTable> {
    let starts = starts(base, seeds, pretraining)?;
    let rows = Distance::ALL
        .iter()
        .map(|&distance| {
            run_row(&distance.to_string(), &TrainConfig { distance, ..base.clone() }, dataset, &starts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        name: "distance".into(),
        rows,
    })
}

/// One row per augmentation, each trained with that augmentation alone.
pub fn augmentation_sweep(
    base: &TrainConfig,
    dataset: &Dataset,
    seeds: &[u64],
    augmentations: &[SpatialTransform],
    pretraining: Option<&Pretraining>,
) -> Result<AblationTable> {
    let starts = starts(base, seeds, pretraining)?;
    let rows = augmentations
        .iter()
        .map(|&t| {
            run_row(
                &t.to_string(),
                &TrainConfig {
                    augmentations: vec![t],
                    ..base.clone()
                },
                dataset,
                &starts,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        name: "augmentation".into(),
        rows,
    })
}
