//! Two-view training loop, evaluation and the ablation harness.
//!
//! Every step draws one augmentation per image, forwards both views through
//! the same parameters, back-propagates the combined objective and applies
//! an SGD update. Runs are deterministic given [`TrainConfig::seed`]: the
//! same seed initializes the model and drives shuffling and augmentation.

mod ablation;
mod config;
mod optim;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{
    augmentation_sweep, distance_sweep, regularizer_grid, AblationRow, AblationTable, Pretraining, RunScore,
};
pub use config::{EvalConfig, OptimizerKind, TrainConfig};
pub use optim::Sgd;

use crate::autodiff::Tape;
use crate::data::{augment_image, Dataset, SyntheticSample};
use crate::error::{AcrError, Result};
use crate::grid::SpatialTransform;
use crate::localization::{evaluate_maps, layer_sweep, ImageEvidence, LayerSweepRow};
use crate::metrics::ThresholdSweep;
use crate::regularizer::{two_view_objective, LossBreakdown, TwoViewPass};
use crate::tensor::Tensor;
use crate::vit::{attention_values, save_checkpoint, ViTParams};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Means over the epoch's training images.
    pub l_cls: f64,
    pub l_act: f64,
    pub l_aff: f64,
    pub total: f64,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    /// Best-threshold mIoU of refined maps on the held-out images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ViTParams,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    sample_index: usize,
    sample_seed: u64,
    transform: SpatialTransform,
    labels: &'a [f64],
    error: String,
    non_finite_parameters: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    losses: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logits: Option<[Vec<f64>; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attentions: Option<[Vec<Vec<Vec<f64>>>; 2]>,
}

fn matrices(ts: &[Tensor]) -> Vec<Vec<Vec<f64>>> {
    ts.iter()
        .map(|t| {
            let (r, _) = t.dims2().unwrap_or((0, 0));
            (0..r).map(|i| t.row(i).to_vec()).collect()
        })
        .collect()
}

fn json_err(e: serde_json::Error) -> AcrError {
    AcrError::Format(e.to_string())
}

/// Loss values and parameter gradients of one image.
struct SampleStep {
    losses: LossBreakdown,
    grads: Vec<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn sample_step(
    params: &ViTParams,
    config: &TrainConfig,
    sample: &SyntheticSample,
    index: usize,
    t: SpatialTransform,
    layers: &[usize],
    epoch: usize,
    dump_dir: Option<&Path>,
) -> Result<SampleStep> {
    let cfg = params.config();
    let view = augment_image(&sample.image, t, cfg.patch_size)?;
    let mut tape = Tape::new();
    let weights = config.loss_weights();
    let dump = |tape: Option<&Tape>, pass: Option<&TwoViewPass>, losses: Option<LossBreakdown>, error: String| {
        let Some(dir) = dump_dir else { return Ok(()) };
        let recorded = tape.zip(pass);
        let d = NanDump {
            epoch,
            sample_index: index,
            sample_seed: sample.seed,
            transform: t,
            labels: &sample.labels,
            error,
            non_finite_parameters: params
                .names()
                .iter()
                .zip(params.tensors())
                .filter(|(_, t)| !t.all_finite())
                .map(|(n, _)| n.as_str())
                .collect(),
            losses,
            logits: recorded.map(|(tp, p)| {
                [tp.value(p.first.logits).data().to_vec(), tp.value(p.second.logits).data().to_vec()]
            }),
            attentions: recorded.map(|(tp, p)| {
                [matrices(&attention_values(tp, &p.first)), matrices(&attention_values(tp, &p.second))]
            }),
        };
        write_nan_dump(dir, &d)
    };
    let recorded = params.bind(&mut tape).and_then(|vars| {
        let pass = two_view_objective(
            &mut tape,
            params,
            &vars,
            &sample.image,
            &view,
            t,
            &sample.label_tensor(),
            &weights,
            layers,
        )?;
        Ok((vars, pass))
    });
    let (vars, pass) = match recorded {
        Ok(r) => r,
        Err(e) if e.is_numerical() => {
            dump(None, None, None, e.to_string())?;
            return Err(AcrError::Numerical(format!("epoch {epoch}, sample {index} ({t}): {e}")));
        }
        Err(e) => return Err(e),
    };
    let losses = pass.losses.breakdown(&tape)?;
    if !losses.is_finite() {
        let msg = format!("non-finite loss at epoch {epoch}, sample {index} ({t}): {losses:?}");
        dump(Some(&tape), Some(&pass), Some(losses), msg.clone())?;
        return Err(AcrError::Numerical(msg));
    }
    tape.backward(pass.losses.total)?;
    let grads = vars
        .all()
        .iter()
        .map(|&v| tape.grad(v))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleStep { losses, grads })
}

fn write_nan_dump(dir: &Path, dump: &NanDump) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(dump).map_err(json_err)?;
    fs::write(dir.join(NAN_DUMP_FILE), text + "\n")?;
    Ok(())
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Trains from a fresh initialization. With `out_dir`, the metrics log is
/// written as the run progresses, followed by the config and checkpoint; a
/// non-finite loss leaves a diagnostic dump there before failing.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let params = ViTParams::init(config.vit, config.seed)?;
    train_from(params, config, dataset, out_dir)
}

pub fn train_from(
    mut params: ViTParams,
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if params.config() != &config.vit {
        return Err(AcrError::Config("model parameters do not match the configured ViT".into()));
    }
    if dataset.num_classes() != config.vit.num_classes {
        return Err(AcrError::Config(format!(
            "dataset has {} classes, model {}",
            dataset.num_classes(),
            config.vit.num_classes
        )));
    }
    if dataset.len() <= config.holdout {
        return Err(AcrError::Contract(format!(
            "{} samples leave nothing to train on with {} held out",
            dataset.len(),
            config.holdout
        )));
    }
    let split = dataset.len() - config.holdout;
    let (train_set, heldout) = dataset.samples.split_at(split);
    let loss_layers: Vec<usize> = config.loss_layers()?.indices().collect();
    let eval = config.eval_config()?;

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f7a_1e00);
    let mut opt = Sgd::new(config, &params);
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut norm_sum = 0.0;
        let lr_at_start = config.learning_rate_at(step, total_steps);
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let t = config.augmentations[rng.random_range(0..config.augmentations.len())];
                let s = sample_step(&params, config, &train_set[i], i, t, &loss_layers, epoch, out_dir)?;
                sums.l_cls += s.losses.l_cls;
                sums.l_act += s.losses.l_act;
                sums.l_aff += s.losses.l_aff;
                sums.total += s.losses.total;
                match acc.as_mut() {
                    None => acc = Some(s.grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&s.grads) {
                            for (p, q) in x.data_mut().iter_mut().zip(g.data()) {
                                *p += q;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return Err(AcrError::Numerical(format!("non-finite gradient norm at epoch {epoch}")));
            }
            norm_sum += norm;
            if config.grad_clip > 0.0 && norm > config.grad_clip {
                let c = config.grad_clip / norm;
                for g in &mut grads {
                    for v in g.data_mut() {
                        *v *= c;
                    }
                }
            }
            let lr = config.learning_rate_at(step, total_steps);
            opt.step(&mut params, &grads, lr)?;
            step += 1;
        }
        let n = train_set.len() as f64;
        let heldout_miou = if heldout.is_empty() {
            None
        } else {
            let ev = collect_evidence(&params, heldout)?;
            evaluate_maps(&ev, eval.layers, true, &eval.thresholds, config.vit.num_classes + 1)?
                .map(|s| s.best_miou)
        };
        let record = EpochRecord {
            epoch,
            steps: step,
            learning_rate: lr_at_start,
            l_cls: sums.l_cls / n,
            l_act: sums.l_act / n,
            l_aff: sums.l_aff / n,
            total: sums.total / n,
            grad_norm: norm_sum / steps_per_epoch as f64,
            heldout_miou,
        };
        info!(
            "epoch {epoch}: total {:.5} cls {:.5} act {:.6} aff {:.6}",
            record.total, record.l_cls, record.l_act, record.l_aff
        );
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record).map_err(json_err)?)?;
            w.flush()?;
        }
        records.push(record);
    }

    if let Some(dir) = out_dir {
        fs::write(dir.join(CONFIG_FILE), config.to_toml()?)?;
        save_checkpoint(&params, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { params, epochs: records })
}

/// Attention adjoints of every ground-truth class of every sample.
pub fn collect_evidence(params: &ViTParams, samples: &[SyntheticSample]) -> Result<Vec<ImageEvidence>> {
    samples
        .iter()
        .map(|s| {
            let classes = s.present_classes();
            let loc = params.localize(&s.image, &classes)?;
            debug!("localized {} classes", classes.len());
            Ok(ImageEvidence {
                classes,
                adjoints: loc.adjoints,
                attentions: loc.inference.attentions,
                grid: loc.inference.grid,
                gt: s.mask.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub layers: crate::localization::LayerRange,
    pub unrefined: ThresholdSweep,
    pub refined: ThresholdSweep,
    pub layer_sweep_unrefined: Vec<LayerSweepRow>,
    pub layer_sweep_refined: Vec<LayerSweepRow>,
}

/// Seeds from refined and unrefined maps at the best background threshold,
/// plus a sweep over the first fused layer.
pub fn evaluate(params: &ViTParams, samples: &[SyntheticSample], eval: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(AcrError::Contract("nothing to evaluate".into()));
    }
    let cfg = params.config();
    eval.layers.check(cfg.num_layers)?;
    let k = cfg.num_classes + 1;
    let ev = collect_evidence(params, samples)?;
    let sweep = |refined| {
        evaluate_maps(&ev, eval.layers, refined, &eval.thresholds, k)?
            .ok_or_else(|| AcrError::Contract("nothing to evaluate".into()))
    };
    let starts: Vec<usize> = (0..cfg.num_layers).collect();
    Ok(EvalReport {
        num_images: samples.len(),
        layers: eval.layers,
        unrefined: sweep(false)?,
        refined: sweep(true)?,
        layer_sweep_unrefined: layer_sweep(&ev, &starts, cfg.num_layers, false, &eval.thresholds, k)?,
        layer_sweep_refined: layer_sweep(&ev, &starts, cfg.num_layers, true, &eval.thresholds, k)?,
    })
}

#[cfg(test)]
mod tests;
