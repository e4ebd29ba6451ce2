//! Subcommand definitions and their implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use acr_core::data::{generate, load_dataset, read_ppm, write_pgm, SynthConfig};
use acr_core::gradsuite::{run_suite, SuiteConfig};
use acr_core::grid::{
    conjugate_attention, invert_attention_fast, invert_attention_kronecker, GridShape, SpatialTransform,
};
use acr_core::localization::{
    affinity_refine, attention_csv, evaluate_maps, export_map, grad_localization, layer_sweep, seed_from_maps,
    LayerRange, LayerSweepRow,
};
use acr_core::metrics::{default_thresholds, ThresholdSweep};
use acr_core::regularizer::Distance;
use acr_core::trainer::{
    augmentation_sweep, collect_evidence, distance_sweep, regularizer_grid, train, AblationTable, Pretraining, TrainConfig,
};
use acr_core::vit::load_checkpoint;
use acr_core::{AcrError, Result, Tensor};

const AFTER_HELP: &str = "Exit codes:\n  0  success\n  1  validation, contract or I/O error\n  2  numerical failure (non-finite loss, failed gradient or inversion check)\n\nSet ACR_LOG=info (or debug) for progress logs.";

#[derive(Debug, Parser)]
#[command(name = "acr", version, about = "Attention consistency regularization toolkit", after_help = AFTER_HELP)]
pub struct Cli {
    /// Human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train a model with the two-view objective.
    Train(TrainArgs),
    /// Score localization seeds of a checkpoint against ground-truth masks.
    Eval(EvalArgs),
    /// Export refined and unrefined localization maps of one image.
    Seeds(SeedsArgs),
    /// Compare fast attention inversion against the dense Kronecker oracle.
    CheckInversion(CheckInversionArgs),
    /// Run the regularizer grid, distance sweep and augmentation sweep.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    distance: Option<Distance>,
    /// Comma-separated augmentations, e.g. `flip_h,rot90,resize:6x6`.
    #[arg(long, value_delimiter = ',')]
    aug: Option<Vec<SpatialTransform>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    refined: Switch,
    /// Fused layers `A..B`; defaults to the last two.
    #[arg(long)]
    layers: Option<LayerRange>,
}

#[derive(Debug, Args)]
struct SeedsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM image of the model's input size.
    #[arg(long)]
    image: PathBuf,
    /// Zero-based class index.
    #[arg(long = "class")]
    class: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    layers: Option<LayerRange>,
    /// Background threshold for the exported seed masks.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write every layer's attention matrix as CSV.
    #[arg(long)]
    attention_csv: bool,
}

#[derive(Debug, Args)]
struct CheckInversionArgs {
    /// Patch grid, `HxW`.
    #[arg(long)]
    grid: GridShape,
    #[arg(long)]
    transform: SpatialTransform,
    /// Also compare against the dense Kronecker construction.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sweep {
    Regularizers,
    Distance,
    Augmentation,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Training seeds per row.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "regularizers,distance,augmentation")]
    sweeps: Vec<Sweep>,
    /// Augmentations tried one at a time by the augmentation sweep.
    #[arg(long, value_delimiter = ',', default_value = "flip_h,flip_v,rot90,rot180,resize:6x6")]
    augmentations: Vec<SpatialTransform>,
    /// Dataset for a classification-only model that every row fine-tunes.
    #[arg(long)]
    pretrain_data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pretrain_epochs: usize,
    /// Directory for one JSON file per table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Training config whose model, distance and first augmentation are checked.
    #[arg(long)]
    config: PathBuf,
    /// Coordinates per parameter tensor (0 = all).
    #[arg(long, default_value_t = 6)]
    max_coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long)]
    seed: Option<u64>,
}

pub enum Outcome {
    Success,
    NumericalFailure,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| AcrError::Format(e.to_string()))?);
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AcrError::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let pretty = cli.pretty;
    match cli.command {
        Command::GenData(a) => gen_data(a, pretty),
        Command::Train(a) => train_cmd(a, pretty),
        Command::Eval(a) => eval_cmd(a, pretty),
        Command::Seeds(a) => seeds_cmd(a, pretty),
        Command::CheckInversion(a) => check_inversion(a, pretty),
        Command::Ablate(a) => ablate(a, pretty),
        Command::GradCheck(a) => grad_check(a, pretty),
    }
}

fn gen_data(a: GenDataArgs, pretty: bool) -> Result<Outcome> {
    let cfg = SynthConfig {
        num_samples: a.samples,
        num_classes: a.classes,
        image_size: a.image_size,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg)?;
    acr_core::data::save_dataset(&ds, &a.out)?;
    if pretty {
        println!("wrote {} samples ({} classes) to {}", ds.len(), cfg.num_classes, a.out.display());
    } else {
        print_json(&serde_json::json!({
            "out": a.out,
            "samples": ds.len(),
            "config": cfg,
        }))?;
    }
    Ok(Outcome::Success)
}

fn train_cmd(a: TrainArgs, pretty: bool) -> Result<Outcome> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.distance {
        cfg.distance = v;
    }
    if let Some(v) = a.aug {
        cfg.augmentations = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    info!("training on {} samples", ds.len());
    let outcome = train(&cfg, &ds, Some(&a.out))?;
    let last = outcome.epochs.last().expect("at least one epoch");
    if pretty {
        println!("epoch  total       l_cls       l_act       l_aff");
        for e in &outcome.epochs {
            println!("{:>5}  {:<10.6}  {:<10.6}  {:<10.6}  {:<10.6}", e.epoch, e.total, e.l_cls, e.l_act, e.l_aff);
        }
        println!("outputs in {}", a.out.display());
    } else {
        print_json(&serde_json::json!({ "out": a.out, "final": last }))?;
    }
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct EvalOutput {
    refined: bool,
    layers: LayerRange,
    num_images: usize,
    best_threshold: f64,
    miou: f64,
    per_class_iou: Vec<Option<f64>>,
    fp: f64,
    #[serde(rename = "fn")]
    fn_: f64,
    curve: Vec<(f64, f64)>,
    layer_sweep: Vec<LayerSweepRow>,
}

fn eval_cmd(a: EvalArgs, pretty: bool) -> Result<Outcome> {
    let params = load_checkpoint(&a.checkpoint)?;
    let cfg = *params.config();
    let layers = match a.layers {
        Some(l) => l,
        None => LayerRange::last(2, cfg.num_layers)?,
    };
    layers.check(cfg.num_layers)?;
    let ds = load_dataset(&a.data)?;
    if ds.is_empty() {
        return Err(AcrError::Contract("dataset is empty".into()));
    }
    let refined = matches!(a.refined, Switch::On);
    let thresholds = default_thresholds();
    let k = cfg.num_classes + 1;
    let ev = collect_evidence(&params, &ds.samples)?;
    let sweep: ThresholdSweep = evaluate_maps(&ev, layers, refined, &thresholds, k)?
        .ok_or_else(|| AcrError::Contract("dataset is empty".into()))?;
    let starts: Vec<usize> = (0..cfg.num_layers).collect();
    let rows = layer_sweep(&ev, &starts, cfg.num_layers, refined, &thresholds, k)?;
    let out = EvalOutput {
        refined,
        layers,
        num_images: ds.len(),
        best_threshold: sweep.best_threshold,
        miou: sweep.best_miou,
        per_class_iou: sweep.report.per_class.clone(),
        fp: sweep.rates.fp,
        fn_: sweep.rates.fn_,
        curve: sweep.curve.clone(),
        layer_sweep: rows,
    };
    if pretty {
        println!(
            "{} maps, layers {}: mIoU {:.2} at threshold {:.2} (FP {:.4}, FN {:.4})",
            if refined { "refined" } else { "unrefined" },
            layers,
            100.0 * out.miou,
            out.best_threshold,
            out.fp,
            out.fn_
        );
        for (c, iou) in out.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => println!("  class {c:>2}: {:.2}", 100.0 * v),
                None => println!("  class {c:>2}: -"),
            }
        }
        println!("layer sweep:");
        for r in &out.layer_sweep {
            println!("  {:<6} mIoU {:>6.2}  FP {:.4}  FN {:.4}", r.layers.to_string(), 100.0 * r.miou, r.fp, r.fn_);
        }
    } else {
        print_json(&out)?;
    }
    Ok(Outcome::Success)
}

fn seeds_cmd(a: SeedsArgs, pretty: bool) -> Result<Outcome> {
    let params = load_checkpoint(&a.checkpoint)?;
    let cfg = *params.config();
    if a.class >= cfg.num_classes {
        return Err(AcrError::Contract(format!(
            "class {} out of range for {} classes",
            a.class, cfg.num_classes
        )));
    }
    let layers = match a.layers {
        Some(l) => l,
        None => LayerRange::last(2, cfg.num_layers)?,
    };
    let image = read_ppm(&a.image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let loc = params.localize(&image, &[a.class])?;
    let raw = grad_localization(&loc.adjoints[0], layers, loc.inference.grid, a.class)?;
    let refined = affinity_refine(&raw, &loc.inference.attentions, layers)?;
    fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    for (tag, map) in [("unrefined", &raw), ("refined", &refined)] {
        let up = map.upsample(h, w)?;
        let path = a.out.join(format!("class{}_{tag}.pgm", a.class));
        export_map(&up, map, Some(a.threshold), &path)?;
        let seed = seed_from_maps(std::slice::from_ref(&up), a.threshold, h, w)?;
        let seed_path = a.out.join(format!("class{}_{tag}_seed.pgm", a.class));
        let bytes: Vec<u8> = seed.mask.labels().iter().map(|&l| if l > 0 { 255 } else { 0 }).collect();
        write_pgm(&bytes, h, w, &seed_path)?;
        written.push(path);
        written.push(seed_path);
    }
    if a.attention_csv {
        for (l, att) in loc.inference.attentions.iter().enumerate() {
            let path = a.out.join(format!("attention_layer{l}.csv"));
            fs::write(&path, attention_csv(att)?)?;
            written.push(path);
        }
    }
    if pretty {
        println!("class {} score {:.4}", a.class, loc.inference.logits[a.class]);
        for p in &written {
            println!("  {}", p.display());
        }
    } else {
        print_json(&serde_json::json!({
            "class": a.class,
            "logit": loc.inference.logits[a.class],
            "layers": layers,
            "threshold": a.threshold,
            "files": written,
        }))?;
    }
    Ok(Outcome::Success)
}

const INVERSION_TOLERANCE: f64 = 1e-12;

#[derive(Serialize)]
struct InversionReport {
    grid: String,
    transform: SpatialTransform,
    trials: usize,
    /// Max |f⁻¹(conjugate(A)) − A| of the fast path.
    round_trip_error: f64,
    /// Max |fast − Kronecker| over patch blocks, when requested.
    oracle_difference: Option<f64>,
    tolerance: f64,
    passed: bool,
}

fn random_attention(n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut a = Tensor::rand_uniform(&[n, n], 0.0, 1.0, rng);
    for r in 0..n {
        let s: f64 = a.row(r).iter().sum();
        for c in 0..n {
            let v = a.at2(r, c) / s;
            a.set2(r, c, v);
        }
    }
    Ok(a)
}

fn patch_block(a: &Tensor) -> Result<Tensor> {
    let n = a.dims2()?.0;
    let mut out = Vec::with_capacity((n - 1) * (n - 1));
    for r in 1..n {
        out.extend_from_slice(&a.row(r)[1..]);
    }
    Tensor::matrix(n - 1, n - 1, out)
}

fn check_inversion(a: CheckInversionArgs, pretty: bool) -> Result<Outcome> {
    if !a.transform.is_permutation() {
        return Err(AcrError::UnsupportedTransform(format!(
            "{} is not a token permutation",
            a.transform
        )));
    }
    let g = a.grid;
    let view = a.transform.output_grid(g);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut round_trip: f64 = 0.0;
    let mut oracle: Option<f64> = a.oracle.then_some(0.0);
    for _ in 0..a.trials {
        let original = random_attention(g.n() + 1, &mut rng)?;
        let augmented = conjugate_attention(&original, a.transform, g)?;
        let back = invert_attention_fast(&augmented, a.transform, g)?;
        round_trip = round_trip.max(back.max_abs_diff(&original)?);
        if let Some(o) = oracle.as_mut() {
            let a_prime = random_attention(view.n() + 1, &mut rng)?;
            let fast = patch_block(&invert_attention_fast(&a_prime, a.transform, g)?)?;
            let dense = invert_attention_kronecker(&patch_block(&a_prime)?, a.transform, g)?;
            *o = o.max(fast.max_abs_diff(&dense)?);
        }
    }
    let passed = round_trip <= INVERSION_TOLERANCE && oracle.is_none_or(|o| o <= INVERSION_TOLERANCE);
    let report = InversionReport {
        grid: g.to_string(),
        transform: a.transform,
        trials: a.trials,
        round_trip_error: round_trip,
        oracle_difference: oracle,
        tolerance: INVERSION_TOLERANCE,
        passed,
    };
    if pretty {
        println!(
            "{} on {}: round trip {:.3e}, oracle {}  => {}",
            report.transform,
            report.grid,
            report.round_trip_error,
            report.oracle_difference.map_or("skipped".to_string(), |o| format!("{o:.3e}")),
            if passed { "PASS" } else { "FAIL" }
        );
    } else {
        print_json(&report)?;
    }
    Ok(if passed { Outcome::Success } else { Outcome::NumericalFailure })
}

fn ablate(a: AblateArgs, pretty: bool) -> Result<Outcome> {
    let cfg = TrainConfig::load(&a.config)?;
    let ds = load_dataset(&a.data)?;
    if a.seeds.is_empty() {
        return Err(AcrError::Config("at least one seed is required".into()));
    }
    let pretraining = match &a.pretrain_data {
        Some(dir) => Some(Pretraining {
            epochs: a.pretrain_epochs,
            dataset: load_dataset(dir)?,
        }),
        None => None,
    };
    let pre = pretraining.as_ref();
    let mut tables: Vec<AblationTable> = Vec::new();
    for sweep in &a.sweeps {
        let table = match sweep {
            Sweep::Regularizers => regularizer_grid(&cfg, &ds, &a.seeds, pre)?,
            Sweep::Distance => distance_sweep(&cfg, &ds, &a.seeds, pre)?,
            Sweep::Augmentation => augmentation_sweep(&cfg, &ds, &a.seeds, &a.augmentations, pre)?,
        };
        if let Some(dir) = &a.out {
            fs::create_dir_all(dir)?;
            write_json(&table, &dir.join(format!("{}.json", table.name)))?;
        }
        if pretty {
            println!("{}", table.to_text());
        } else {
            println!("{}", serde_json::to_string(&table).map_err(|e| AcrError::Format(e.to_string()))?);
        }
        tables.push(table);
    }
    Ok(Outcome::Success)
}

fn grad_check(a: GradCheckArgs, pretty: bool) -> Result<Outcome> {
    let cfg = TrainConfig::load(&a.config)?;
    let suite = SuiteConfig {
        vit: cfg.vit,
        transform: cfg.augmentations[0],
        distance: cfg.distance,
        step: a.step,
        tolerance: a.tolerance,
        seed: a.seed.unwrap_or(cfg.seed),
        max_coords: a.max_coords,
        ..SuiteConfig::default()
    };
    let report = run_suite(&suite)?;
    if pretty {
        for e in &report.entries {
            println!(
                "{:<4} {:<48} {:.3e} ({} checked, {} kinks)",
                if e.passed { "ok" } else { "FAIL" },
                e.name,
                e.max_rel_error,
                e.checked,
                e.skipped_kinks
            );
        }
        println!("worst relative error {:.3e} (tolerance {:.1e})", report.worst, report.tolerance);
    } else {
        print_json(&report)?;
    }
    Ok(if report.passed { Outcome::Success } else { Outcome::NumericalFailure })
}
