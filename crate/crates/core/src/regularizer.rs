//! Attention consistency objective over two views of one image.
//!
//! `l_act` compares class-to-patch attention (row 0 without the class
//! column), `l_aff` the patch-to-patch block, each between the first view and
//! the inverted second view. Distances are mean-reduced and averaged over the
//! selected layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, AcrError, Result};
use crate::grid::{invert_attention_var, GridShape, SpatialTransform};
use crate::tensor::Tensor;
use crate::vit::{ForwardOptions, ForwardResult, ParamVars, ViTParams};

pub const DEFAULT_ALPHA: f64 = 100.0;
pub const DEFAULT_BETA: f64 = 100.0;
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Distance {
    #[default]
    L1,
    L2,
    SmoothL1,
}

impl Distance {
    pub const ALL: [Distance; 3] = [Distance::L1, Distance::L2, Distance::SmoothL1];

    pub fn apply(self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        match self {
            Distance::L1 => tape.abs_mean(a, b),
            Distance::L2 => tape.sq_mean(a, b),
            Distance::SmoothL1 => tape.smooth_l1_mean(a, b, SMOOTH_L1_BETA),
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::L1 => "l1",
            Distance::L2 => "l2",
            Distance::SmoothL1 => "smooth_l1",
        })
    }
}

impl FromStr for Distance {
    type Err = AcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "l1" => Ok(Distance::L1),
            "l2" | "mse" => Ok(Distance::L2),
            "smooth_l1" | "smoothl1" | "huber" => Ok(Distance::SmoothL1),
            _ => Err(AcrError::Format(format!("unknown distance `{s}`"))),
        }
    }
}

impl Serialize for Distance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Distance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub distance: Distance,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            distance: Distance::L1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(AcrError::Config(format!(
                "loss weights must be finite and non-negative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_act: f64,
    pub l_aff: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_cls: f64, l_act: f64, l_aff: f64, weights: &LossWeights) -> Self {
        Self {
            l_cls,
            l_act,
            l_aff,
            total: l_cls + weights.alpha * l_act + weights.beta * l_aff,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_act, self.l_aff, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_cls: Var,
    pub l_act: Var,
    pub l_aff: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            l_cls: tape.value(self.l_cls).item()?,
            l_act: tape.value(self.l_act).item()?,
            l_aff: tape.value(self.l_aff).item()?,
            total: tape.value(self.total).item()?,
        })
    }
}

enum Region {
    Activation,
    Affinity,
}

fn consistency(
    tape: &mut Tape,
    a_layers: &[Var],
    a_prime_layers: &[Var],
    t: SpatialTransform,
    g: GridShape,
    distance: Distance,
    region: Region,
) -> Result<Var> {
    if a_layers.len() != a_prime_layers.len() {
        return Err(dim_err!(
            "{} attention layers against {}",
            a_layers.len(),
            a_prime_layers.len()
        ));
    }
    if a_layers.is_empty() {
        return Err(AcrError::Contract("consistency loss over zero layers".into()));
    }
    let n = g.n() + 1;
    let mut total: Option<Var> = None;
    for (&a, &a_prime) in a_layers.iter().zip(a_prime_layers) {
        let (r, c) = tape.value(a).dims2()?;
        if r != n || c != n {
            return Err(dim_err!("attention {r}×{c} does not match grid {g}"));
        }
        let back = invert_attention_var(tape, a_prime, t, g)?;
        let (rows, cols) = match region {
            Region::Activation => (0..1, 1..n),
            Region::Affinity => (1..n, 1..n),
        };
        let x = tape.slice2d(a, rows.clone(), cols.clone())?;
        let y = tape.slice2d(back, rows, cols)?;
        let d = distance.apply(tape, x, y)?;
        total = Some(match total {
            None => d,
            Some(s) => tape.add(s, d)?,
        });
    }
    let total = total.expect("non-empty");
    if a_layers.len() == 1 {
        Ok(total)
    } else {
        tape.scale(total, 1.0 / a_layers.len() as f64)
    }
}

/// Layer-averaged distance between class-to-patch rows of `A_i` and of
/// `f⁻¹(A'_i)`.
pub fn region_activation_loss(
    tape: &mut Tape,
    a_layers: &[Var],
    a_prime_layers: &[Var],
    t: SpatialTransform,
    g: GridShape,
    distance: Distance,
) -> Result<Var> {
    consistency(tape, a_layers, a_prime_layers, t, g, distance, Region::Activation)
}

/// Layer-averaged distance between patch-to-patch blocks of `A_i` and of
/// `f⁻¹(A'_i)`.
pub fn region_affinity_loss(
    tape: &mut Tape,
    a_layers: &[Var],
    a_prime_layers: &[Var],
    t: SpatialTransform,
    g: GridShape,
    distance: Distance,
) -> Result<Var> {
    consistency(tape, a_layers, a_prime_layers, t, g, distance, Region::Affinity)
}

/// `l_cls + α·l_act + β·l_aff` with `l_cls` the mean of both views' BCE.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    logits_prime: Var,
    targets: Var,
    l_act: Var,
    l_aff: Var,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let c1 = tape.bce_with_logits(logits, targets)?;
    let c2 = tape.bce_with_logits(logits_prime, targets)?;
    let both = tape.add(c1, c2)?;
    let l_cls = tape.scale(both, 0.5)?;
    let act = tape.scale(l_act, weights.alpha)?;
    let aff = tape.scale(l_aff, weights.beta)?;
    let total = tape.add(l_cls, act)?;
    let total = tape.add(total, aff)?;
    Ok(LossVars {
        l_cls,
        l_act,
        l_aff,
        total,
    })
}

/// Everything recorded by one two-view step.
#[derive(Clone, Debug)]
pub struct TwoViewPass {
    pub first: ForwardResult,
    pub second: ForwardResult,
    pub losses: LossVars,
}

/// Forwards `image` and its augmented view `view` (produced by `t`) through
/// shared parameters and records the full objective.
///
/// `layers` selects the attention layers entering the consistency terms.
#[allow(clippy::too_many_arguments)]
pub fn two_view_objective(
    tape: &mut Tape,
    params: &ViTParams,
    vars: &ParamVars,
    image: &Tensor,
    view: &Tensor,
    t: SpatialTransform,
    targets: &Tensor,
    weights: &LossWeights,
    layers: &[usize],
) -> Result<TwoViewPass> {
    let cfg = params.config();
    if targets.numel() != cfg.num_classes {
        return Err(dim_err!(
            "{} targets for {} classes",
            targets.numel(),
            cfg.num_classes
        ));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= cfg.num_layers) {
        return Err(AcrError::Config(format!(
            "loss layer {bad} out of range for {} layers",
            cfg.num_layers
        )));
    }
    let first = params.forward(tape, vars, image, ForwardOptions::default())?;
    let opts = ForwardOptions {
        attention_probes: false,
        interpolate_positions: t.output_grid(cfg.grid) != cfg.grid,
    };
    let second = params.forward(tape, vars, view, opts)?;
    let expected = t.output_grid(first.grid);
    if second.grid != expected {
        return Err(dim_err!(
            "view grid {} does not match {t} of grid {}",
            second.grid,
            first.grid
        ));
    }
    let pick = |r: &ForwardResult| layers.iter().map(|&l| r.attentions[l].matrix).collect::<Vec<_>>();
    let (a, a_prime) = (pick(&first), pick(&second));
    let target_row = tape.constant(targets.clone().reshape(&[1, cfg.num_classes])?)?;
    let g = first.grid;
    // A zero-weighted term is still reported, but evaluated off the tape so
    // backward does not traverse it.
    let term = |tape: &mut Tape, w: f64, region: Region| -> Result<Var> {
        if w != 0.0 {
            return consistency(tape, &a, &a_prime, t, g, weights.distance, region);
        }
        let mut scratch = Tape::new();
        let mut detach = |vs: &[Var]| -> Result<Vec<Var>> {
            vs.iter().map(|&v| scratch.constant(tape.value(v).clone())).collect()
        };
        let (da, db) = (detach(&a)?, detach(&a_prime)?);
        let v = consistency(&mut scratch, &da, &db, t, g, weights.distance, region)?;
        tape.constant(scratch.value(v).clone())
    };
    let l_act = term(tape, weights.alpha, Region::Activation)?;
    let l_aff = term(tape, weights.beta, Region::Affinity)?;
    let losses = total_loss(tape, first.logits, second.logits, target_row, l_act, l_aff, weights)?;
    Ok(TwoViewPass {
        first,
        second,
        losses,
    })
}
