//! Class localization maps from attention gradients.
//!
//! A map for class `c` averages the class-to-patch row of `∂y_c/∂A_i` over a
//! range of layers, clamps negatives to zero and divides by the maximum. The
//! optional refinement multiplies that row vector by the layer-averaged
//! patch-to-patch attention before normalizing again. Maps live on the patch
//! grid; [`LocalizationMap::upsample`] brings them to pixel resolution for
//! seeding and evaluation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::write_pgm;
use crate::error::{dim_err, AcrError, Result};
use crate::grid::{bilinear_matrix, GridShape};
use crate::mask::LabelMask;
use crate::metrics::{best_threshold_miou, ThresholdSweep};
use crate::tensor::Tensor;

/// Half-open range of transformer layers, written `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(AcrError::Contract(format!("empty layer range {start}..{end}")));
        }
        Ok(Self { start, end })
    }

    /// The last `k` of `num_layers` layers (all of them if `k` is larger).
    pub fn last(k: usize, num_layers: usize) -> Result<Self> {
        Self::new(num_layers.saturating_sub(k), num_layers)
    }

    pub fn all(num_layers: usize) -> Result<Self> {
        Self::new(0, num_layers)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn check(&self, num_layers: usize) -> Result<()> {
        if self.is_empty() || self.end > num_layers {
            return Err(AcrError::Contract(format!(
                "layer range {self} does not fit {num_layers} layers"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for LayerRange {
    type Err = AcrError;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .trim()
            .split_once("..")
            .ok_or_else(|| AcrError::Format(format!("layer range `{s}` is not of the form A..B")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| AcrError::Format(format!("bad layer index `{v}` in `{s}`")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

impl Serialize for LayerRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-class map on the patch grid, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMap {
    pub class_index: usize,
    pub grid: GridShape,
    values: Vec<f64>,
    pub layers_fused: LayerRange,
    pub refined: bool,
}

/// Clamps negatives to zero and divides by the maximum, if positive.
fn clamp_normalize(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in values.iter_mut() {
            *v /= max;
        }
    }
}

fn check_square(t: &Tensor, n: usize, what: &str) -> Result<()> {
    let (r, c) = t.dims2()?;
    if r != n || c != n {
        return Err(dim_err!("{what}: expected {n}×{n}, got {r}×{c}"));
    }
    Ok(())
}

impl LocalizationMap {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Bilinear (half-pixel, clamped) resampling to `height × width`.
    pub fn upsample(&self, height: usize, width: usize) -> Result<UpsampledMap> {
        let my = bilinear_matrix(self.grid.h(), height)?;
        let mx = bilinear_matrix(self.grid.w(), width)?;
        let (gh, gw) = (self.grid.h(), self.grid.w());
        // Rows first, then columns.
        let mut rows = vec![0.0; height * gw];
        for y in 0..height {
            for i in 0..gh {
                let wy = my.get(y, i);
                if wy != 0.0 {
                    for j in 0..gw {
                        rows[y * gw + j] += wy * self.values[i * gw + j];
                    }
                }
            }
        }
        let mut values = vec![0.0; height * width];
        for y in 0..height {
            for x in 0..width {
                let mut v = 0.0;
                for j in 0..gw {
                    let wx = mx.get(x, j);
                    if wx != 0.0 {
                        v += wx * rows[y * gw + j];
                    }
                }
                values[y * width + x] = v;
            }
        }
        Ok(UpsampledMap {
            class_index: self.class_index,
            height,
            width,
            values,
        })
    }
}

/// A localization map resampled to pixel resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampledMap {
    pub class_index: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Mean over `range` of the class-to-patch adjoint rows, clamped and
/// max-normalized.
pub fn grad_localization(
    adjoints: &[Tensor],
    range: LayerRange,
    grid: GridShape,
    class_index: usize,
) -> Result<LocalizationMap> {
    range.check(adjoints.len())?;
    let n = grid.n();
    let mut values = vec![0.0; n];
    for layer in range.indices() {
        let a = &adjoints[layer];
        check_square(a, n + 1, "attention adjoint")?;
        for (v, &g) in values.iter_mut().zip(&a.row(0)[1..]) {
            *v += g;
        }
    }
    let count = range.len() as f64;
    for v in &mut values {
        *v /= count;
    }
    clamp_normalize(&mut values);
    Ok(LocalizationMap {
        class_index,
        grid,
        values,
        layers_fused: range,
        refined: false,
    })
}

/// Right-multiplies the map by the average of `A_i[1:, 1:]` over `range`,
/// then clamps and normalizes.
pub fn affinity_refine(
    map: &LocalizationMap,
    attentions: &[Tensor],
    range: LayerRange,
) -> Result<LocalizationMap> {
    if map.refined {
        return Err(AcrError::Contract("map is already refined".into()));
    }
    range.check(attentions.len())?;
    let n = map.grid.n();
    let mut affinity = vec![0.0; n * n];
    for layer in range.indices() {
        let a = &attentions[layer];
        check_square(a, n + 1, "attention")?;
        for r in 0..n {
            for (dst, &src) in affinity[r * n..(r + 1) * n].iter_mut().zip(&a.row(r + 1)[1..]) {
                *dst += src;
            }
        }
    }
    let count = range.len() as f64;
    let mut values = vec![0.0; n];
    for (j, &m) in map.values.iter().enumerate() {
        if m != 0.0 {
            for (v, &w) in values.iter_mut().zip(&affinity[j * n..(j + 1) * n]) {
                *v += m * (w / count);
            }
        }
    }
    clamp_normalize(&mut values);
    Ok(LocalizationMap {
        class_index: map.class_index,
        grid: map.grid,
        values,
        layers_fused: map.layers_fused,
        refined: true,
    })
}

/// Binarized localization: label `k + 1` for class `k`, 0 for background.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedMask {
    pub mask: LabelMask,
    pub threshold: f64,
}

/// Background where every class map is below `threshold`, otherwise the
/// class with the largest value (lowest class index on ties).
pub fn seed_from_maps(maps: &[UpsampledMap], threshold: f64, height: usize, width: usize) -> Result<SeedMask> {
    for m in maps {
        if m.height != height || m.width != width || m.values.len() != height * width {
            return Err(dim_err!(
                "map {}×{} for a {height}×{width} seed",
                m.height,
                m.width
            ));
        }
        if m.class_index >= 255 {
            return Err(AcrError::Contract(format!("class {} does not fit a label", m.class_index)));
        }
    }
    let mut labels = vec![0u8; height * width];
    for (p, label) in labels.iter_mut().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for m in maps {
            let v = m.values[p];
            let better = match best {
                None => true,
                Some((bv, bk)) => v > bv || (v == bv && m.class_index < bk),
            };
            if better {
                best = Some((v, m.class_index));
            }
        }
        if let Some((v, k)) = best {
            if v >= threshold {
                *label = k as u8 + 1;
            }
        }
    }
    Ok(SeedMask {
        mask: LabelMask::new(height, width, labels)?,
        threshold,
    })
}

/// Gradient evidence of one image.
#[derive(Clone, Debug)]
pub struct ImageEvidence {
    /// Zero-based classes the maps are computed for.
    pub classes: Vec<usize>,
    /// `adjoints[k][layer]` for `classes[k]`.
    pub adjoints: Vec<Vec<Tensor>>,
    pub attentions: Vec<Tensor>,
    pub grid: GridShape,
    pub gt: LabelMask,
}

impl ImageEvidence {
    /// Maps of every class, upsampled to the ground-truth resolution.
    pub fn maps(&self, range: LayerRange, refined: bool) -> Result<Vec<UpsampledMap>> {
        self.classes
            .iter()
            .zip(&self.adjoints)
            .map(|(&c, adj)| {
                let mut m = grad_localization(adj, range, self.grid, c)?;
                if refined {
                    m = affinity_refine(&m, &self.attentions, range)?;
                }
                m.upsample(self.gt.height(), self.gt.width())
            })
            .collect()
    }
}

/// Best-threshold seeds of every image for one fusion range.
pub fn evaluate_maps(
    evidence: &[ImageEvidence],
    range: LayerRange,
    refined: bool,
    thresholds: &[f64],
    num_classes: usize,
) -> Result<Option<ThresholdSweep>> {
    let maps = evidence
        .iter()
        .map(|e| e.maps(range, refined))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<LabelMask> = evidence.iter().map(|e| e.gt.clone()).collect();
    best_threshold_miou(&maps, &gts, thresholds, num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepRow {
    pub start_layer: usize,
    pub layers: LayerRange,
    pub refined: bool,
    pub miou: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub best_threshold: f64,
}

/// Fuses layers `start..num_layers` for every start in `starts`.
pub fn layer_sweep(
    evidence: &[ImageEvidence],
    starts: &[usize],
    num_layers: usize,
    refined: bool,
    thresholds: &[f64],
    num_classes: usize,
) -> Result<Vec<LayerSweepRow>> {
    let mut rows = Vec::with_capacity(starts.len());
    for &start in starts {
        let range = LayerRange::new(start, num_layers)?;
        let Some(sweep) = evaluate_maps(evidence, range, refined, thresholds, num_classes)? else {
            continue;
        };
        rows.push(LayerSweepRow {
            start_layer: start,
            layers: range,
            refined,
            miou: sweep.best_miou,
            fp: sweep.rates.fp,
            fn_: sweep.rates.fn_,
            best_threshold: sweep.best_threshold,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub class: usize,
    pub threshold: Option<f64>,
    pub layers_fused: LayerRange,
    pub refined: bool,
    pub height: usize,
    pub width: usize,
}

/// Writes `map` as an 8-bit PGM (values ×255) and a JSON sidecar next to it
/// (same stem, `.json`).
pub fn export_map(
    map: &UpsampledMap,
    source: &LocalizationMap,
    threshold: Option<f64>,
    pgm_path: &Path,
) -> Result<()> {
    let bytes: Vec<u8> = map
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm(&bytes, map.height, map.width, pgm_path)?;
    let sidecar = MapSidecar {
        class: map.class_index,
        threshold,
        layers_fused: source.layers_fused,
        refined: source.refined,
        height: map.height,
        width: map.width,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| AcrError::Format(e.to_string()))?;
    fs::write(pgm_path.with_extension("json"), json + "\n")?;
    Ok(())
}

/// Comma-separated rows of a matrix.
pub fn attention_csv(a: &Tensor) -> Result<String> {
    let (r, c) = a.dims2()?;
    let mut out = String::with_capacity(r * c * 12);
    for i in 0..r {
        let row: Vec<String> = a.row(i).iter().map(|v| format!("{v:.9e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}
