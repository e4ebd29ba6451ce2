//! Synthetic multi-label shape images with pixel ground truth.
//!
//! Each image holds one to three shapes. Every class has its own hue band and
//! surface texture; the background is a low-amplitude noise field around a
//! random gray level. A new shape is only kept if every shape placed before it
//! stays at least 30% visible; otherwise its placement is retried and finally
//! dropped. Pixel values are quantized to multiples of 1/255 so a round trip
//! through 8-bit image files is lossless.
//!
//! Sample `i` is generated from its own seed derived from the master seed, so
//! samples are independent of each other and of generation order.

mod augment;
mod io;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use augment::{augment_image, augment_mask, AugmentedPair};
pub use io::{load_dataset, read_index, read_pgm, read_ppm, save_dataset, write_pgm, write_ppm, IndexEntry, DATASET_META_FILE, INDEX_FILE};

use crate::error::{AcrError, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const MIN_VISIBLE_FRACTION: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 20;
const BACKGROUND_NOISE_STD: f64 = 0.04;
const TEXTURE_AMPLITUDE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Disk,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Ring,
        ShapeClass::Cross,
    ];

    fn hue(self) -> f64 {
        match self {
            ShapeClass::Disk => 0.0,
            ShapeClass::Square => 0.2,
            ShapeClass::Triangle => 0.4,
            ShapeClass::Ring => 0.6,
            ShapeClass::Cross => 0.8,
        }
    }

    /// Whether pixel offset `(dy, dx)` from the center lies inside a shape of
    /// radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        let d2 = dy * dy + dx * dx;
        match self {
            ShapeClass::Disk => d2 <= r * r,
            ShapeClass::Square => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
            ShapeClass::Triangle => {
                // Apex up, base at dy = r.
                dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5
            }
            ShapeClass::Ring => d2 <= r * r && d2 >= 0.3 * r * r,
            ShapeClass::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }

    /// Multiplicative surface pattern in `[-1, 1]` at pixel `(y, x)`.
    fn texture(self, y: usize, x: usize) -> f64 {
        match self {
            ShapeClass::Disk | ShapeClass::Ring => 0.0,
            ShapeClass::Square => if y % 4 < 2 { 1.0 } else { -1.0 },
            ShapeClass::Triangle => if (y / 2 + x / 2).is_multiple_of(2) { 1.0 } else { -1.0 },
            ShapeClass::Cross => if x % 4 < 2 { 1.0 } else { -1.0 },
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Ring => "ring",
            ShapeClass::Cross => "cross",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 500,
            num_classes: 5,
            image_size: 32,
            seed: 0,
            min_shapes: 1,
            max_shapes: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > ShapeClass::ALL.len() {
            return Err(AcrError::Config(format!(
                "num_classes must be in 1..={}, got {}",
                ShapeClass::ALL.len(),
                self.num_classes
            )));
        }
        if self.image_size < 8 {
            return Err(AcrError::Config("image_size must be at least 8".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(AcrError::Config(format!(
                "shape count range {}..={} is invalid",
                self.min_shapes, self.max_shapes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Multi-hot over classes.
    pub labels: Vec<f64>,
    /// Class `k` is stored as label `k + 1`.
    pub mask: LabelMask,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn label_tensor(&self) -> Tensor {
        Tensor::vector(self.labels.clone()).expect("non-empty labels")
    }

    /// Zero-based indices of the present classes.
    pub fn present_classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0.5)
            .map(|(k, _)| k)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Placed {
    class: usize,
    area: usize,
}

/// One sample from its own seed.
pub fn generate_sample(config: &SynthConfig, seed: u64) -> Result<SyntheticSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let npx = size * size;

    let base = rng.random_range(0.3..0.7);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let noise = Normal::new(0.0, BACKGROUND_NOISE_STD).expect("valid std");
    let mut pixels = vec![0.0; CHANNELS * npx];
    for c in 0..CHANNELS {
        for p in 0..npx {
            pixels[c * npx + p] = base + tint[c] + noise.sample(&mut rng);
        }
    }

    // Owner of each pixel: index into `placed`, or usize::MAX.
    let mut owner = vec![usize::MAX; npx];
    let mut placed: Vec<Placed> = Vec::new();
    let count = rng.random_range(config.min_shapes..=config.max_shapes);
    let scale = size as f64 / 32.0;
    for _ in 0..count {
        let class = rng.random_range(0..config.num_classes);
        let shape = ShapeClass::ALL[class];
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = rng.random_range(5.0..9.5) * scale;
            let cy = rng.random_range(0.0..size as f64);
            let cx = rng.random_range(0.0..size as f64);
            let cover: Vec<usize> = (0..npx)
                .filter(|&p| {
                    let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
                    shape.contains(y - cy, x - cx, r)
                })
                .collect();
            if cover.is_empty() {
                continue;
            }
            let mut lost = vec![0usize; placed.len()];
            for &p in &cover {
                if owner[p] != usize::MAX {
                    lost[owner[p]] += 1;
                }
            }
            let ok = placed.iter().enumerate().zip(&lost).all(|((id, s), &l)| {
                let visible = owner.iter().filter(|&&o| o == id).count() - l;
                visible as f64 >= MIN_VISIBLE_FRACTION * s.area as f64
            });
            if !ok {
                continue;
            }
            let id = placed.len();
            let hue = shape.hue() + rng.random_range(-0.04..0.04);
            let sat = rng.random_range(0.55..0.9);
            let val = rng.random_range(0.6..0.95);
            let rgb = hsv_to_rgb(hue, sat, val);
            for &p in &cover {
                owner[p] = id;
                let tex = 1.0 + TEXTURE_AMPLITUDE * shape.texture(p / size, p % size);
                for c in 0..CHANNELS {
                    pixels[c * npx + p] = rgb[c] * tex;
                }
            }
            placed.push(Placed {
                class,
                area: cover.len(),
            });
            break;
        }
    }

    for v in &mut pixels {
        *v = quantize(*v);
    }
    let labels_px: Vec<u8> = owner
        .iter()
        .map(|&o| if o == usize::MAX { 0 } else { placed[o].class as u8 + 1 })
        .collect();
    let mask = LabelMask::new(size, size, labels_px)?;
    let mut labels = vec![0.0; config.num_classes];
    for k in mask.present_classes() {
        labels[k as usize - 1] = 1.0;
    }
    Ok(SyntheticSample {
        image: Tensor::new(vec![CHANNELS, size, size], pixels)?,
        labels,
        mask,
        seed,
    })
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let samples = (0..config.num_samples)
        .map(|i| generate_sample(config, sample_seed(config.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: *config,
        samples,
    })
}

#[cfg(test)]
mod tests;
