//! Pixel-space augmentations matching the token permutations of
//! [`crate::grid`]. Flips and rotations are exact re-indexings; resize is
//! bilinear for images and nearest-neighbour for masks.

use crate::error::{dim_err, Result};
use crate::grid::{bilinear_matrix, SpatialTransform};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Two views of one image; `view_b` is `transform` applied to `view_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub transform: SpatialTransform,
}

impl AugmentedPair {
    pub fn new(image: &Tensor, transform: SpatialTransform, patch_size: usize) -> Result<Self> {
        Ok(Self {
            view_a: image.clone(),
            view_b: augment_image(image, transform, patch_size)?,
            transform,
        })
    }
}

/// Source pixel `(y, x)` of target pixel `(i, j)` for a permutation transform
/// on an `h × w` image.
fn source_pixel(t: SpatialTransform, h: usize, w: usize, i: usize, j: usize) -> (usize, usize) {
    match t {
        SpatialTransform::Identity => (i, j),
        SpatialTransform::FlipH => (i, w - 1 - j),
        SpatialTransform::FlipV => (h - 1 - i, j),
        SpatialTransform::FlipHV | SpatialTransform::Rot180 => (h - 1 - i, w - 1 - j),
        SpatialTransform::Rot90 => (j, w - 1 - i),
        SpatialTransform::Rot270 => (h - 1 - j, i),
        SpatialTransform::Resize(_) => unreachable!("resize handled separately"),
    }
}

fn target_size(t: SpatialTransform, h: usize, w: usize, patch_size: usize) -> (usize, usize) {
    match t {
        SpatialTransform::Rot90 | SpatialTransform::Rot270 => (w, h),
        SpatialTransform::Resize(g) => (g.h() * patch_size, g.w() * patch_size),
        _ => (h, w),
    }
}

/// Applies `t` to a `[C, H, W]` image. `patch_size` converts a resize target
/// grid into pixels.
pub fn augment_image(image: &Tensor, t: SpatialTransform, patch_size: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(dim_err!("expected a [C, H, W] image, got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = target_size(t, h, w, patch_size);
    let src = image.data();
    let mut out = vec![0.0; c * oh * ow];
    if let SpatialTransform::Resize(_) = t {
        let my = bilinear_matrix(h, oh)?;
        let mx = bilinear_matrix(w, ow)?;
        let taps = |m: &crate::grid::dense::Matrix, r: usize| -> Vec<(usize, f64)> {
            (0..m.cols())
                .filter(|&k| m.get(r, k) != 0.0)
                .map(|k| (k, m.get(r, k)))
                .collect()
        };
        let ty: Vec<_> = (0..oh).map(|i| taps(&my, i)).collect();
        let tx: Vec<_> = (0..ow).map(|j| taps(&mx, j)).collect();
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut v = 0.0;
                    for &(a, wa) in &ty[i] {
                        for &(b, wb) in &tx[j] {
                            v += wa * wb * src[ch * h * w + a * w + b];
                        }
                    }
                    out[ch * oh * ow + i * ow + j] = v;
                }
            }
        }
    } else {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let (y, x) = source_pixel(t, h, w, i, j);
                    out[ch * oh * ow + i * ow + j] = src[ch * h * w + y * w + x];
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Applies `t` to a label mask; resize uses nearest-neighbour sampling.
pub fn augment_mask(mask: &LabelMask, t: SpatialTransform, patch_size: usize) -> Result<LabelMask> {
    let (h, w) = (mask.height(), mask.width());
    let (oh, ow) = target_size(t, h, w, patch_size);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let (y, x) = match t {
                SpatialTransform::Resize(_) => (nearest(i, h, oh), nearest(j, w, ow)),
                _ => source_pixel(t, h, w, i, j),
            };
            out.push(mask.get(y, x));
        }
    }
    LabelMask::new(oh, ow, out)
}

fn nearest(o: usize, n_in: usize, n_out: usize) -> usize {
    (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}
