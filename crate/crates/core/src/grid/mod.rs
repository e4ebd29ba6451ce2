//! Patch-grid geometry: spatial augmentations as token permutations, and the
//! inversion that maps an augmented view's attention matrix back to the token
//! order of the original view.
//!
//! Tokens are numbered row-major over the patch grid (`i * w + j`). A
//! [`TokenPermutation`] uses the gather convention: `sigma[j]` is the source
//! token that lands at target position `j`.

pub mod dense;
mod kronecker;
mod resize;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, AcrError, Result};
use crate::tensor::Tensor;

pub use kronecker::{
    invert_attention_kronecker, invert_attention_kronecker_capped, permutation_factors,
    PermutationFactors, DEFAULT_ORACLE_TOKEN_CAP,
};
pub use resize::{bilinear_matrix, grid_resize_matrix, resize_attention, resize_attention_var};

/// An `h × w` grid of image patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    h: usize,
    w: usize,
}

impl GridShape {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(dim_err!("grid extents must be positive, got {h}×{w}"));
        }
        Ok(Self { h, w })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Number of patch tokens.
    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn transposed(&self) -> Self {
        Self {
            h: self.w,
            w: self.h,
        }
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.w + j
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

impl FromStr for GridShape {
    type Err = AcrError;

    fn from_str(s: &str) -> Result<Self> {
        let (h, w) = s
            .split_once(['x', 'X', '×'])
            .ok_or_else(|| AcrError::Format(format!("grid `{s}` is not of the form HxW")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| AcrError::Format(format!("grid `{s}` is not of the form HxW")))
        };
        GridShape::new(parse(h)?, parse(w)?)
    }
}

/// Image-space augmentation applied to derive the second view.
///
/// Rotations are counter-clockwise. `Rot90` and `Rot270` swap the grid
/// extents on non-square grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpatialTransform {
    Identity,
    FlipH,
    FlipV,
    FlipHV,
    Rot90,
    Rot180,
    Rot270,
    Resize(GridShape),
}

impl SpatialTransform {
    /// All transforms expressible as token permutations.
    pub const PERMUTATIONS: [SpatialTransform; 7] = [
        SpatialTransform::Identity,
        SpatialTransform::FlipH,
        SpatialTransform::FlipV,
        SpatialTransform::FlipHV,
        SpatialTransform::Rot90,
        SpatialTransform::Rot180,
        SpatialTransform::Rot270,
    ];

    pub fn is_permutation(&self) -> bool {
        !matches!(self, SpatialTransform::Resize(_))
    }

    pub fn swaps_axes(&self) -> bool {
        matches!(self, SpatialTransform::Rot90 | SpatialTransform::Rot270)
    }

    /// Grid of the augmented view.
    pub fn output_grid(&self, g: GridShape) -> GridShape {
        match self {
            SpatialTransform::Rot90 | SpatialTransform::Rot270 => g.transposed(),
            SpatialTransform::Resize(target) => *target,
            _ => g,
        }
    }

    /// Transform that undoes `self` when applied to a view produced from a
    /// `source` grid.
    pub fn inverse(&self, source: GridShape) -> SpatialTransform {
        match self {
            SpatialTransform::Rot90 => SpatialTransform::Rot270,
            SpatialTransform::Rot270 => SpatialTransform::Rot90,
            SpatialTransform::Resize(_) => SpatialTransform::Resize(source),
            other => *other,
        }
    }
}

impl fmt::Display for SpatialTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpatialTransform::Identity => f.write_str("identity"),
            SpatialTransform::FlipH => f.write_str("flip_h"),
            SpatialTransform::FlipV => f.write_str("flip_v"),
            SpatialTransform::FlipHV => f.write_str("flip_hv"),
            SpatialTransform::Rot90 => f.write_str("rot90"),
            SpatialTransform::Rot180 => f.write_str("rot180"),
            SpatialTransform::Rot270 => f.write_str("rot270"),
            SpatialTransform::Resize(g) => write!(f, "resize:{g}"),
        }
    }
}

impl FromStr for SpatialTransform {
    type Err = AcrError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "identity" | "id" => SpatialTransform::Identity,
            "flip_h" | "fliph" | "hflip" => SpatialTransform::FlipH,
            "flip_v" | "flipv" | "vflip" => SpatialTransform::FlipV,
            "flip_hv" | "fliphv" => SpatialTransform::FlipHV,
            "rot90" => SpatialTransform::Rot90,
            "rot180" => SpatialTransform::Rot180,
            "rot270" => SpatialTransform::Rot270,
            other => match other.strip_prefix("resize:") {
                Some(grid) => SpatialTransform::Resize(grid.parse()?),
                None => {
                    return Err(AcrError::Format(format!("unknown transform `{s}`")));
                }
            },
        })
    }
}

impl Serialize for SpatialTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SpatialTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Bijection between the patch tokens of a source grid and an augmented grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPermutation {
    source_grid: GridShape,
    target_grid: GridShape,
    sigma: Vec<usize>,
}

impl TokenPermutation {
    pub fn identity(g: GridShape) -> Self {
        Self {
            source_grid: g,
            target_grid: g,
            sigma: (0..g.n()).collect(),
        }
    }

    pub fn source_grid(&self) -> GridShape {
        self.source_grid
    }

    pub fn target_grid(&self) -> GridShape {
        self.target_grid
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    pub fn is_identity(&self) -> bool {
        self.source_grid == self.target_grid && self.sigma.iter().enumerate().all(|(j, &s)| j == s)
    }

    /// `inv[s]` is the target position of source token `s`.
    pub fn inverse_indices(&self) -> Vec<usize> {
        let mut inv = vec![0; self.sigma.len()];
        for (j, &s) in self.sigma.iter().enumerate() {
            inv[s] = j;
        }
        inv
    }

    pub fn inverse(&self) -> Self {
        Self {
            source_grid: self.target_grid,
            target_grid: self.source_grid,
            sigma: self.inverse_indices(),
        }
    }

    /// Applies `self`, then `next`.
    pub fn then(&self, next: &TokenPermutation) -> Result<Self> {
        if self.target_grid != next.source_grid {
            return Err(dim_err!(
                "cannot compose permutation onto {} with one from {}",
                self.target_grid,
                next.source_grid
            ));
        }
        Ok(Self {
            source_grid: self.source_grid,
            target_grid: next.target_grid,
            sigma: next.sigma.iter().map(|&k| self.sigma[k]).collect(),
        })
    }

    /// Dense matrix `P` with `P · x_source = x_target` for row-major token
    /// vectors.
    pub fn to_matrix(&self) -> dense::Matrix {
        let n = self.sigma.len();
        let mut p = dense::Matrix::zeros(n, n);
        for (j, &s) in self.sigma.iter().enumerate() {
            p.set(j, s, 1.0);
        }
        p
    }
}

/// Token permutation induced on grid `g` by the image transform `t`.
pub fn token_permutation(t: SpatialTransform, g: GridShape) -> Result<TokenPermutation> {
    let (h, w) = (g.h(), g.w());
    let target = t.output_grid(g);
    let source_of = |i: usize, j: usize| -> Result<(usize, usize)> {
        Ok(match t {
            SpatialTransform::Identity => (i, j),
            SpatialTransform::FlipH => (i, w - 1 - j),
            SpatialTransform::FlipV => (h - 1 - i, j),
            SpatialTransform::FlipHV | SpatialTransform::Rot180 => (h - 1 - i, w - 1 - j),
            SpatialTransform::Rot90 => (j, w - 1 - i),
            SpatialTransform::Rot270 => (h - 1 - j, i),
            SpatialTransform::Resize(_) => {
                return Err(AcrError::UnsupportedTransform(
                    "resize does not permute tokens; use resize_attention".into(),
                ))
            }
        })
    };
    let mut sigma = Vec::with_capacity(g.n());
    for i in 0..target.h() {
        for j in 0..target.w() {
            let (si, sj) = source_of(i, j)?;
            sigma.push(g.index(si, sj));
        }
    }
    Ok(TokenPermutation {
        source_grid: g,
        target_grid: target,
        sigma,
    })
}

fn check_square(t: &Tensor, n_tokens: usize, what: &str) -> Result<()> {
    let (r, c) = t.dims2()?;
    if r != c || r != n_tokens {
        return Err(dim_err!(
            "{what}: expected a {n_tokens}×{n_tokens} matrix, got {r}×{c}"
        ));
    }
    Ok(())
}

fn inversion_indices(t: SpatialTransform, g: GridShape) -> Result<Vec<usize>> {
    let perm = token_permutation(t, g)?;
    let inv = perm.inverse_indices();
    Ok(std::iter::once(0).chain(inv.iter().map(|&j| j + 1)).collect())
}

/// Re-indexes the attention matrix of a view augmented by `t` (class token at
/// index 0) back to the token order of the source grid `g`.
pub fn invert_attention_fast(a_prime: &Tensor, t: SpatialTransform, g: GridShape) -> Result<Tensor> {
    check_square(a_prime, g.n() + 1, "invert_attention_fast")?;
    let idx = inversion_indices(t, g)?;
    let n = g.n() + 1;
    let mut out = vec![0.0; n * n];
    for (r, &sr) in idx.iter().enumerate() {
        for (c, &sc) in idx.iter().enumerate() {
            out[r * n + c] = a_prime.at2(sr, sc);
        }
    }
    Tensor::matrix(n, n, out)
}

/// Differentiable inversion on a tape. Permutations become a gather; resize
/// becomes [`resize_attention_var`] back to `g`.
pub fn invert_attention_var(
    tape: &mut Tape,
    a_prime: Var,
    t: SpatialTransform,
    g: GridShape,
) -> Result<Var> {
    match t {
        SpatialTransform::Resize(view_grid) => resize_attention_var(tape, a_prime, view_grid, g),
        _ => {
            check_square(tape.value(a_prime), g.n() + 1, "invert_attention")?;
            let idx = inversion_indices(t, g)?;
            tape.gather2d(a_prime, idx.clone(), idx)
        }
    }
}

/// Inversion of any supported transform on plain tensors.
pub fn invert_attention(a_prime: &Tensor, t: SpatialTransform, g: GridShape) -> Result<Tensor> {
    match t {
        SpatialTransform::Resize(view_grid) => resize_attention(a_prime, view_grid, g),
        _ => invert_attention_fast(a_prime, t, g),
    }
}

/// Forward model of an augmentation on an attention matrix:
/// `A'[j][k] = A[sigma[j]][sigma[k]]` over patch tokens, class token fixed.
pub fn conjugate_attention(a: &Tensor, t: SpatialTransform, g: GridShape) -> Result<Tensor> {
    check_square(a, g.n() + 1, "conjugate_attention")?;
    let perm = token_permutation(t, g)?;
    let idx: Vec<usize> = std::iter::once(0)
        .chain(perm.sigma().iter().map(|&s| s + 1))
        .collect();
    let n = idx.len();
    let mut out = vec![0.0; n * n];
    for (r, &sr) in idx.iter().enumerate() {
        for (c, &sc) in idx.iter().enumerate() {
            out[r * n + c] = a.at2(sr, sc);
        }
    }
    Tensor::matrix(n, n, out)
}
