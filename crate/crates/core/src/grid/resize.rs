//! Bilinear resizing of attention matrices between patch grids.
//!
//! Interpolation uses half-pixel centers with edge clamping. A grid resize is
//! the Kronecker product of the two 1-d interpolation matrices, so resizing
//! the 4-d patch-to-patch block `(h',w',h',w') → (h,w,h,w)` along both grid
//! pairs is `M A' Mᵀ`. The class row and column are interpolated along their
//! patch axis, entry `(0,0)` is kept, and finally each row is rescaled so its
//! sum equals the interpolated row sum of the input.

use super::dense::Matrix;
use super::GridShape;
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// `dst × src` matrix of 1-d linear interpolation weights.
pub fn bilinear_matrix(src: usize, dst: usize) -> Result<Matrix> {
    if src == 0 || dst == 0 {
        return Err(dim_err!("interpolation between {src} and {dst} samples"));
    }
    let mut m = Matrix::zeros(dst, src);
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(src - 1);
        let frac = x - x0 as f64;
        m.set(i, x0, m.get(i, x0) + (1.0 - frac));
        m.set(i, x1, m.get(i, x1) + frac);
    }
    Ok(m)
}

/// `target.n × source.n` interpolation matrix over row-major token order.
pub fn grid_resize_matrix(source: GridShape, target: GridShape) -> Result<Matrix> {
    Ok(bilinear_matrix(source.h(), target.h())?.kron(&bilinear_matrix(source.w(), target.w())?))
}

/// `diag(1, M)`: keeps the class token, interpolates patch tokens.
fn token_resize_matrix(source: GridShape, target: GridShape) -> Result<Tensor> {
    let m = grid_resize_matrix(source, target)?;
    let (rows, cols) = (target.n() + 1, source.n() + 1);
    let mut e = Tensor::zeros(&[rows, cols]);
    e.set2(0, 0, 1.0);
    for r in 0..target.n() {
        for c in 0..source.n() {
            e.set2(r + 1, c + 1, m.get(r, c));
        }
    }
    Ok(e)
}

/// Differentiable attention resize from `source` to `target` grid.
pub fn resize_attention_var(
    tape: &mut Tape,
    a_prime: Var,
    source: GridShape,
    target: GridShape,
) -> Result<Var> {
    let (r, c) = tape.value(a_prime).dims2()?;
    if r != c || r != source.n() + 1 {
        return Err(dim_err!(
            "resize_attention: expected {0}×{0} for grid {source}, got {r}×{c}",
            source.n() + 1
        ));
    }
    let e = tape.constant(token_resize_matrix(source, target)?)?;
    let left = tape.matmul(e, a_prime)?;
    let resized = tape.matmul_nt(left, e)?;

    let ones_src = tape.constant(Tensor::full(&[source.n() + 1, 1], 1.0))?;
    let ones_dst = tape.constant(Tensor::full(&[target.n() + 1, 1], 1.0))?;
    let src_sums = tape.matmul(a_prime, ones_src)?;
    let wanted = tape.matmul(e, src_sums)?;
    let current = tape.matmul(resized, ones_dst)?;
    let factors = tape.div(wanted, current)?;
    tape.mul_rows(resized, factors)
}

/// [`resize_attention_var`] on plain tensors.
pub fn resize_attention(a_prime: &Tensor, source: GridShape, target: GridShape) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(a_prime.clone())?;
    let out = resize_attention_var(&mut tape, a, source, target)?;
    Ok(tape.value(out).clone())
}
