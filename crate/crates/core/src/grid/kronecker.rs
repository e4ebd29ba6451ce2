//! Attention inversion through explicitly materialized permutation,
//! Kronecker-product and commutation matrices.
//!
//! For a patch feature map `X` (`h×w`), flips act as `X' = P_h X P_w` and
//! rotations as `X' = P_h Xᵀ P_w`. With the column-stacking `vec`, the patch
//! block of the augmented attention is inverted by
//!
//! ```text
//! f⁻¹(A') = Cᵀ (P_w ⊗ P_hᵀ) A' (P_w ⊗ P_hᵀ)ᵀ C
//! ```
//!
//! where `C = C_{hw}` for rotations and the identity for flips. Library token
//! order is row-major, so the result is wrapped in the row-major ↔
//! column-major conversion `R_g = C_{hw}ᵀ` (`vec(X) = R_g · rowmajor(X)`).
//!
//! Everything is dense and cubic in the token count; this path exists as an
//! oracle for [`super::invert_attention_fast`].

use super::dense::Matrix;
use super::{GridShape, SpatialTransform};
use crate::error::{dim_err, AcrError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ORACLE_TOKEN_CAP: usize = 1024;

/// The factors of one transform on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationFactors {
    /// Row permutation of the (possibly transposed) feature map.
    pub p_h: Matrix,
    /// Column permutation of the (possibly transposed) feature map.
    pub p_w: Matrix,
    /// `Some(C_{hw})` for rotations, `None` for flips.
    pub commutation: Option<Matrix>,
}

pub fn permutation_factors(t: SpatialTransform, g: GridShape) -> Result<PermutationFactors> {
    let (h, w) = (g.h(), g.w());
    let (i_h, i_w, j_h, j_w) = (
        Matrix::identity(h),
        Matrix::identity(w),
        Matrix::reversal(h),
        Matrix::reversal(w),
    );
    let rot = || Some(Matrix::commutation(h, w));
    let (p_h, p_w, commutation) = match t {
        SpatialTransform::Identity => (i_h, i_w, None),
        SpatialTransform::FlipH => (i_h, j_w, None),
        SpatialTransform::FlipV => (j_h, i_w, None),
        SpatialTransform::FlipHV | SpatialTransform::Rot180 => (j_h, j_w, None),
        // X' = J_w Xᵀ (counter-clockwise quarter turn)
        SpatialTransform::Rot90 => (j_w, i_h, rot()),
        // X' = Xᵀ J_h
        SpatialTransform::Rot270 => (i_w, j_h, rot()),
        SpatialTransform::Resize(_) => {
            return Err(AcrError::UnsupportedTransform(
                "resize has no permutation factors".into(),
            ))
        }
    };
    Ok(PermutationFactors {
        p_h,
        p_w,
        commutation,
    })
}

/// Inverts the patch-to-patch block `a_prime_patch` (`n×n`, class token
/// stripped) of a view augmented by `t` from source grid `g`.
pub fn invert_attention_kronecker(
    a_prime_patch: &Tensor,
    t: SpatialTransform,
    g: GridShape,
) -> Result<Tensor> {
    invert_attention_kronecker_capped(a_prime_patch, t, g, DEFAULT_ORACLE_TOKEN_CAP)
}

pub fn invert_attention_kronecker_capped(
    a_prime_patch: &Tensor,
    t: SpatialTransform,
    g: GridShape,
    token_cap: usize,
) -> Result<Tensor> {
    let n = g.n();
    if n > token_cap {
        return Err(AcrError::Resource(format!(
            "dense inversion of {n} tokens exceeds the oracle cap of {token_cap}"
        )));
    }
    let factors = permutation_factors(t, g)?;
    let a_prime = Matrix::from_tensor(a_prime_patch)?;
    if a_prime.rows() != n || a_prime.cols() != n {
        return Err(dim_err!(
            "expected a {n}×{n} patch block, got {}×{}",
            a_prime.rows(),
            a_prime.cols()
        ));
    }
    let view = t.output_grid(g);

    let to_col_view = Matrix::commutation(view.h(), view.w()).transpose();
    let a_prime_col = to_col_view
        .matmul(&a_prime)?
        .matmul(&to_col_view.transpose())?;

    let m = factors.p_w.kron(&factors.p_h.transpose());
    let c = factors.commutation.unwrap_or_else(|| Matrix::identity(n));
    let a_col = c
        .transpose()
        .matmul(&m)?
        .matmul(&a_prime_col)?
        .matmul(&m.transpose())?
        .matmul(&c)?;

    let to_col_src = Matrix::commutation(g.h(), g.w()).transpose();
    to_col_src
        .transpose()
        .matmul(&a_col)?
        .matmul(&to_col_src)?
        .into_tensor()
}
