//! Dense matrix-multiply kernel shared by forward and backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// `out = op(a) * op(b) + beta * out` where `op` optionally transposes.
///
/// `a` is stored as `a_rows x a_cols` (before transposition) and likewise for
/// `b`. `out` must be sized for the product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    beta: f64,
    out: &mut [f64],
) {
    let av = ArrayView2::from_shape((a_rows, a_cols), a).expect("lhs buffer matches shape");
    let bv = ArrayView2::from_shape((b_rows, b_cols), b).expect("rhs buffer matches shape");
    let av = if trans_a { av.reversed_axes() } else { av };
    let bv = if trans_b { bv.reversed_axes() } else { bv };
    let (m, n) = (av.nrows(), bv.ncols());
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("output buffer matches shape");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}
