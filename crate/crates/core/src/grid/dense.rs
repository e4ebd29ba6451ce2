//! Small dense matrices used to build the explicit permutation, Kronecker and
//! commutation factors of the attention inversion.
//!
//! `vec` here is the column-stacking operator: for `H` of shape `l×m`,
//! `vec(H)[i + j*l] = H[i][j]`.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Anti-diagonal permutation that reverses index order.
    pub fn reversal(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, n - 1 - i, 1.0);
        }
        m
    }

    /// Commutation matrix `C_{lm}` with `C · vec(H) = vec(Hᵀ)` for every `l×m`
    /// matrix `H`.
    pub fn commutation(l: usize, m: usize) -> Self {
        let mut c = Self::zeros(l * m, l * m);
        for i in 0..l {
            for j in 0..m {
                c.set(j + i * m, i + j * l, 1.0);
            }
        }
        c
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Ok(Self {
            rows,
            cols,
            data: t.data().to_vec(),
        })
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        Tensor::matrix(self.rows, self.cols, self.data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(dim_err!(
                "dense matmul {}×{} by {}×{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                dst.iter_mut().zip(orow).for_each(|(d, b)| *d += a * b);
            }
        }
        Ok(out)
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Matrix) -> Self {
        let (p, q) = (other.rows, other.cols);
        let mut out = Self::zeros(self.rows * p, self.cols * q);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self.get(i, j);
                for k in 0..p {
                    for l in 0..q {
                        out.set(i * p + k, j * q + l, a * other.get(k, l));
                    }
                }
            }
        }
        out
    }

    /// Column-stacked vector of `self`, as an `(rows·cols)×1` matrix.
    pub fn vec(&self) -> Self {
        let mut v = Self::zeros(self.rows * self.cols, 1);
        for j in 0..self.cols {
            for i in 0..self.rows {
                v.data[i + j * self.rows] = self.get(i, j);
            }
        }
        v
    }

    /// True when every row and column holds exactly one 1 and zeros elsewhere.
    pub fn is_permutation(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let n = self.rows;
        let mut col_hits = vec![0usize; n];
        for r in 0..n {
            let mut hits = 0;
            for c in 0..n {
                match self.get(r, c) {
                    v if v == 1.0 => {
                        hits += 1;
                        col_hits[c] += 1;
                    }
                    v if v == 0.0 => {}
                    _ => return false,
                }
            }
            if hits != 1 {
                return false;
            }
        }
        col_hits.iter().all(|&h| h == 1)
    }
}
