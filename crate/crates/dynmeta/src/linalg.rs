//! Small dense f64 linear algebra: symmetric eigendecomposition (cyclic
//! Jacobi) and thin SVD via the Gram matrix. Dimensions here are activation
//! widths (d <= 256), so O(d^3) routines are fine.

use crate::error::{Error, Result};

/// Row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Argument("matrix needs at least one row".into()));
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Mat {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Subtract each column's mean from that column.
    pub fn center_columns(&self) -> Mat {
        let mut out = self.clone();
        for j in 0..self.cols {
            let mut mean = 0.0;
            for i in 0..self.rows {
                mean += self.at(i, j);
            }
            mean /= self.rows as f64;
            for i in 0..self.rows {
                let v = out.at(i, j) - mean;
                out.set(i, j, v);
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors-as-columns), sorted descending.
pub fn eigh(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    if a.rows != a.cols {
        return Err(Error::Shape("eigh needs a square matrix".into()));
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let scale = a.frobenius().max(f64::MIN_POSITIVE);

    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.at(i, j) * m.at(i, j);
            }
        }
        if (2.0 * off).sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rotate rows/cols p and q
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eig: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (newj, &oldj) in order.iter().enumerate() {
        for i in 0..n {
            vectors.set(i, newj, v.at(i, oldj));
        }
    }
    Ok((values, vectors))
}

/// Thin SVD of an n x d matrix with n >= d, via eigendecomposition of the
/// d x d Gram matrix. Returns (U, sigma, V) with sigma descending;
/// A = U diag(sigma) V^T. Columns of U beyond the numerical rank are zero.
pub fn thin_svd(a: &Mat) -> Result<(Mat, Vec<f64>, Mat)> {
    if a.rows < a.cols {
        return Err(Error::Shape(format!(
            "thin_svd wants n >= d, got {}x{}",
            a.rows, a.cols
        )));
    }
    let gram = a.transpose().matmul(a)?;
    let (lam, v) = eigh(&gram)?;
    let sigma: Vec<f64> = lam.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // U = A V Σ⁻¹, zero where σ vanishes
    let av = a.matmul(&v)?;
    let mut u = Mat::zeros(a.rows, a.cols);
    let tol = sigma.first().copied().unwrap_or(0.0) * 1e-12;
    for j in 0..a.cols {
        if sigma[j] > tol {
            for i in 0..a.rows {
                u.set(i, j, av.at(i, j) / sigma[j]);
            }
        }
    }
    Ok((u, sigma, v))
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn inv_sqrt_spd(a: &Mat) -> Result<Mat> {
    let (lam, v) = eigh(a)?;
    if lam.iter().any(|&l| l <= 0.0) {
        return Err(Error::Degenerate(
            "matrix is not positive definite".into(),
        ));
    }
    let n = a.rows;
    // V diag(1/sqrt(λ)) V^T
    let mut scaled = v.clone();
    for j in 0..n {
        let f = 1.0 / lam[j].sqrt();
        for i in 0..n {
            let val = scaled.at(i, j) * f;
            scaled.set(i, j, val);
        }
    }
    scaled.matmul(&v.transpose())
}

/// Singular values of a general (small) matrix, descending.
pub fn singular_values(a: &Mat) -> Result<Vec<f64>> {
    // eigenvalues of the smaller Gram matrix
    let gram = if a.rows >= a.cols {
        a.transpose().matmul(a)?
    } else {
        a.matmul(&a.transpose())?
    };
    let (lam, _) = eigh(&gram)?;
    Ok(lam.iter().map(|&l| l.max(0.0).sqrt()).collect())
}
