//! Dense row-major matrices and the little linear algebra the crate needs.

use crate::error::{Result, SgnError};

/// Dense matrix with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(SgnError::invalid("matrix dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(SgnError::dim("matrix data length", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(SgnError::invalid("matrix needs at least one row"));
        }
        let cols = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(SgnError::dim(format!("row {i}"), cols, r.len()));
            }
        }
        let data = rows.iter().flatten().copied().collect();
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * x[c];
            }
            y[r] = acc;
        }
        y
    }

    /// y = Aᵀ x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for c in 0..self.cols {
                y[c] += row[c] * xr;
            }
        }
        y
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(SgnError::dim("matmul inner dimension", self.cols, other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= factor;
        }
        out
    }

    /// Max absolute entry (∞-norm over entries).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                if (self.get(r, c) - self.get(c, r)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Determinant via LU factorization with partial pivoting.
///
/// Row swaps flip the sign; a zero pivot short-circuits to 0.
pub fn lu_det(m: &Matrix) -> Result<f64> {
    if m.rows != m.cols {
        return Err(SgnError::dim("lu_det square input", m.rows, m.cols));
    }
    let n = m.rows;
    let mut a = m.data.clone();
    let mut det = 1.0;
    for col in 0..n {
        // Partial pivot: largest |entry| on or below the diagonal.
        let mut pivot_row = col;
        let mut pivot_abs = a[col * n + col].abs();
        for r in (col + 1)..n {
            let v = a[r * n + col].abs();
            if v > pivot_abs {
                pivot_abs = v;
                pivot_row = r;
            }
        }
        if pivot_abs == 0.0 {
            return Ok(0.0);
        }
        if pivot_row != col {
            for c in 0..n {
                a.swap(col * n + c, pivot_row * n + c);
            }
            det = -det;
        }
        let pivot = a[col * n + col];
        det *= pivot;
        for r in (col + 1)..n {
            let factor = a[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in (col + 1)..n {
                a[r * n + c] -= factor * a[col * n + c];
            }
            a[r * n + col] = 0.0;
        }
    }
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_relative_eq;

    #[test]
    fn det_identity_is_one() {
        assert_eq!(lu_det(&Matrix::identity(2)).unwrap(), 1.0);
    }

    #[test]
    fn det_rotation_block() {
        // Cofactor expansion by hand: 0*0 - 1*(-1) = 1.
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        assert_relative_eq!(lu_det(&m).unwrap(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn det_diagonal_product() {
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_relative_eq!(lu_det(&m).unwrap(), 6.0, max_relative = 1e-15);
    }

    #[test]
    fn det_rejects_non_square() {
        let m = Matrix::zeros(2, 3);
        assert!(lu_det(&m).is_err());
    }

    #[test]
    fn det_singular_is_zero() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(lu_det(&m).unwrap(), 0.0);
    }

    #[test]
    fn det_is_multiplicative_on_random_matrices() {
        // Well-conditioned 8x8: identity plus a small random perturbation.
        let mut rng = Rng::new(07121);
        for _ in 0..20 {
            let n = 8;
            let mut a = Matrix::identity(n);
            let mut b = Matrix::identity(n);
            for r in 0..n {
                for c in 0..n {
                    a.set(r, c, a.get(r, c) + 0.3 * rng.standard_normal());
                    b.set(r, c, b.get(r, c) + 0.3 * rng.standard_normal());
                }
            }
            let ab = a.matmul(&b).unwrap();
            let lhs = lu_det(&ab).unwrap();
            let rhs = lu_det(&a).unwrap() * lu_det(&b).unwrap();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
        }
    }

    #[test]
    fn matvec_t_matches_transpose() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let x = vec![1.0, -1.0];
        assert_eq!(m.matvec_t(&x), m.transpose().matvec(&x));
    }

    #[test]
    fn shape_validation() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
