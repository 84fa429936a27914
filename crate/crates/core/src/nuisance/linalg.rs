//! Minimal dense linear algebra: row-major matrices and a Householder QR
//! least-squares solver. Design matrices here are tall and narrow (a handful
//! of columns), so nothing fancier is warranted.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            assert_eq!(row.len(), n_cols, "ragged matrix rows");
            data.extend(row);
        }
        Self {
            rows: n_rows,
            cols: n_cols,
            data,
        }
    }

    pub fn with_capacity(rows: usize, cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            data: Vec::with_capacity(rows * cols),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `min ||a x - b||_2` by Householder QR.
///
/// Errors with [`Error::RankDeficient`] when a diagonal entry of `R` is
/// negligible relative to the largest one.
#[allow(clippy::needless_range_loop)] // offset row indexing mirrors the factorization
pub fn least_squares(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.rows(), b.len(), "rhs length mismatch");
    let (n, p) = (a.rows(), a.cols());
    if n < p {
        return Err(Error::RankDeficient { pivot: n, cols: p });
    }
    let mut r = a.clone();
    let mut qtb = b.to_vec();
    let mut v = vec![0.0; n];

    for k in 0..p {
        // Householder vector for column k, rows k..n.
        let mut norm2 = 0.0;
        for i in k..n {
            let x = r.get(i, k);
            norm2 += x * x;
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            // Zero column; the rank check below reports it.
            r.set(k, k, 0.0);
            continue;
        }
        let akk = r.get(k, k);
        let alpha = if akk >= 0.0 { -norm } else { norm };
        v[k] = akk - alpha;
        let mut vtv = v[k] * v[k];
        for i in (k + 1)..n {
            v[i] = r.get(i, k);
            vtv += v[i] * v[i];
        }
        if vtv > 0.0 {
            // Apply H = I - 2 v v^T / (v^T v) to the remaining columns and rhs.
            for j in (k + 1)..p {
                let mut s = 0.0;
                for i in k..n {
                    s += v[i] * r.get(i, j);
                }
                let factor = 2.0 * s / vtv;
                for i in k..n {
                    let updated = r.get(i, j) - factor * v[i];
                    r.set(i, j, updated);
                }
            }
            let mut s = 0.0;
            for i in k..n {
                s += v[i] * qtb[i];
            }
            let factor = 2.0 * s / vtv;
            for i in k..n {
                qtb[i] -= factor * v[i];
            }
        }
        r.set(k, k, alpha);
        // The sub-diagonal of column k holds stale data; the back
        // substitution below only reads the upper triangle.
    }

    let max_diag = (0..p).map(|k| r.get(k, k).abs()).fold(0.0f64, f64::max);
    let tol = max_diag * (n.max(p) as f64) * f64::EPSILON;
    for k in 0..p {
        if r.get(k, k).abs() <= tol {
            return Err(Error::RankDeficient { pivot: k, cols: p });
        }
    }

    let mut x = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = qtb[k];
        for j in (k + 1)..p {
            s -= r.get(k, j) * x[j];
        }
        x[k] = s / r.get(k, k);
    }
    Ok(x)
}

/// Weighted least squares: scales rows of `a` and entries of `b` by
/// `sqrt(w_i)` and solves the resulting plain problem.
pub fn weighted_least_squares(a: &Matrix, b: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.rows(), w.len());
    let mut scaled = Matrix::with_capacity(a.rows(), a.cols());
    let mut rhs = Vec::with_capacity(b.len());
    let mut row = vec![0.0; a.cols()];
    for i in 0..a.rows() {
        let sw = w[i].sqrt();
        for (j, r) in row.iter_mut().enumerate() {
            *r = a.get(i, j) * sw;
        }
        scaled.push_row(&row);
        rhs.push(b[i] * sw);
    }
    least_squares(&scaled, &rhs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_exact_system() {
        // y = 1 + 2x on three points.
        let a = Matrix::from_rows(vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]]);
        let b = vec![1.0, 3.0, 5.0];
        let x = least_squares(&a, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn detects_rank_deficiency() {
        let a = Matrix::from_rows(vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]);
        let b = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            least_squares(&a, &b),
            Err(Error::RankDeficient { .. })
        ));
    }
}
