//! Small dense linear algebra: row-major matrices, Cholesky, Gaussian densities.
//!
//! Problem sizes here are tiny (regional GP systems, Kalman states, feature
//! weight posteriors), so a straightforward `Vec<f64>` implementation is
//! preferred over pulling in a matrix library.

use crate::error::Error;
use crate::numeric::LN_2PI;
use crate::Result;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        y
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Cholesky {
    pub l: Mat,
}

impl Cholesky {
    /// Plain decomposition; fails on non-positive pivots.
    pub fn new(a: &Mat) -> Result<Self> {
        assert_eq!(a.rows, a.cols);
        let n = a.rows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::Numerical(format!(
                            "cholesky pivot {s:.3e} at row {i}"
                        )));
                    }
                    l[(i, j)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Ok(Cholesky { l })
    }

    /// Decomposition with escalating diagonal jitter, used for GP gram
    /// matrices that are PSD up to rounding. Jitter starts at
    /// `1e-12 * trace/n` and escalates tenfold up to `max_jitter * trace/n`.
    pub fn with_jitter(a: &Mat, max_jitter: f64) -> Result<(Self, f64)> {
        if let Ok(c) = Cholesky::new(a) {
            return Ok((c, 0.0));
        }
        let n = a.rows;
        let scale = (0..n).map(|i| a[(i, i)]).sum::<f64>().max(1e-300) / n as f64;
        let mut jitter = 1e-12;
        while jitter <= max_jitter {
            let mut aj = a.clone();
            for i in 0..n {
                aj[(i, i)] += jitter * scale;
            }
            if let Ok(c) = Cholesky::new(&aj) {
                return Ok((c, jitter * scale));
            }
            jitter *= 10.0;
        }
        Err(Error::Numerical(format!(
            "cholesky failed after jitter escalation to {max_jitter:.1e}"
        )))
    }

    pub fn n(&self) -> usize {
        self.l.rows
    }

    /// Solve L y = b.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(b.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    /// Solve A x = b with A = L L^T.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        let y = self.solve_lower(b);
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// log det(A) = 2 sum log L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.n()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Full inverse of A; used for small weight-space posteriors.
    pub fn inverse(&self) -> Mat {
        let n = self.n();
        let mut inv = Mat::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

/// Log-density of a multivariate normal N(x; mean, cov).
pub fn mvn_log_pdf(x: &[f64], mean: &[f64], cov: &Mat) -> Result<f64> {
    let n = x.len();
    assert_eq!(mean.len(), n);
    assert_eq!(cov.rows, n);
    let (chol, _) = Cholesky::with_jitter(cov, 1e-8)?;
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let y = chol.solve_lower(&diff);
    let quad: f64 = y.iter().map(|v| v * v).sum();
    Ok(-0.5 * (n as f64 * LN_2PI + chol.log_det() + quad))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
