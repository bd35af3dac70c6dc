//! Dense row-major matrix, sized for the small covariance and rotation
//! factors that appear here (D rarely above 10). Finiteness is enforced at
//! construction so downstream code never has to re-check entries.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::arity("matrix data length", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("matrix entries must be finite"));
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
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::arity("matrix row length", c, row.len()));
            }
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols, "matrix index out of range");
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::domain("matrix entries must be finite"));
        }
        assert!(i < self.rows && j < self.cols, "matrix index out of range");
        self.data[i * self.cols + j] = v;
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::arity("matmul inner dimension", self.cols, other.rows));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        matmul_into(&self.data, n, k, &other.data, m, &mut out);
        Matrix::new(n, m, out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::arity("mul_vec length", self.cols, v.len()));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .map(|(&a, &b)| a * b)
                    .sum::<f64>()
            })
            .collect())
    }

    pub fn scale(&self, c: f64) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::arity(
                "matrix add size",
                self.rows * self.cols,
                other.rows * other.cols,
            ));
        }
        Matrix::new(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        )
    }

    /// Lower-triangular Cholesky factor of a symmetric positive-definite
    /// matrix. Symmetry is checked to a loose relative tolerance; a
    /// non-positive pivot reports which leading minor failed.
    pub fn cholesky(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::arity("cholesky: square matrix", self.rows, self.cols));
        }
        let n = self.rows;
        let scale = self.data.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.get(i, j) - self.get(j, i)).abs() > 1e-8 * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        "cholesky input not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::NotPositiveDefinite(format!(
                            "cholesky pivot {i} is {s:.3e}"
                        )));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Matrix::new(n, n, l)
    }

    /// Solves L x = b for lower-triangular L (forward substitution).
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        if self.rows != self.cols {
            return Err(Error::arity("solve_lower: square matrix", self.rows, self.cols));
        }
        if b.len() != self.rows {
            return Err(Error::arity("solve_lower rhs length", self.rows, b.len()));
        }
        let n = self.rows;
        let mut x = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= self.get(i, j) * x[j];
            }
            let d = self.get(i, i);
            if d == 0.0 {
                return Err(Error::NotPositiveDefinite(format!(
                    "solve_lower: zero diagonal at {i}"
                )));
            }
            x[i] = s / d;
        }
        Ok(x)
    }
}

/// out += a (n x k) * b (k x m); `out` must be zeroed by the caller.
pub(crate) fn matmul_into(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a^T (k x n -> n x k transposed view) * b (k x m).
pub(crate) fn matmul_tn_into(a: &[f64], k: usize, n: usize, b: &[f64], m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a (n x k) * b^T (m x k transposed view).
pub(crate) fn matmul_nt_into(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            orow[j] += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn construction_checks() {
        assert!(Matrix::new(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0, 2.0, f64::NAN, 4.0]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i3 = Matrix::identity(3);
        assert_eq!(a.matmul(&i3).unwrap(), a);
        assert!(a.matmul(&Matrix::identity(2)).is_err());
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        // M^T M + I is SPD for any M; reconstruction residual stays tiny.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 5;
            let m = Matrix::new(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let spd = m
                .transpose()
                .matmul(&m)
                .unwrap()
                .add(&Matrix::identity(n))
                .unwrap();
            let l = spd.cholesky().unwrap();
            let back = l.matmul(&l.transpose()).unwrap();
            let err = spd
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-10, "reconstruction error {err}");
            for i in 0..n {
                for j in (i + 1)..n {
                    assert_eq!(l.get(i, j), 0.0);
                }
                assert!(l.get(i, i) > 0.0);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(m.cholesky(), Err(Error::NotPositiveDefinite(_))));
        let asym = Matrix::new(2, 2, vec![1.0, 0.5, -0.5, 1.0]).unwrap();
        assert!(asym.cholesky().is_err());
    }

    #[test]
    fn solve_lower_round_trip() {
        let l = Matrix::new(2, 2, vec![2.0, 0.0, 1.0, 3.0]).unwrap();
        let x = l.solve_lower(&[4.0, 11.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14 && (x[1] - 3.0).abs() < 1e-14);
    }
}
