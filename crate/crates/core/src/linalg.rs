//! Small dense linear algebra for design matrices with a handful of columns.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Input(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rows selected by `idx`, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `X b` for a coefficient vector of length `cols`.
    pub fn mul_vec(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), b)).collect()
    }

    /// `X' v` for a vector of length `rows`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x * vi;
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least squares by Householder QR, processing columns in their given order.
///
/// A column whose norm after removing its projection on the earlier columns
/// falls below `1e-10` times its original norm is reported as rank deficient.
/// `names` labels columns in that error.
pub fn lstsq(x: &Matrix, y: &[f64], names: &[String]) -> Result<Vec<f64>> {
    let (n, p) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::Input(format!(
            "response has length {}, design has {n} rows",
            y.len()
        )));
    }
    if n < p {
        return Err(Error::Input(format!("design has {n} rows but {p} columns")));
    }
    // Column-major working copy.
    let mut a: Vec<Vec<f64>> = (0..p).map(|j| x.column(j)).collect();
    let mut qty = y.to_vec();
    let col_norms: Vec<f64> = a.iter().map(|c| norm(c)).collect();
    let mut diag = vec![0.0; p];

    for k in 0..p {
        let tail_norm = norm(&a[k][k..]);
        let name = names.get(k).cloned().unwrap_or_else(|| format!("x{k}"));
        if col_norms[k] == 0.0 || tail_norm <= 1e-10 * col_norms[k] {
            return Err(Error::RankDeficient { column: k, name });
        }
        let alpha = if a[k][k] > 0.0 { -tail_norm } else { tail_norm };
        // v = a_k[k..] - alpha e_1, stored in place.
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        diag[k] = alpha;
        a[k][k] = alpha;
        for e in a[k][k + 1..].iter_mut() {
            *e = 0.0;
        }
        if vnorm2 == 0.0 {
            continue;
        }
        for col in a.iter_mut().skip(k + 1) {
            let s = 2.0 * dot(&v, &col[k..]) / vnorm2;
            for (c, vi) in col[k..].iter_mut().zip(&v) {
                *c -= s * vi;
            }
        }
        let s = 2.0 * dot(&v, &qty[k..]) / vnorm2;
        for (c, vi) in qty[k..].iter_mut().zip(&v) {
            *c -= s * vi;
        }
    }

    // Back substitution on R b = Q'y.
    let mut b = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = qty[k];
        for j in k + 1..p {
            s -= a[j][k] * b[j];
        }
        b[k] = s / diag[k];
    }
    Ok(b)
}

fn norm(v: &[f64]) -> f64 {
    // Scaled to avoid overflow on large inputs.
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    scale * v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt()
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, `p x p`).
/// Returns `None` if `A` is not numerically positive definite.
pub fn cholesky_solve(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let p = b.len();
    debug_assert_eq!(a.len(), p * p);
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * p + k] * z[k];
        }
        z[i] = s / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in i + 1..p {
            s -= l[k * p + i] * x[k];
        }
        x[i] = s / l[i * p + i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("c{j}")).collect()
    }

    #[test]
    fn exact_affine_fit() {
        let x = Matrix::from_rows(&[
            [1.0, 0.0, 2.0],
            [1.0, 1.0, -1.0],
            [1.0, 2.0, 0.5],
            [1.0, 3.0, 4.0],
            [1.0, -1.0, 1.0],
        ])
        .unwrap();
        let truth = [0.5, -2.0, 3.0];
        let y = x.mul_vec(&truth);
        let b = lstsq(&x, &y, &names(3)).unwrap();
        for (bi, ti) in b.iter().zip(truth) {
            assert!((bi - ti).abs() < 1e-12);
        }
    }

    #[test]
    fn dependent_column_is_named() {
        let x = Matrix::from_rows(&[[1.0, 1.0, 2.0], [1.0, 2.0, 4.0], [1.0, 3.0, 6.0], [1.0, 5.0, 10.0]]).unwrap();
        match lstsq(&x, &[1.0, 2.0, 3.0, 4.0], &names(3)) {
            Err(Error::RankDeficient { column, name }) => {
                assert_eq!(column, 2);
                assert_eq!(name, "c2");
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_matches_hand_solution() {
        // [[4,2],[2,3]] x = [2,1] -> x = [0.5, 0]
        let x = cholesky_solve(&[4.0, 2.0, 2.0, 3.0], &[2.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && x[1].abs() < 1e-15);
        assert!(cholesky_solve(&[1.0, 2.0, 2.0, 1.0], &[1.0, 1.0]).is_none());
    }
}
