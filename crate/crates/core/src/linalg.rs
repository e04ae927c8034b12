//! Dense row-major `f64` matrices and a one-sided Jacobi SVD.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Singular values below `RANK_TOL · σ₁` count as zero.
pub const RANK_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("SVD did not converge after {0} sweeps")]
    Convergence(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("system is rank deficient: rank {rank} < {needed}")]
    RankDeficient { rank: usize, needed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!("{} entries for {rows}x{cols}", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinalgError::Shape("ragged rows".into()));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ x` without materializing the transpose.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t dimension");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * xi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_row_l1(&self) -> f64 {
        (0..self.rows).map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Columns `0..k` as an `rows × k` matrix.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k, |i, j| self[(i, j)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖A - B‖_F / ‖B‖_F` (absolute error when `B = 0`).
pub fn relative_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let err = a.sub(b).frobenius_norm();
    let base = b.frobenius_norm();
    if base == 0.0 {
        err
    } else {
        err / base
    }
}

/// Thin SVD `A = U diag(σ) Vᵀ` with `p = min(m, n)` components.
///
/// σ is descending; equal values keep ascending original column order. Each
/// `u_j` has its largest-magnitude entry positive (first one on ties), and the
/// matching `v_j` is flipped with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// Numerical rank under [`RANK_TOL`].
    pub fn rank(&self) -> usize {
        let s1 = self.sigma.first().copied().unwrap_or(0.0);
        if s1 == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > RANK_TOL * s1).count()
    }

    pub fn reconstruct(&self) -> Matrix {
        let p = self.sigma.len();
        let us = Matrix::from_fn(self.u.rows(), p, |i, j| self.u[(i, j)] * self.sigma[j]);
        us.matmul(&self.v.transpose())
    }
}

pub fn svd(a: &Matrix) -> Result<Svd, LinalgError> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if a.rows >= a.cols {
        svd_tall(a)
    } else {
        let t = svd_tall(&a.transpose())?;
        let mut out = Svd { u: t.v, sigma: t.sigma, v: t.u };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// Hestenes one-sided Jacobi on the columns of a tall matrix.
fn svd_tall(a: &Matrix) -> Result<Svd, LinalgError> {
    let (m, n) = (a.rows, a.cols);
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let eps = f64::EPSILON;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a2 = 0.0;
                    let mut b2 = 0.0;
                    let mut g = 0.0;
                    for i in 0..m {
                        a2 += cp[i] * cp[i];
                        b2 += cq[i] * cq[i];
                        g += cp[i] * cq[i];
                    }
                    (a2, b2, g)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = vcols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::Convergence(MAX_SWEEPS));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal values keep ascending index
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let s1 = sigma.first().copied().unwrap_or(0.0);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if s1 > 0.0 && norms[j] > RANK_TOL * s1 {
            u_cols.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(Vec::new());
            missing.push(slot);
        }
    }
    complete_basis(&mut u_cols, &missing, m);

    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let v = Matrix::from_fn(n, n, |i, j| vcols[order[j]][i]);
    let mut out = Svd { u, sigma, v };
    fix_signs(&mut out);
    Ok(out)
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the empty slots with unit vectors orthogonal to all filled ones,
/// choosing each time the standard basis vector with the largest residual.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    for &slot in missing {
        let basis: Vec<&Vec<f64>> = cols.iter().filter(|c| !c.is_empty()).collect();
        let mut best = 0;
        let mut best_res = f64::NEG_INFINITY;
        for i in 0..m {
            let res = 1.0 - basis.iter().map(|b| b[i] * b[i]).sum::<f64>();
            if res > best_res + 1e-14 {
                best_res = res;
                best = i;
            }
        }
        let mut v = vec![0.0; m];
        v[best] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b.iter()) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        cols[slot] = v;
    }
}

fn fix_signs(s: &mut Svd) {
    for j in 0..s.sigma.len() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..s.u.rows() {
            let x = s.u[(i, j)];
            if x.abs() > best.abs() + 1e-14 {
                best = x;
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..s.u.rows() {
                s.u[(i, j)] = -s.u[(i, j)];
            }
            for i in 0..s.v.rows() {
                s.v[(i, j)] = -s.v[(i, j)];
            }
        }
    }
}

/// Minimum-norm solution of `A X = B` through the SVD pseudo-inverse.
/// Requires `A` to have full column rank.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.rows != b.rows {
        return Err(LinalgError::Shape(format!("lstsq: {} vs {} rows", a.rows, b.rows)));
    }
    if a.rows < a.cols {
        return Err(LinalgError::RankDeficient { rank: a.rows, needed: a.cols });
    }
    let s = svd(a)?;
    let rank = s.rank();
    if rank < a.cols {
        return Err(LinalgError::RankDeficient { rank, needed: a.cols });
    }
    // X = V Σ⁻¹ Uᵀ B
    let utb = s.u.transpose().matmul(b);
    let scaled = Matrix::from_fn(utb.rows(), utb.cols(), |i, j| utb[(i, j)] / s.sigma[i]);
    Ok(s.v.matmul(&scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn gram_err(q: &Matrix) -> f64 {
        let g = q.transpose().matmul(q);
        g.sub(&Matrix::identity(q.cols())).max_abs()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0, 1.0]);
        // ties keep original order
        assert_eq!(s.u, Matrix::identity(3));
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [2.0, 0.0, 0.0];
        let v = [0.0, 3.0, 0.0];
        let w = Matrix::from_fn(3, 3, |i, j| u[i] * v[j]);
        let s = svd(&w).unwrap();
        assert!((s.sigma[0] - 6.0).abs() < 1e-12);
        assert!(s.sigma[1].abs() < 1e-12 && s.sigma[2].abs() < 1e-12);
        assert_eq!(s.rank(), 1);
        assert!(gram_err(&s.u) < 1e-12);
    }

    #[test]
    fn reconstructs_rectangular() {
        for (m, n, seed) in [(50, 30, 1), (30, 50, 2), (1, 7, 3), (7, 1, 4)] {
            let w = random(m, n, seed);
            let s = svd(&w).unwrap();
            assert!(relative_frobenius(&s.reconstruct(), &w) < 1e-12, "{m}x{n}");
            assert!(gram_err(&s.u) < 1e-10);
            assert!(gram_err(&s.v) < 1e-10);
            assert!(s.sigma.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn rank_deficient_basis_is_completed() {
        let a = random(6, 2, 9);
        let w = a.matmul(&random(2, 6, 10));
        let s = svd(&w).unwrap();
        assert_eq!(s.rank(), 2);
        assert!(gram_err(&s.u) < 1e-10);
    }

    #[test]
    fn sign_convention() {
        let s = svd(&random(8, 5, 4)).unwrap();
        for j in 0..5 {
            let col = s.u.column(j);
            let max = col.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut w = Matrix::identity(2);
        w[(0, 1)] = f64::NAN;
        assert_eq!(svd(&w), Err(LinalgError::NonFinite));
    }

    #[test]
    fn lstsq_recovers_exact_system() {
        let a = random(20, 5, 11);
        let x = random(5, 3, 12);
        let b = a.matmul(&x);
        let got = lstsq(&a, &b).unwrap();
        assert!(relative_frobenius(&got, &x) < 1e-12);
        assert!(matches!(lstsq(&random(3, 5, 1), &random(3, 1, 2)), Err(LinalgError::RankDeficient { .. })));
    }
}
