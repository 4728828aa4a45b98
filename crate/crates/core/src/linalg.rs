//! Dense row-major matrices, temperature softmax, one-sided Jacobi SVD and a
//! central-difference gradient oracle.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major `rows × cols` matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) ", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{:?}, ...]", &self.data[..8])
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose rows are the given slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("Matrix::from_rows row {i}"), cols, r.len()));
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Same values, new shape. Fails when the element count differs.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, self.data)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `softmax(logits / tau)`.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::domain(format!("temperature must be positive, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("softmax input contains non-finite values"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_temp_into(logits, tau, &mut out);
    Ok(out)
}

/// Unchecked kernel behind [`softmax_temp`]; inputs must already be valid.
pub(crate) fn softmax_temp_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log softmax(logits / tau)`, computed through log-sum-exp.
pub(crate) fn log_softmax_temp(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| ((z - max) / tau).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| (z - max) / tau - lse).collect()
}

/// Thin singular value decomposition `G = U · diag(sigma) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `P × Q`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `Q × Q`, orthogonal.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let (p, q) = (self.u.rows(), self.u.cols());
        let mut out = Matrix::zeros(p, self.v.rows());
        for i in 0..p {
            for k in 0..q {
                let us = self.u.get(i, k) * self.sigma[k];
                if us == 0.0 {
                    continue;
                }
                for j in 0..self.v.rows() {
                    out.data[i * out.cols + j] += us * self.v.get(j, k);
                }
            }
        }
        out
    }
}

/// Best-effort factors from a Jacobi run that exhausted its sweep budget.
#[derive(Debug, Clone)]
pub struct SvdFailure {
    pub best: Svd,
    /// `‖U·diag(σ)·Vᵀ − G‖_F / ‖G‖_F` of the best-effort factors.
    pub residual: f64,
    pub sweeps: usize,
}

impl fmt::Display for SvdFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SVD did not converge after {} sweeps (relative residual {:.3e})",
            self.sweeps, self.residual
        )
    }
}

impl std::error::Error for SvdFailure {}

#[derive(Debug, Clone, Copy)]
pub struct SvdOptions {
    pub max_sweeps: usize,
    /// A column pair counts as orthogonal once `|aᵢ·aⱼ| ≤ tol·‖aᵢ‖‖aⱼ‖`.
    pub tol: f64,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 60,
            tol: 1e-12,
        }
    }
}

pub fn thin_svd(g: &Matrix) -> Result<Svd> {
    thin_svd_with(g, SvdOptions::default())
}

/// One-sided (Hestenes) Jacobi SVD. Requires `rows ≥ cols`.
pub fn thin_svd_with(g: &Matrix, opts: SvdOptions) -> Result<Svd> {
    let (p, q) = (g.rows(), g.cols());
    if p < q {
        return Err(Error::domain(format!(
            "thin_svd requires rows >= cols, got {p}x{q}; transpose first"
        )));
    }
    if !g.is_finite() {
        return Err(Error::domain("thin_svd input contains non-finite values"));
    }

    // Column-major working copies so rotations touch contiguous memory.
    let mut a: Vec<Vec<f64>> = (0..q).map(|j| (0..p).map(|i| g.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut c = vec![0.0; q];
            c[j] = 1.0;
            c
        })
        .collect();

    // Columns below this norm are numerically zero: they sit at the rounding
    // level of the larger columns and cannot be orthogonalized further.
    let negligible = 4.0 * f64::EPSILON * g.frobenius_norm();
    let negligible_sq = negligible * negligible;

    let mut converged = q < 2;
    let mut sweeps = 0;
    while !converged && sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut rotated = false;
        for i in 0..q - 1 {
            for j in i + 1..q {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (&a[i], &a[j]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (&x, &y) in ci.iter().zip(cj) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if alpha <= negligible_sq || beta <= negligible_sq || gamma.abs() <= opts.tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        converged = !rotated;
    }

    let svd = assemble(&a, &v, p, q, negligible);
    if converged {
        Ok(svd)
    } else {
        let norm = g.frobenius_norm();
        let resid = svd.reconstruct().sub(g)?.frobenius_norm();
        let residual = if norm > 0.0 { resid / norm } else { resid };
        Err(Error::SvdNonConvergence(Box::new(SvdFailure {
            best: svd,
            residual,
            sweeps,
        })))
    }
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Normalizes the rotated columns into `U`, sorts by singular value and
/// completes `U` with orthonormal vectors where a column vanished.
fn assemble(a: &[Vec<f64>], v: &[Vec<f64>], p: usize, q: usize, negligible: f64) -> Svd {
    let norms: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut missing = Vec::new();
    for (k, &src) in order.iter().enumerate() {
        let n = norms[src];
        if n > negligible && n > 0.0 {
            u_cols.push(a[src].iter().map(|x| x / n).collect());
        } else {
            u_cols.push(vec![0.0; p]);
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u_cols, &missing, p);

    let sigma: Vec<f64> = order
        .iter()
        .map(|&src| if norms[src] > negligible { norms[src] } else { 0.0 })
        .collect();
    let u = Matrix::from_fn(p, q, |i, k| u_cols[k][i]);
    let vm = Matrix::from_fn(q, q, |i, k| v[order[k]][i]);
    Svd { u, sigma, v: vm }
}

fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], p: usize) {
    let mut candidate = 0usize;
    for &k in missing {
        while candidate < p {
            let mut e = vec![0.0; p];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of modified Gram-Schmidt against every filled column.
            for _ in 0..2 {
                for (idx, c) in cols.iter().enumerate() {
                    if idx == k || (missing.contains(&idx) && c.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let d: f64 = c.iter().zip(&e).map(|(a, b)| a * b).sum();
                    for (x, &y) in e.iter_mut().zip(c) {
                        *x -= d * y;
                    }
                }
            }
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.5 {
                cols[k] = e.into_iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + h;
        let fp = f(&probe);
        probe.data[idx] = orig - h;
        let fm = f(&probe);
        probe.data[idx] = orig;
        grad.data[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}
