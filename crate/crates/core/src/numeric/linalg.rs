use nalgebra::DMatrix;

use super::TensorError;

/// Row-major `f64` matrix used by the least-squares solvers.
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::Dimension(format!(
                "{rows}×{cols} matrix from {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
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
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::Dimension(format!(
                "{}×{} times {}×{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for p in 0..self.cols {
                let a = self.data[i * self.cols + p];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(p)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · self`
    pub fn gram(&self) -> Matrix {
        let d = self.cols;
        let mut g = Matrix::zeros(d, d);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..d {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                let g_row = &mut g.data[i * d..(i + 1) * d];
                for j in i..d {
                    g_row[j] += a * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                g.data[i * d + j] = g.data[j * d + i];
            }
        }
        g
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Which factorization produced a ridge solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RidgeMethod {
    /// Cholesky of `AᵀA + λI` (d ≤ n).
    CholeskyPrimal,
    /// Cholesky of `AAᵀ + λI` (d > n), `W = Aᵀ(AAᵀ + λI)⁻¹B`.
    CholeskyDual,
    /// Filtered SVD, used when the Gram matrix is numerically singular.
    Svd,
}

/// Minimizes `‖AW − B‖² + λ‖W‖²` and returns `W` (d×t).
///
/// At `λ = 0` with rank-deficient `A` the minimum-norm solution is returned.
/// Singular values are treated as zero below `max(n, d)·ε_f32` relative to the
/// largest one, since all inputs originate from `f32` storage.
pub fn ridge_solve(a: &Matrix, b: &Matrix, lambda: f64) -> Result<Matrix, TensorError> {
    ridge_solve_with_method(a, b, lambda).map(|(w, _)| w)
}

pub(crate) fn ridge_solve_with_method(
    a: &Matrix,
    b: &Matrix,
    lambda: f64,
) -> Result<(Matrix, RidgeMethod), TensorError> {
    let (n, d) = (a.rows, a.cols);
    if n == 0 || d == 0 {
        return Err(TensorError::Dimension("ridge_solve needs n ≥ 1 and d ≥ 1".into()));
    }
    if b.rows != n {
        return Err(TensorError::Dimension(format!("A has {n} rows but B has {}", b.rows)));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(TensorError::Contract(format!("lambda must be ≥ 0, got {lambda}")));
    }
    if a.data.iter().chain(&b.data).any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("ridge_solve inputs".into()));
    }
    let rcond = (n.max(d) as f64) * f32::EPSILON as f64;

    if d <= n {
        let mut gram = a.gram();
        add_diagonal(&mut gram, lambda);
        let rhs = a.transpose().matmul(b)?;
        if let Some(l) = cholesky(&gram, lambda, rcond) {
            return Ok((cholesky_solve(&l, &rhs), RidgeMethod::CholeskyPrimal));
        }
    } else {
        let mut gram = a.transpose().gram();
        add_diagonal(&mut gram, lambda);
        if let Some(l) = cholesky(&gram, lambda, rcond) {
            let alpha = cholesky_solve(&l, b);
            return Ok((a.transpose().matmul(&alpha)?, RidgeMethod::CholeskyDual));
        }
    }
    Ok((svd_solve(a, b, lambda, rcond)?, RidgeMethod::Svd))
}

fn add_diagonal(m: &mut Matrix, v: f64) {
    for i in 0..m.rows {
        m.data[i * m.cols + i] += v;
    }
}

/// Lower-triangular factor, or `None` when a pivot is too small for the
/// factorization to be trusted.
fn cholesky(g: &Matrix, lambda: f64, rcond: f64) -> Option<Matrix> {
    let n = g.rows;
    let max_diag = (0..n).map(|i| g.get(i, i)).fold(0.0f64, f64::max);
    if max_diag <= 0.0 {
        return None;
    }
    // With λ = 0 a tiny pivot means the Gram matrix is singular at working
    // precision; with λ > 0 only a non-positive pivot rejects.
    let floor = if lambda > 0.0 { 0.0 } else { rcond * rcond * max_diag };
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut s = g.get(j, j);
        for k in 0..j {
            s -= l.get(j, k) * l.get(j, k);
        }
        if s <= floor {
            return None;
        }
        let ljj = s.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = g.get(i, j);
            let (ri, rj) = (&l.data[i * n..i * n + j], &l.data[j * n..j * n + j]);
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            l.set(i, j, s / ljj);
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows;
    let t = b.cols;
    let mut x = b.clone();
    for c in 0..t {
        // forward substitution
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        // back substitution with Lᵀ
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

fn svd_solve(a: &Matrix, b: &Matrix, lambda: f64, rcond: f64) -> Result<Matrix, TensorError> {
    let svd = a.to_nalgebra().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(TensorError::Contract("SVD did not converge".into())),
    };
    let s = svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0f64, f64::max);
    let filter: Vec<f64> = s
        .iter()
        .map(|&si| {
            if lambda > 0.0 {
                si / (si * si + lambda)
            } else if si > rcond * s_max && si > 0.0 {
                1.0 / si
            } else {
                0.0
            }
        })
        .collect();
    let bn = b.to_nalgebra();
    let mut utb = u.transpose() * bn;
    for (r, f) in filter.iter().enumerate() {
        for c in 0..utb.ncols() {
            utb[(r, c)] *= f;
        }
    }
    let w = vt.transpose() * utb;
    let mut out = Matrix::zeros(w.nrows(), w.ncols());
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            out.set(i, j, w[(i, j)]);
        }
    }
    Ok(out)
}
