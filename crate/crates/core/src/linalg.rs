//! Dense real linear algebra.
//!
//! [`Matrix`] is the single value type used for weights, adapter factors,
//! activations and sample batches. Storage is row-major `f64`; products go
//! through `matrixmultiply`'s blocked kernels, with transposed operands
//! expressed as strides rather than copies.
//!
//! The thin SVD is a one-sided (Hestenes) Jacobi iteration, which keeps
//! full relative accuracy on the small matrices this crate works with and
//! produces exactly orthonormal factors up to rounding.

use std::fmt;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = self.row(i);
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:+.4e}")).collect();
            let ellipsis = if self.cols > 8 { ", ..." } else { "" };
            writeln!(f, "  [{}{}]", shown.join(", "), ellipsis)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
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

    /// Square diagonal matrix with `diag` on the main diagonal.
    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major data. Rejects a length mismatch and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite entry at flat index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Convenience constructor for literals. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
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

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

    /// `self · other`. Panics if the inner dimensions disagree; see [`Matrix::try_matmul`].
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        gemm(self, false, other, false)
    }

    pub fn try_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::domain(format!(
                "matmul shape mismatch: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self.matmul(other))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        gemm(self, true, other, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        gemm(self, false, other, true)
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn try_add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        Ok(self.add(other))
    }

    pub fn try_sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(self.sub(other))
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if let Some(bad) = parts.iter().find(|m| m.cols != cols) {
            return Err(Error::domain(format!(
                "vstack column mismatch: {} vs {}",
                bad.cols, cols
            )));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn select_rows(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.rows);
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn select_cols(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.cols);
        Matrix::from_fn(self.rows, range.len(), |i, j| self.get(i, range.start + j))
    }

    /// Multiplies column `j` by `factors[j]` (right-multiplication by a diagonal).
    pub fn scale_cols(&self, factors: &[f64]) -> Matrix {
        assert_eq!(factors.len(), self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, f) in out.row_mut(i).iter_mut().zip(factors) {
                *v *= f;
            }
        }
        out
    }

    /// Multiplies row `i` by `factors[i]` (left-multiplication by a diagonal).
    pub fn scale_rows(&self, factors: &[f64]) -> Matrix {
        assert_eq!(factors.len(), self.rows);
        let mut out = self.clone();
        for (i, f) in factors.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        out
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(
            self.shape(),
            other.shape(),
            "elementwise shape mismatch: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::domain(format!(
                "{op} shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool) -> Matrix {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `c` exactly,
    // and all three buffers are live and correctly sized for the (m, k, n) product.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Thin singular value decomposition `W = U · diag(S) · Vt`, with `k = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_cols(&self.s).matmul(&self.vt)
    }
}

/// Thin SVD by one-sided Jacobi rotations.
///
/// Converges when a full sweep applies no rotation, i.e. every column pair
/// satisfies `|g_p·g_q| ≤ n·ε·‖g_p‖‖g_q‖`. Fails with
/// [`Error::Decomposition`] after `100·min(rows, cols)` sweeps.
pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    if w.rows == 0 || w.cols == 0 {
        return Err(Error::domain("svd of an empty matrix"));
    }
    if !w.is_finite() {
        return Err(Error::Decomposition("input contains non-finite entries".into()));
    }
    if w.rows >= w.cols {
        jacobi_tall(w)
    } else {
        let f = jacobi_tall(&w.transpose())?;
        Ok(SvdFactors {
            u: f.vt.transpose(),
            s: f.s,
            vt: f.u.transpose(),
        })
    }
}

fn jacobi_tall(w: &Matrix) -> Result<SvdFactors> {
    let (n, m) = w.shape();
    // Column-major working copies: g[j] is column j of W·V, v[j] is column j of V.
    let mut g: Vec<Vec<f64>> = (0..m).map(|j| w.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * n as f64;
    let max_sweeps = 100 * m;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..m {
            for q in (p + 1)..m {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Decomposition(format!(
            "one-sided Jacobi did not converge within {max_sweeps} sweeps"
        )));
    }

    let sigma: Vec<f64> = g.iter().map(|col| dot(col, col).sqrt()).collect();
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(Error::Decomposition("non-finite singular value".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let sigma_max = sigma[order[0]];
    let negligible = sigma_max * f64::EPSILON * (n.max(m) as f64);
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(m);
    let mut s_sorted = Vec::with_capacity(m);
    let mut vt = Matrix::zeros(m, m);
    for (k, &j) in order.iter().enumerate() {
        let s = sigma[j];
        if s > negligible && s > 0.0 {
            u_cols.push(Some(g[j].iter().map(|x| x / s).collect()));
        } else {
            u_cols.push(None);
        }
        s_sorted.push(s);
        vt.row_mut(k).copy_from_slice(&v[j]);
    }
    // Rank-deficient input: complete U with an orthonormal basis for the
    // complement so the factor invariants hold regardless of rank.
    complete_orthonormal(&mut u_cols, n);

    let mut u = Matrix::zeros(n, m);
    for (k, col) in u_cols.into_iter().enumerate() {
        let col = col.expect("completed above");
        for (i, &v) in col.iter().enumerate() {
            u.set(i, k, v);
        }
    }
    Ok(SvdFactors { u, s: s_sorted, vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], n: usize) {
    for k in 0..cols.len() {
        if cols[k].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for i in 0..n {
            let mut cand = vec![0.0; n];
            cand[i] = 1.0;
            // Two Gram-Schmidt passes against every column fixed so far.
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let proj = dot(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= proj * o;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("n >= 1");
        cols[k] = Some(cand.into_iter().map(|x| x / norm).collect());
    }
}

/// Seeded generator used everywhere in the crate: ChaCha8 keyed through
/// `SeedableRng::seed_from_u64`, which is specified bit-for-bit by `rand_core`
/// and therefore reproducible across platforms.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under the same key as [`seeded_rng`].
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n × m` matrix of i.i.d. `N(0, variance)` entries, filled row-major from
/// [`seeded_rng`]`(seed)`.
pub fn random_gaussian(n: usize, m: usize, variance: f64, seed: u64) -> Result<Matrix> {
    if n == 0 || m == 0 {
        return Err(Error::domain("random_gaussian needs positive dimensions"));
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::domain(format!("variance must be positive, got {variance}")));
    }
    let mut rng = seeded_rng(seed);
    Ok(gaussian_from(&mut rng, n, m, variance.sqrt()))
}

pub(crate) fn gaussian_from(rng: &mut ChaCha8Rng, n: usize, m: usize, std: f64) -> Matrix {
    let data = (0..n * m)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Matrix { rows: n, cols: m, data }
}

/// Smallest `k` whose leading singular values sum to at least
/// `fraction` of the total. Ties resolve to the first index that reaches
/// the threshold.
pub fn effective_rank(s: &[f64], fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::domain(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if s.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::domain("singular values must be finite and non-negative"));
    }
    if s.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::domain("singular values must be sorted non-increasing"));
    }
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return Err(Error::UndefinedRank);
    }
    let threshold = fraction * total;
    let mut acc = 0.0;
    for (k, &v) in s.iter().enumerate() {
        acc += v;
        if acc >= threshold {
            return Ok(k + 1);
        }
    }
    // Only reachable through rounding when fraction == 1; the running sum and
    // the total are accumulated in the same order, so this is the last positive entry.
    Ok(s.iter().rposition(|&v| v > 0.0).map_or(s.len(), |p| p + 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrthoMode {
    /// ‖AAᵀ − I‖²_F
    Rows,
    /// ‖AᵀA − I‖²_F
    Cols,
}

/// Squared Frobenius distance of the row or column Gram matrix from identity.
pub fn orthogonality_error(a: &Matrix, mode: OrthoMode) -> f64 {
    let gram = match mode {
        OrthoMode::Rows => a.matmul_t(a),
        OrthoMode::Cols => a.t_matmul(a),
    };
    let n = gram.rows();
    let mut err = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            let d = gram.get(i, j) - target;
            err += d * d;
        }
    }
    err
}
