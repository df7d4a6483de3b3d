//! Dense real matrix kernel: SVD, principal subspaces, and the generalized
//! cosine similarity between subspaces that every progress measure depends on.
//!
//! All operations are pure functions on immutable inputs and are safe to call
//! concurrently. Everything is `f64`; matrices at play here are small
//! (circuit matrices are `d × d` with `d ≤ 4096`).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid rank {r}: must satisfy 1 <= r <= {max}")]
    InvalidRank { r: usize, max: usize },
    #[error("columns are not orthonormal within tolerance {tol}")]
    NotOrthonormal { tol: f64 },
}

/// Orthonormality tolerance enforced by [`OrthonormalBasis::new`].
pub const ORTHO_TOL: f64 = 1e-8;
/// Spectrum-gap tolerance below which a truncation is flagged degenerate.
pub const GAP_TOL: f64 = 1e-10;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "entry count must equal rows * cols");
        Self { rows, cols, data }
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

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m.data[i * n + i] = v;
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

    #[inline(always)]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline(always)]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
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

    /// `self * other`, with an `i-k-j` loop order so the inner loop runs over
    /// contiguous rows of `other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Vertical concatenation: stacks `blocks` top to bottom.
    pub fn vstack(blocks: &[&Matrix]) -> Matrix {
        assert!(!blocks.is_empty());
        let cols = blocks[0].cols;
        assert!(blocks.iter().all(|b| b.cols == cols), "vstack column mismatch");
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Matrix { rows, cols, data }
    }

    /// Horizontal concatenation: stacks `blocks` left to right.
    pub fn hstack(blocks: &[&Matrix]) -> Matrix {
        assert!(!blocks.is_empty());
        let rows = blocks[0].rows;
        assert!(blocks.iter().all(|b| b.rows == rows), "hstack row mismatch");
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut m = Matrix::zeros(rows, cols);
        let mut at = 0;
        for b in blocks {
            for i in 0..rows {
                m.data[i * cols + at..i * cols + at + b.cols].copy_from_slice(b.row(i));
            }
            at += b.cols;
        }
        m
    }
}

/// A set of `rank` pairwise-orthonormal columns in `R^dim`.
///
/// `gap_flag` marks a degenerate spectrum at the truncation point
/// (`sigma_r - sigma_{r+1}` below [`GAP_TOL`]); the basis is still usable, the
/// flag only warns that the spanned subspace is not uniquely determined.
#[derive(Debug, Clone)]
pub struct OrthonormalBasis {
    dim: usize,
    rank: usize,
    columns: Matrix,
    pub gap_flag: bool,
}

impl OrthonormalBasis {
    /// Validates pairwise orthonormality within [`ORTHO_TOL`].
    pub fn new(columns: Matrix) -> Result<Self, LinalgError> {
        if !columns.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let (dim, rank) = (columns.rows(), columns.cols());
        if rank > dim {
            return Err(LinalgError::InvalidRank { r: rank, max: dim });
        }
        for a in 0..rank {
            for b in a..rank {
                let mut dot = 0.0;
                for i in 0..dim {
                    dot += columns.get(i, a) * columns.get(i, b);
                }
                let target = if a == b { 1.0 } else { 0.0 };
                if (dot - target).abs() > ORTHO_TOL {
                    return Err(LinalgError::NotOrthonormal { tol: ORTHO_TOL });
                }
            }
        }
        Ok(Self { dim, rank, columns, gap_flag: false })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// The `dim x rank` matrix whose columns are the basis vectors.
    pub fn columns(&self) -> &Matrix {
        &self.columns
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.columns.get(i, j)).collect()
    }

    /// The projector `B * B^T` onto the spanned subspace.
    pub fn projector(&self) -> Matrix {
        self.columns.matmul(&self.columns.transpose())
    }

    /// Right-multiplies by an orthogonal `rank x rank` matrix; spans the same
    /// subspace in a different basis.
    pub fn rotate(&self, o: &Matrix) -> Result<Self, LinalgError> {
        Self::new(self.columns.matmul(o))
    }
}

/// Full singular value decomposition `m = left * diag(singulars) * right^T`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub left: OrthonormalBasis,
    pub singulars: Vec<f64>,
    pub right: OrthonormalBasis,
    pub gap_flag: bool,
}

/// Which singular subspace to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// How to aggregate the singular values of `U^T V` into one similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMode {
    /// Largest singular value: cosine of the best-matched pair of directions.
    Max,
    /// Root mean square of all singular values.
    Avg,
}

/// One-sided Jacobi SVD.
///
/// Deterministic for a given input: fixed sweep order, and a fixed sign
/// convention (the first entry of each left singular vector whose magnitude
/// exceeds 1e-12 is made positive). Economy-size: `k = min(rows, cols)`
/// singular values, `left` is `rows x k`, `right` is `cols x k`.
pub fn svd(m: &Matrix) -> Result<SvdResult, LinalgError> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let r = svd_tall(&m.transpose())?;
        Ok(SvdResult { left: r.right, singulars: r.singulars, right: r.left, gap_flag: r.gap_flag })
    }
}

fn svd_tall(a: &Matrix) -> Result<SvdResult, LinalgError> {
    let (m, n) = (a.rows(), a.cols());
    debug_assert!(m >= n);
    // Column-major working copies of A and V.
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let eps = 1e-14;
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = col_moments(&u[p], &u[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut u, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    // Singular values are column norms; order descending (stable).
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = u.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut left = Matrix::zeros(m, n);
    let mut right = Matrix::zeros(n, n);
    let mut singulars = Vec::with_capacity(n);
    let sigma_max = order.first().map(|&i| norms[i]).unwrap_or(0.0);
    let tiny = (sigma_max * 1e-13).max(f64::MIN_POSITIVE);
    let mut deficient = Vec::new();
    for (slot, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        singulars.push(sigma);
        if sigma > tiny {
            for i in 0..m {
                left.set(i, slot, u[src][i] / sigma);
            }
        } else {
            deficient.push(slot);
        }
        for i in 0..n {
            right.set(i, slot, v[src][i]);
        }
    }

    complete_columns(&mut left, &deficient);

    // Sign convention: first entry of each left vector with |x| > 1e-12 made
    // positive; the matching right vector flips with it.
    for j in 0..n {
        let lead = (0..m).find(|&i| left.get(i, j).abs() > 1e-12);
        if let Some(i) = lead {
            if left.get(i, j) < 0.0 {
                for r in 0..m {
                    let x = left.get(r, j);
                    left.set(r, j, -x);
                }
                for r in 0..n {
                    let x = right.get(r, j);
                    right.set(r, j, -x);
                }
            }
        }
    }

    Ok(SvdResult {
        left: OrthonormalBasis::new(left)?,
        singulars,
        right: OrthonormalBasis::new(right)?,
        gap_flag: false,
    })
}

#[inline]
fn col_moments(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
    for (&x, &y) in p.iter().zip(q) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

#[inline]
fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    // Borrow both columns disjointly.
    let (lo, hi) = if p < q { (p, q) } else { (q, p) };
    let (a, b) = cols.split_at_mut(hi);
    let (cp, cq) = if p < q { (&mut a[lo], &mut b[0]) } else { (&mut b[0], &mut a[lo]) };
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = c * *x - s * *y;
        let yq = s * *x + c * *y;
        *x = xp;
        *y = yq;
    }
}

/// Fill the listed (rank-deficient) column slots with unit vectors orthogonal
/// to every other column, drawn deterministically from the standard basis by
/// Gram-Schmidt.
fn complete_columns(mat: &mut Matrix, empty_slots: &[usize]) {
    if empty_slots.is_empty() {
        return;
    }
    let (m, n) = (mat.rows(), mat.cols());
    let filled: Vec<usize> = (0..n).filter(|s| !empty_slots.contains(s)).collect();
    let mut done: Vec<usize> = filled;
    let orthogonalize = |col: &mut Vec<f64>, done: &[usize], mat: &Matrix| {
        for &other in done {
            let dot: f64 = (0..m).map(|i| col[i] * mat.get(i, other)).sum();
            for (i, c) in col.iter_mut().enumerate() {
                *c -= dot * mat.get(i, other);
            }
        }
    };
    for &slot in empty_slots {
        // Pick the standard basis vector with the largest residual after
        // projecting out the columns placed so far (ties: lowest index). The
        // trace identity guarantees the best residual norm is at least
        // sqrt((m - k) / m) > 0.
        let mut best = (0usize, -1.0f64);
        for cand in 0..m {
            let mut col = vec![0.0; m];
            col[cand] = 1.0;
            orthogonalize(&mut col, &done, mat);
            let norm_sq: f64 = col.iter().map(|x| x * x).sum();
            if norm_sq > best.1 {
                best = (cand, norm_sq);
            }
        }
        let mut col = vec![0.0; m];
        col[best.0] = 1.0;
        orthogonalize(&mut col, &done, mat);
        // second pass for numerical cleanliness
        orthogonalize(&mut col, &done, mat);
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-8, "orthonormal completion failed");
        for (i, c) in col.iter().enumerate() {
            mat.set(i, slot, c / norm);
        }
        done.push(slot);
    }
}

/// First `r` left or right singular vectors of `m`.
///
/// The returned basis carries `gap_flag = true` when the spectrum gap at the
/// cut, `sigma_r - sigma_{r+1}`, is below [`GAP_TOL`] (with `sigma_{k+1} = 0`
/// past the end): the subspace is then not uniquely determined, which happens
/// at random initialization where spectra are nearly flat.
pub fn principal_subspace(m: &Matrix, side: Side, r: usize) -> Result<OrthonormalBasis, LinalgError> {
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return Err(LinalgError::InvalidRank { r, max: k });
    }
    let dec = svd(m)?;
    let src = match side {
        Side::Left => &dec.left,
        Side::Right => &dec.right,
    };
    let cols = Matrix::from_fn(src.dim(), r, |i, j| src.columns().get(i, j));
    let mut basis = OrthonormalBasis::new(cols)?;
    let next = if r < k { dec.singulars[r] } else { 0.0 };
    basis.gap_flag = dec.singulars[r - 1] - next < GAP_TOL;
    Ok(basis)
}

/// Generalized cosine similarity between two subspaces, from the singular
/// values of `U^T V`. `Max` returns the largest; `Avg` returns
/// `sqrt(mean of the top min-rank squared singular values)`. Either way the
/// result lies in `[0, 1]` (clamped against last-digit overshoot).
pub fn subspace_similarity(
    u: &OrthonormalBasis,
    v: &OrthonormalBasis,
    mode: SimilarityMode,
) -> Result<f64, LinalgError> {
    if u.dim() != v.dim() {
        return Err(LinalgError::DimMismatch(format!(
            "ambient dimensions differ: {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    let cross = u.columns().transpose().matmul(v.columns());
    let val = match mode {
        SimilarityMode::Max => {
            let dec = svd(&cross)?;
            dec.singulars[0]
        }
        SimilarityMode::Avg => {
            // sum of squared singular values == squared Frobenius norm
            let r = u.rank().min(v.rank()) as f64;
            let f = cross.frobenius_norm();
            (f * f / r).sqrt()
        }
    };
    debug_assert!(val <= 1.0 + 1e-6, "similarity overshoot: {val}");
    Ok(val.clamp(0.0, 1.0))
}
