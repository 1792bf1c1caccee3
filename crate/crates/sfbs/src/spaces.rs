//! Finite-dimensional real inner-product spaces, block vectors over product
//! spaces, dense linear maps with adjoints, SPD metric operators, and
//! spectral-norm estimation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dimensions of a product of real coordinate spaces `H ⊕ G_1 ⊕ … ⊕ G_q`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpaceSpec {
    dims: Vec<usize>,
}

impl SpaceSpec {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("space spec needs at least one block".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Shape("all block dimensions must be >= 1".into()));
        }
        Ok(Self { dims })
    }

    pub fn single(dim: usize) -> Result<Self> {
        Self::new(vec![dim])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn block_count(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, block: usize) -> usize {
        self.dims[block]
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Offset of each block inside the flattened vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dims.len());
        let mut acc = 0;
        for &d in &self.dims {
            out.push(acc);
            acc += d;
        }
        out
    }
}

/// A point in a product space: one coordinate vector per block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockVector {
    blocks: Vec<DVector<f64>>,
}

impl BlockVector {
    pub fn new(blocks: Vec<DVector<f64>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Shape("block vector needs at least one block".into()));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("block {i} has non-finite entries")));
            }
        }
        Ok(Self { blocks })
    }

    pub fn zeros(space: &SpaceSpec) -> Self {
        Self {
            blocks: space.dims().iter().map(|&d| DVector::zeros(d)).collect(),
        }
    }

    pub fn conforms(&self, space: &SpaceSpec) -> bool {
        self.blocks.len() == space.block_count()
            && self
                .blocks
                .iter()
                .zip(space.dims())
                .all(|(b, &d)| b.len() == d)
    }

    pub fn blocks(&self) -> &[DVector<f64>] {
        &self.blocks
    }

    pub fn block(&self, k: usize) -> &DVector<f64> {
        &self.blocks[k]
    }

    pub fn block_mut(&mut self, k: usize) -> &mut DVector<f64> {
        &mut self.blocks[k]
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            blocks: self.blocks.iter().map(|b| b * s).collect(),
        }
    }

    /// `self + s * other`, block-wise.
    pub fn axpy(&self, s: f64, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b * s)
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        let mut acc = 0.0;
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::Shape("block count mismatch".into()));
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if a.len() != b.len() {
                return Err(Error::Shape("block length mismatch".into()));
            }
            acc += a.dot(b);
        }
        Ok(acc)
    }

    pub fn norm_sq(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_squared()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Concatenate blocks into a single flat vector.
    pub fn flatten(&self) -> DVector<f64> {
        let total: usize = self.blocks.iter().map(|b| b.len()).sum();
        let mut out = DVector::zeros(total);
        let mut off = 0;
        for b in &self.blocks {
            out.rows_mut(off, b.len()).copy_from(b);
            off += b.len();
        }
        out
    }

    /// Split a flat vector back into blocks according to `space`.
    pub fn unflatten(space: &SpaceSpec, flat: &DVector<f64>) -> Result<Self> {
        if flat.len() != space.total_dim() {
            return Err(Error::Shape(format!(
                "flat vector has length {}, space expects {}",
                flat.len(),
                space.total_dim()
            )));
        }
        let mut blocks = Vec::with_capacity(space.block_count());
        let mut off = 0;
        for &d in space.dims() {
            blocks.push(flat.rows(off, d).into_owned());
            off += d;
        }
        Ok(Self { blocks })
    }

    fn zip_with<F>(&self, other: &Self, f: F) -> Result<Self>
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::Shape("block count mismatch".into()));
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if a.len() != b.len() {
                return Err(Error::Shape("block length mismatch".into()));
            }
            blocks.push(f(a, b));
        }
        Ok(Self { blocks })
    }
}

/// Inner product of two conforming block vectors.
pub fn inner(space: &SpaceSpec, x: &BlockVector, y: &BlockVector) -> Result<f64> {
    if !x.conforms(space) || !y.conforms(space) {
        return Err(Error::Shape("vector does not conform to space".into()));
    }
    x.inner(y)
}

/// Dense linear map with its adjoint precomputed at construction so values
/// stay immutable and freely shareable afterwards.
#[derive(Clone, Debug)]
pub struct LinearMap {
    mat: DMatrix<f64>,
    adj: DMatrix<f64>,
}

impl LinearMap {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("matrix has non-finite entries".into()));
        }
        let adj = mat.transpose();
        Ok(Self { mat, adj })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity is finite")
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        Self::new(DMatrix::zeros(rows, cols)).expect("zero is finite")
    }

    pub fn rows(&self) -> usize {
        self.mat.nrows()
    }

    pub fn cols(&self) -> usize {
        self.mat.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.cols() {
            return Err(Error::Shape(format!(
                "map expects domain dim {}, got {}",
                self.cols(),
                x.len()
            )));
        }
        Ok(&self.mat * x)
    }

    pub fn apply_adjoint(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.rows() {
            return Err(Error::Shape(format!(
                "adjoint expects codomain dim {}, got {}",
                self.rows(),
                y.len()
            )));
        }
        Ok(&self.adj * y)
    }

    /// Spectral norm via [`operator_norm`] at the default tolerance.
    pub fn norm(&self) -> Result<f64> {
        operator_norm(&self.mat, DEFAULT_NORM_TOL, DEFAULT_NORM_MAX_ITER)
    }
}

pub const DEFAULT_NORM_TOL: f64 = 1e-10;
pub const DEFAULT_NORM_MAX_ITER: usize = 50_000;

/// Largest singular value of a dense matrix, estimated by power iteration on
/// `AᵀA`.
///
/// Starts from the normalized all-ones vector; restarts once from a seeded
/// random vector if the converged Rayleigh quotient sits below the
/// `‖A‖_F / sqrt(min(m,n))` lower bound, which signals a start vector nearly
/// orthogonal to the dominant singular subspace.
pub fn operator_norm(mat: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<f64> {
    if tol <= 0.0 {
        return Err(Error::Parameter("operator_norm tolerance must be > 0".into()));
    }
    let fro = mat.norm();
    if fro == 0.0 {
        return Ok(0.0);
    }
    let n = mat.ncols();
    let lower = fro / (mat.nrows().min(n) as f64).sqrt();

    let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let first = power_iterate(mat, ones, tol, max_iter)?;
    if first >= lower * (1.0 - 1e-9) {
        return Ok(first);
    }
    // Stagnated below the structural lower bound: retry from a random start.
    let mut rng = ChaCha8Rng::seed_from_u64(0x05f0_ba11);
    let mut v = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    let nv = v.norm();
    if nv == 0.0 {
        v = DVector::from_element(n, 1.0);
    }
    let second = power_iterate(mat, v.normalize(), tol, max_iter)?;
    Ok(first.max(second))
}

fn power_iterate(mat: &DMatrix<f64>, mut v: DVector<f64>, tol: f64, max_iter: usize) -> Result<f64> {
    let mut sigma = (mat * &v).norm();
    for _ in 0..max_iter {
        let w = mat.tr_mul(&(mat * &v));
        let nw = w.norm();
        if nw == 0.0 {
            // v fell into the null space; nothing more to extract from here.
            return Ok(0.0);
        }
        v = w / nw;
        let next = (mat * &v).norm();
        if (next - sigma).abs() <= tol * next.max(f64::MIN_POSITIVE) {
            return Ok(next);
        }
        sigma = next;
    }
    Err(Error::NonConvergence {
        iters: max_iter,
        last: sigma,
    })
}

/// Symmetric positive-definite metric with its eigendecomposition computed
/// once at construction (square root, inverse, inverse square root).
#[derive(Clone, Debug)]
pub struct SpdMetric {
    mat: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    inv: DMatrix<f64>,
    min_eig: f64,
    max_eig: f64,
}

impl SpdMetric {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::Shape("metric matrix must be square".into()));
        }
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("metric has non-finite entries".into()));
        }
        let scale = mat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sym_defect = (&mat - mat.transpose())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if sym_defect > 1e-12 * (1.0 + scale) {
            return Err(Error::Parameter(format!(
                "metric is not symmetric (defect {sym_defect:e})"
            )));
        }
        // Work on the symmetrized matrix so the eigendecomposition is exact
        // for the stored operator.
        let sym = (&mat + mat.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_eig = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min_eig <= 0.0 {
            return Err(Error::Parameter(format!(
                "metric is not positive definite (min eigenvalue {min_eig:e})"
            )));
        }
        let q = &eig.eigenvectors;
        let sqrt_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
        let sqrt = q * sqrt_diag * q.transpose();
        let inv = q * inv_diag * q.transpose();
        Ok(Self {
            mat: sym,
            sqrt,
            inv,
            min_eig,
            max_eig,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn scaled_identity(dim: usize, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::Parameter("metric scale must be > 0".into()));
        }
        Self::new(DMatrix::identity(dim, dim) * sigma)
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eig
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.max_eig
    }

    /// `Some(sigma)` when the metric is `sigma · Id` up to 1e-14 relative.
    pub fn scalar_multiple(&self) -> Option<f64> {
        let sigma = self.mat[(0, 0)];
        let tol = 1e-14 * (1.0 + sigma.abs());
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                let want = if i == j { sigma } else { 0.0 };
                if (self.mat[(i, j)] - want).abs() > tol {
                    return None;
                }
            }
        }
        Some(sigma)
    }

    pub fn is_diagonal(&self) -> bool {
        let scale = self.max_eig;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                if i != j && self.mat[(i, j)].abs() > 1e-14 * (1.0 + scale) {
                    return false;
                }
            }
        }
        true
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(&self.mat * x)
    }

    pub fn apply_inv(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(&self.inv * x)
    }

    /// `U^{1/2} x` via the cached symmetric square root.
    pub fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(&self.sqrt * x)
    }

    pub fn sqrt_matrix(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn inv_matrix(&self) -> &DMatrix<f64> {
        &self.inv
    }

    /// The inverse as its own metric (`U^{-1}` is SPD whenever `U` is).
    pub fn inverse_metric(&self) -> SpdMetric {
        SpdMetric::new(self.inv.clone()).expect("inverse of SPD is SPD")
    }

    /// `‖x‖_U = sqrt(⟨x, Ux⟩)`.
    pub fn norm(&self, x: &DVector<f64>) -> Result<f64> {
        let ux = self.apply(x)?;
        Ok(x.dot(&ux).max(0.0).sqrt())
    }

    pub fn inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let uy = self.apply(y)?;
        Ok(x.dot(&uy))
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "metric dim {} does not match vector dim {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }
}

/// `‖x‖_U` as a free function mirroring [`SpdMetric::norm`].
pub fn metric_norm(u: &SpdMetric, x: &DVector<f64>) -> Result<f64> {
    u.norm(x)
}

/// `U^{1/2} x` as a free function mirroring [`SpdMetric::apply_sqrt`].
pub fn metric_sqrt_apply(u: &SpdMetric, x: &DVector<f64>) -> Result<DVector<f64>> {
    u.apply_sqrt(x)
}

// ---------------------------------------------------------------------------
// Plain-text and JSON matrix I/O.
//
// Text format: header line `rows cols`, then row-major whitespace-separated
// entries at 17 significant digits, which round-trips f64 bit-exactly.
// ---------------------------------------------------------------------------

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn matrix_to_text(mat: &DMatrix<f64>) -> String {
    let mut out = format!("{} {}\n", mat.nrows(), mat.ncols());
    for i in 0..mat.nrows() {
        let row: Vec<String> = (0..mat.ncols()).map(|j| format_f64(mat[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn matrix_from_text(text: &str) -> Result<DMatrix<f64>> {
    let mut tokens = text.split_whitespace();
    let rows: usize = tokens
        .next()
        .ok_or_else(|| Error::Shape("empty matrix text".into()))?
        .parse()
        .map_err(|e| Error::Shape(format!("bad row count: {e}")))?;
    let cols: usize = tokens
        .next()
        .ok_or_else(|| Error::Shape("matrix text missing column count".into()))?
        .parse()
        .map_err(|e| Error::Shape(format!("bad column count: {e}")))?;
    let mut data = Vec::with_capacity(rows * cols);
    for tok in tokens.by_ref().take(rows * cols) {
        data.push(
            tok.parse::<f64>()
                .map_err(|e| Error::Shape(format!("bad matrix entry {tok:?}: {e}")))?,
        );
    }
    if data.len() != rows * cols {
        return Err(Error::Shape(format!(
            "matrix text has {} entries, expected {}",
            data.len(),
            rows * cols
        )));
    }
    if tokens.next().is_some() {
        return Err(Error::Shape("matrix text has trailing entries".into()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_matrix_text(path: &Path, mat: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, matrix_to_text(mat))?;
    Ok(())
}

pub fn read_matrix_text(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    matrix_from_text(&text)
}

/// Vectors are stored as `d × 1` matrices in the text format.
pub fn write_vector_text(path: &Path, v: &DVector<f64>) -> Result<()> {
    let mat = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    write_matrix_text(path, &mat)
}

pub fn read_vector_text(path: &Path) -> Result<DVector<f64>> {
    let mat = read_matrix_text(path)?;
    if mat.ncols() != 1 {
        return Err(Error::Shape(format!(
            "expected a column vector, got {}x{}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    Ok(DVector::from_column_slice(mat.column(0).as_slice()))
}

/// Matrix from a JSON array of row arrays; a flat array is read as a vector.
pub fn matrix_from_json(value: &serde_json::Value) -> Result<DMatrix<f64>> {
    let rows = value
        .as_array()
        .ok_or_else(|| Error::Shape("JSON matrix must be an array".into()))?;
    if rows.is_empty() {
        return Err(Error::Shape("JSON matrix is empty".into()));
    }
    if rows[0].is_number() {
        let v = vector_from_json(value)?;
        return Ok(DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
    }
    let ncols = rows[0]
        .as_array()
        .ok_or_else(|| Error::Shape("JSON matrix rows must be arrays".into()))?
        .len();
    let mut data = Vec::with_capacity(rows.len() * ncols);
    for row in rows {
        let row = row
            .as_array()
            .ok_or_else(|| Error::Shape("JSON matrix rows must be arrays".into()))?;
        if row.len() != ncols {
            return Err(Error::Shape("JSON matrix rows have uneven lengths".into()));
        }
        for v in row {
            data.push(
                v.as_f64()
                    .ok_or_else(|| Error::Shape("JSON matrix entries must be numbers".into()))?,
            );
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &data))
}

pub fn vector_from_json(value: &serde_json::Value) -> Result<DVector<f64>> {
    let arr = value
        .as_array()
        .ok_or_else(|| Error::Shape("JSON vector must be an array".into()))?;
    let mut data = Vec::with_capacity(arr.len());
    for v in arr {
        data.push(
            v.as_f64()
                .ok_or_else(|| Error::Shape("JSON vector entries must be numbers".into()))?,
        );
    }
    Ok(DVector::from_vec(data))
}
