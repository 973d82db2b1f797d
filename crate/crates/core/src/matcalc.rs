//! Structured matrix calculus: `vec`/`vech`, the commutation (K), duplication
//! (D), elimination (L) and Moore-Penrose duplication (D⁺) operators, Kronecker
//! products, and the `bar`/`dg` triangular extractions.
//!
//! Every operator exists twice: as an explicit dense matrix (O(d⁴) storage,
//! used by the Fisher diagnostics and the identity suite) and as an implicit
//! index map that works directly on vectors (used on the optimisation path).
//!
//! All storage is column-major with 0-based indices, so entry `(i, j)` of a
//! `rows x cols` matrix sits at `vec` position `j * rows + i`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Half-vectorisation of a square matrix: columns stacked with the entries
/// above the diagonal dropped, length `d(d+1)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfVec {
    dim: usize,
    data: DVector<f64>,
}

impl HalfVec {
    pub fn new(dim: usize, data: DVector<f64>) -> Result<Self> {
        let expected = half_len(dim);
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "HalfVec::new",
                expected,
                found: data.len(),
            });
        }
        Ok(HalfVec { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        HalfVec {
            dim,
            data: DVector::zeros(half_len(dim)),
        }
    }

    /// Matrix side length `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[vech_index(self.dim, i, j)]
    }

    /// Rebuilds the lower-triangular matrix `T` with `vech(T) = self`
    /// (equivalently `Lᵀ vech(T)` reshaped).
    pub fn to_lower(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut out = DMatrix::zeros(d, d);
        for j in 0..d {
            for i in j..d {
                out[(i, j)] = self.data[vech_index(d, i, j)];
            }
        }
        out
    }

    /// Rebuilds the symmetric matrix `S` with `vech(S) = self`
    /// (equivalently `D vech(S)` reshaped).
    pub fn to_symmetric(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut out = DMatrix::zeros(d, d);
        for j in 0..d {
            for i in j..d {
                let v = self.data[vech_index(d, i, j)];
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn scale(&self, factor: f64) -> HalfVec {
        HalfVec {
            dim: self.dim,
            data: &self.data * factor,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `d(d+1)/2`.
pub fn half_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Position of entry `(i, j)`, `i >= j`, inside `vech` of a `d x d` matrix.
#[inline]
pub fn vech_index(d: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < d);
    j * d - j * (j + 1) / 2 + i
}

/// Builds a matrix from column-major data, refusing NaN and infinities.
pub fn checked_matrix(rows: usize, cols: usize, col_major: &[f64]) -> Result<DMatrix<f64>> {
    if col_major.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            context: "checked_matrix",
            expected: rows * cols,
            found: col_major.len(),
        });
    }
    if let Some(pos) = col_major.iter().position(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!(
            "checked_matrix entry ({}, {})",
            pos % rows.max(1),
            pos / rows.max(1)
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, col_major))
}

fn require_square(a: &DMatrix<f64>, context: &'static str) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotSquare {
            context,
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Column stacking.
pub fn vec(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec`] for a `rows x cols` shape.
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            context: "unvec",
            expected: rows * cols,
            found: v.len(),
        });
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

pub fn vech(a: &DMatrix<f64>) -> Result<HalfVec> {
    let d = require_square(a, "vech")?;
    let mut data = DVector::zeros(half_len(d));
    for j in 0..d {
        for i in j..d {
            data[vech_index(d, i, j)] = a[(i, j)];
        }
    }
    Ok(HalfVec { dim: d, data })
}

/// Lower triangle including the diagonal; everything above is zeroed.
pub fn bar(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = require_square(a, "bar")?;
    let mut out = a.clone();
    for j in 1..d {
        for i in 0..j {
            out[(i, j)] = 0.0;
        }
    }
    Ok(out)
}

/// Diagonal part.
pub fn dg(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_square(a, "dg")?;
    Ok(DMatrix::from_diagonal(&a.diagonal()))
}

pub fn is_lower_triangular(a: &DMatrix<f64>) -> bool {
    a.nrows() == a.ncols() && (1..a.ncols()).all(|j| (0..j).all(|i| a[(i, j)] == 0.0))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

// ---------------------------------------------------------------------------
// Dense operators

/// `K` with `K vec(A) = vec(Aᵀ)`.
pub fn commutation_matrix(d: usize) -> DMatrix<f64> {
    let n = d * d;
    let mut k = DMatrix::zeros(n, n);
    for j in 0..d {
        for i in 0..d {
            // vec(Aᵀ) at position i*d + j holds A[(i, j)], stored at j*d + i.
            k[(i * d + j, j * d + i)] = 1.0;
        }
    }
    k
}

/// `D` with `D vech(S) = vec(S)` for symmetric `S`.
pub fn duplication_matrix(d: usize) -> DMatrix<f64> {
    let mut dup = DMatrix::zeros(d * d, half_len(d));
    for j in 0..d {
        for i in 0..d {
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            dup[(j * d + i, vech_index(d, r, c))] = 1.0;
        }
    }
    dup
}

/// `L` with `L vec(A) = vech(A)` for every square `A`.
pub fn elimination_matrix(d: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(half_len(d), d * d);
    for j in 0..d {
        for i in j..d {
            l[(vech_index(d, i, j), j * d + i)] = 1.0;
        }
    }
    l
}

/// `D⁺ = (DᵀD)⁻¹Dᵀ`. `DᵀD` is diagonal (1 for diagonal positions, 2 for
/// off-diagonal ones), so the inverse is taken entrywise.
pub fn mp_duplication(d: usize) -> DMatrix<f64> {
    let dup = duplication_matrix(d);
    let gram = dup.transpose() * &dup;
    let inv = DMatrix::from_diagonal(&gram.diagonal().map(|v| 1.0 / v));
    inv * dup.transpose()
}

/// `N = (K + I)/2`, the symmetriser `N vec(A) = vec((A + Aᵀ)/2)`.
pub fn n_matrix(d: usize) -> DMatrix<f64> {
    (commutation_matrix(d) + DMatrix::identity(d * d, d * d)) * 0.5
}

// ---------------------------------------------------------------------------
// Implicit operators

fn side_of(v: &DVector<f64>, context: &'static str) -> Result<usize> {
    let d = (v.len() as f64).sqrt().round() as usize;
    if d * d != v.len() {
        return Err(Error::InvalidArgument(format!(
            "{context}: length {} is not a perfect square",
            v.len()
        )));
    }
    Ok(d)
}

/// `K v` without forming `K`.
pub fn apply_commutation(v: &DVector<f64>) -> Result<DVector<f64>> {
    let d = side_of(v, "apply_commutation")?;
    let mut out = DVector::zeros(v.len());
    for j in 0..d {
        for i in 0..d {
            out[i * d + j] = v[j * d + i];
        }
    }
    Ok(out)
}

/// `D h`.
pub fn apply_duplication(h: &HalfVec) -> DVector<f64> {
    vec(&h.to_symmetric())
}

/// `L v`.
pub fn apply_elimination(v: &DVector<f64>) -> Result<HalfVec> {
    let d = side_of(v, "apply_elimination")?;
    let mut data = DVector::zeros(half_len(d));
    for j in 0..d {
        for i in j..d {
            data[vech_index(d, i, j)] = v[j * d + i];
        }
    }
    Ok(HalfVec { dim: d, data })
}

/// `Lᵀ h`.
pub fn apply_elimination_transpose(h: &HalfVec) -> DVector<f64> {
    vec(&h.to_lower())
}

/// `D⁺ v`: averages the `(i, j)` and `(j, i)` entries.
pub fn apply_mp_duplication(v: &DVector<f64>) -> Result<HalfVec> {
    let d = side_of(v, "apply_mp_duplication")?;
    let mut data = DVector::zeros(half_len(d));
    for j in 0..d {
        for i in j..d {
            data[vech_index(d, i, j)] = 0.5 * (v[j * d + i] + v[i * d + j]);
        }
    }
    Ok(HalfVec { dim: d, data })
}

/// `Dᵀ v`: sums the `(i, j)` and `(j, i)` entries (once on the diagonal).
pub fn apply_duplication_transpose(v: &DVector<f64>) -> Result<HalfVec> {
    let d = side_of(v, "apply_duplication_transpose")?;
    let mut data = DVector::zeros(half_len(d));
    for j in 0..d {
        for i in j..d {
            data[vech_index(d, i, j)] = if i == j {
                v[j * d + i]
            } else {
                v[j * d + i] + v[i * d + j]
            };
        }
    }
    Ok(HalfVec { dim: d, data })
}
