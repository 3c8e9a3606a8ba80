//! Dense linear algebra for small matrices: products, truncated SVD and
//! symmetric eigendecomposition, plus the seedable RNG used everywhere a
//! deterministic random source is required.
//!
//! Everything here targets matrices of at most a few hundred on a side
//! (layer weight unfoldings, feature covariances). Internals accumulate in
//! f64; storage is f32.

use crate::error::{Error, Result};
use rand_chacha::rand_core::SeedableRng;

/// The deterministic random source for the whole crate. Same seed, same
/// stream, on every platform.
pub type DeterministicRng = rand_chacha::ChaCha8Rng;

/// Build the crate-standard RNG from a seed.
pub fn seeded_rng(seed: u64) -> DeterministicRng {
    DeterministicRng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid_argument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::invalid_argument("ragged rows".to_string()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Matrix product with f64 accumulation.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid_argument(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0f64;
                for k in 0..self.cols {
                    acc += self.get(i, k) as f64 * other.get(k, j) as f64;
                }
                out.set(i, j, acc as f32);
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_finite(&self) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::invalid_data("matrix contains a non-finite entry".to_string()))
        }
    }
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct EigResult {
    /// Eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    /// Columns are unit eigenvectors, in the same order as `eigenvalues`.
    pub eigenvectors: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_NORM_THRESHOLD: f64 = 1e-10;
const SYMMETRY_TOLERANCE: f32 = 1e-5;

/// Eigendecomposition of a symmetric `d x d` matrix by cyclic Jacobi
/// rotations. Eigenvalues are returned in descending order, ties keeping
/// their pre-sort order; the first nonzero entry of every eigenvector is
/// made positive.
pub fn sym_eig_descending(c: &Matrix) -> Result<EigResult> {
    if c.rows() != c.cols() || c.rows() == 0 {
        return Err(Error::invalid_argument(format!(
            "expected a nonempty square matrix, got {}x{}",
            c.rows(),
            c.cols()
        )));
    }
    c.ensure_finite()?;
    let d = c.rows();
    for i in 0..d {
        for j in (i + 1)..d {
            if (c.get(i, j) - c.get(j, i)).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::invalid_data(format!(
                    "matrix is not symmetric: |c[{i}][{j}] - c[{j}][{i}]| > {SYMMETRY_TOLERANCE}"
                )));
            }
        }
    }

    // Work on the symmetrized copy in f64.
    let mut a = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = 0.5 * (c.get(i, j) as f64 + c.get(j, i) as f64);
        }
    }
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }

    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += a[i * d + j] * a[i * d + j];
                }
            }
        }
        s.sqrt()
    };
    // Scale guard: for matrices with large entries the absolute threshold
    // sits below what f64 annihilation can reach.
    let fro: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_OFF_NORM_THRESHOLD.max(fro * 1e-14);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off_norm(&a) <= threshold {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = t * cos;

                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = cos * akp - sin * akq;
                    a[k * d + q] = sin * akp + cos * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = cos * apk - sin * aqk;
                    a[q * d + k] = sin * apk + cos * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = cos * vkp - sin * vkq;
                    v[k * d + q] = sin * vkp + cos * vkq;
                }
            }
        }
    }

    // Stable sort keeps input column order on ties.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        a[j * d + j]
            .partial_cmp(&a[i * d + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut eigenvalues = Vec::with_capacity(d);
    let mut vectors = Matrix::zeros(d, d);
    for (out_col, &src_col) in order.iter().enumerate() {
        eigenvalues.push(a[src_col * d + src_col]);
        let mut col: Vec<f64> = (0..d).map(|k| v[k * d + src_col]).collect();
        // Sign convention: first nonzero entry positive.
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for x in &mut col {
                    *x = -*x;
                }
            }
        }
        for (k, x) in col.iter().enumerate() {
            vectors.set(k, out_col, *x as f32);
        }
    }

    Ok(EigResult {
        eigenvalues,
        eigenvectors: vectors,
    })
}

// ---------------------------------------------------------------------------
// Truncated SVD
// ---------------------------------------------------------------------------

/// Rank-r factors of a matrix: `m ≈ left · diag(singular_values) · rightᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m x r, orthonormal columns.
    pub left_factors: Matrix,
    /// r singular values, descending, all >= 0.
    pub singular_values: Vec<f64>,
    /// n x r, orthonormal columns.
    pub right_factors: Matrix,
    pub rank: usize,
}

impl SvdResult {
    /// `left · diag(s) · rightᵀ` as an explicit matrix.
    pub fn reconstruct(&self) -> Matrix {
        let m = self.left_factors.rows();
        let n = self.right_factors.rows();
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for k in 0..self.rank {
                    acc += self.left_factors.get(i, k) as f64
                        * self.singular_values[k]
                        * self.right_factors.get(j, k) as f64;
                }
                out.set(i, j, acc as f32);
            }
        }
        out
    }
}

/// Best rank-r approximation factors of `m`, computed through the
/// eigendecomposition of the Gram matrix of the smaller dimension. All
/// weight matrices handled here are small (<= ~128 on a side), so one
/// re-orthogonalization pass on the derived side is enough.
pub fn truncated_svd(m: &Matrix, r: usize) -> Result<SvdResult> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::invalid_argument("empty matrix".to_string()));
    }
    if r < 1 || r > rows.min(cols) {
        return Err(Error::invalid_argument(format!(
            "rank {} out of range for {}x{} matrix",
            r, rows, cols
        )));
    }
    m.ensure_finite()?;

    // f64 copy of the input for the Gram products.
    let a: Vec<f64> = m.data().iter().map(|&x| x as f64).collect();
    let tall = rows >= cols;
    let g_dim = rows.min(cols);

    // Gram matrix of the smaller side: AᵀA (tall) or AAᵀ (wide).
    let mut gram = Matrix::zeros(g_dim, g_dim);
    for i in 0..g_dim {
        for j in i..g_dim {
            let mut acc = 0.0f64;
            if tall {
                for k in 0..rows {
                    acc += a[k * cols + i] * a[k * cols + j];
                }
            } else {
                for k in 0..cols {
                    acc += a[i * cols + k] * a[j * cols + k];
                }
            }
            gram.set(i, j, acc as f32);
            gram.set(j, i, acc as f32);
        }
    }

    let eig = sym_eig_descending(&gram)?;
    let singular_values: Vec<f64> = eig
        .eigenvalues
        .iter()
        .take(r)
        .map(|&l| l.max(0.0).sqrt())
        .collect();

    // Eigenvector side in f64.
    let mut small = vec![0.0f64; g_dim * r];
    for i in 0..g_dim {
        for j in 0..r {
            small[i * r + j] = eig.eigenvectors.get(i, j) as f64;
        }
    }

    // Derive the other side: u_k = A v_k / σ_k (or vice versa).
    let other_dim = rows.max(cols);
    let mut derived = vec![0.0f64; other_dim * r];
    let sigma_floor = singular_values.first().copied().unwrap_or(0.0) * 1e-12;
    for k in 0..r {
        let s = singular_values[k];
        if s > sigma_floor && s > 0.0 {
            for i in 0..other_dim {
                let mut acc = 0.0f64;
                for j in 0..g_dim {
                    acc += if tall {
                        a[i * cols + j] * small[j * r + k]
                    } else {
                        a[j * cols + i] * small[j * r + k]
                    };
                }
                derived[i * r + k] = acc / s;
            }
        } else {
            // Zero singular value: pick a basis vector and let the
            // re-orthogonalization pass below clean it up.
            for i in 0..other_dim {
                derived[i * r + k] = if i == k % other_dim { 1.0 } else { 0.0 };
            }
        }
    }

    // One modified Gram-Schmidt pass over the derived columns.
    for k in 0..r {
        for prev in 0..k {
            let mut dot = 0.0f64;
            for i in 0..other_dim {
                dot += derived[i * r + k] * derived[i * r + prev];
            }
            for i in 0..other_dim {
                derived[i * r + k] -= dot * derived[i * r + prev];
            }
        }
        let norm: f64 = (0..other_dim)
            .map(|i| derived[i * r + k] * derived[i * r + k])
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            for i in 0..other_dim {
                derived[i * r + k] /= norm;
            }
        }
    }

    let small_mat = Matrix::from_fn(g_dim, r, |i, j| small[i * r + j] as f32);
    let derived_mat = Matrix::from_fn(other_dim, r, |i, j| derived[i * r + j] as f32);
    let (left_factors, right_factors) = if tall {
        (derived_mat, small_mat)
    } else {
        (small_mat, derived_mat)
    };

    Ok(SvdResult {
        left_factors,
        singular_values,
        right_factors,
        rank: r,
    })
}
