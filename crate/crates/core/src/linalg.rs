//! Small dense linear algebra on complex symbol matrices: singular value
//! decompositions with a relative rank threshold, null spaces, ranges,
//! Moore-Penrose inverses and subspace gaps.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Relative singular-value threshold shared by rank, kernel and
/// pseudoinverse computations.
pub const RANK_TOL: f64 = 1e-10;

/// Singular value decomposition with a full right factor.
///
/// `u` holds the left singular vectors (m x n, only the first `rank`
/// columns are meaningful), `v` is the full n x n unitary right factor and
/// `singular` is sorted in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMatrix,
    pub singular: Vec<f64>,
    pub v: CMatrix,
    rows: usize,
}

impl Svd {
    pub fn new(a: &CMatrix) -> Self {
        let (m, n) = a.shape();
        if n == 0 {
            return Svd {
                u: CMatrix::zeros(m, 0),
                singular: Vec::new(),
                v: CMatrix::zeros(0, 0),
                rows: m,
            };
        }
        // Pad with zero rows so the thin factorisation returns every right
        // singular vector.
        let padded = if m < n {
            let mut p = CMatrix::zeros(n, n);
            p.view_mut((0, 0), (m, n)).copy_from(a);
            p
        } else {
            a.clone()
        };
        let svd = nalgebra::linalg::SVD::new(padded, true, true);
        let u_raw = svd.u.expect("left factor requested");
        let vt_raw = svd.v_t.expect("right factor requested");
        let sv = svd.singular_values;

        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));

        let mut u = CMatrix::zeros(m, order.len());
        let mut v = CMatrix::zeros(n, n);
        let mut singular = Vec::with_capacity(order.len());
        for (dst, &src) in order.iter().enumerate() {
            singular.push(sv[src]);
            for r in 0..m {
                u[(r, dst)] = u_raw[(r, src)];
            }
            for r in 0..n {
                v[(r, dst)] = vt_raw[(src, r)].conj();
            }
        }
        Svd {
            u,
            singular,
            v,
            rows: m,
        }
    }

    pub fn max_singular(&self) -> f64 {
        self.singular.first().copied().unwrap_or(0.0)
    }

    /// Number of singular values above `tol * sigma_max`.
    pub fn rank(&self, tol: f64) -> usize {
        let smax = self.max_singular();
        if smax <= f64::MIN_POSITIVE {
            return 0;
        }
        self.singular.iter().filter(|&&s| s > tol * smax).count()
    }

    /// Orthonormal basis of the kernel (n x (n - rank)), with a deterministic
    /// phase convention per column.
    pub fn null_space(&self, tol: f64) -> CMatrix {
        let r = self.rank(tol);
        let n = self.v.nrows();
        let mut basis = self.v.columns(r, n - r).into_owned();
        normalize_phases(&mut basis);
        basis
    }

    /// Orthonormal basis of the range (m x rank).
    pub fn range(&self, tol: f64) -> CMatrix {
        let r = self.rank(tol);
        self.u.view((0, 0), (self.rows, r)).into_owned()
    }

    /// Orthonormal basis of the orthogonal complement of the kernel.
    pub fn row_space(&self, tol: f64) -> CMatrix {
        let r = self.rank(tol);
        self.v.columns(0, r).into_owned()
    }

    pub fn pseudoinverse(&self, tol: f64) -> CMatrix {
        let r = self.rank(tol);
        let n = self.v.nrows();
        let mut out = CMatrix::zeros(n, self.rows);
        for k in 0..r {
            let inv = 1.0 / self.singular[k];
            for i in 0..n {
                let vi = self.v[(i, k)] * inv;
                for j in 0..self.rows {
                    out[(i, j)] += vi * self.u[(j, k)].conj();
                }
            }
        }
        out
    }
}

/// Count of singular values above `tol * sigma_max`; zero for the zero
/// matrix.
pub fn numerical_rank(m: &CMatrix, tol: f64) -> usize {
    Svd::new(m).rank(tol)
}

pub fn pseudoinverse(m: &CMatrix, tol: f64) -> CMatrix {
    Svd::new(m).pseudoinverse(tol)
}

/// Orthogonal projector `Q Q^H` onto the span of the orthonormal columns of `q`.
pub fn projector(q: &CMatrix, dim: usize) -> CMatrix {
    if q.ncols() == 0 {
        return CMatrix::zeros(dim, dim);
    }
    q * q.adjoint()
}

/// Spectral norm.
pub fn spectral_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    Svd::new(m).max_singular()
}

/// Sine of the largest principal angle between two subspaces given by
/// orthonormal bases of equal dimension, computed as `||(I - P1) Q2||`
/// symmetrised; accurate for small angles. Returns 1 if dimensions differ.
pub fn subspace_gap(q1: &CMatrix, q2: &CMatrix) -> f64 {
    if q1.ncols() != q2.ncols() {
        return 1.0;
    }
    if q1.ncols() == 0 {
        return 0.0;
    }
    let one_sided = |a: &CMatrix, b: &CMatrix| {
        let residual = b - a * (a.adjoint() * b);
        spectral_norm(&residual)
    };
    one_sided(q1, q2).max(one_sided(q2, q1))
}

/// Rotate each column so that its largest-modulus entry is real and
/// positive (ties broken by lowest index).
pub fn normalize_phases(basis: &mut CMatrix) {
    for mut col in basis.column_iter_mut() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for (i, z) in col.iter().enumerate() {
            let a = z.norm();
            if a > best_abs * (1.0 + 1e-12) {
                best_abs = a;
                best = i;
            }
        }
        if best_abs > 0.0 {
            let phase = col[best] / best_abs;
            let rot = phase.conj();
            for z in col.iter_mut() {
                *z *= rot;
            }
        }
    }
}

/// Real orthonormal basis of the span of a family of real vectors in
/// `R^dim`, using a relative threshold on the singular values.
pub fn real_span_basis(vectors: &[Vec<f64>], dim: usize, tol: f64) -> Vec<Vec<f64>> {
    if vectors.is_empty() || dim == 0 {
        return Vec::new();
    }
    let m = DMatrix::from_fn(dim, vectors.len(), |r, c| vectors[c][r]);
    let svd = nalgebra::linalg::SVD::new(m, true, false);
    let u = svd.u.expect("left factor requested");
    let sv = svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax <= f64::MIN_POSITIVE {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > tol * smax).collect();
    idx.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    idx.into_iter()
        .map(|i| {
            let mut col: Vec<f64> = u.column(i).iter().copied().collect();
            // Deterministic sign: largest entry positive.
            let (imax, _) = col.iter().enumerate().fold((0, 0.0), |acc, (k, v)| {
                if v.abs() > acc.1 + 1e-12 {
                    (k, v.abs())
                } else {
                    acc
                }
            });
            if col[imax] < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
            col
        })
        .collect()
}

/// Orthogonal projection of `v` onto the span of an orthonormal real basis.
pub fn project_onto(basis: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for b in basis {
        let c: f64 = b.iter().zip(v).map(|(x, y)| x * y).sum();
        for (o, bi) in out.iter_mut().zip(b) {
            *o += c * bi;
        }
    }
    out
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cnorm(v: &[Complex64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}
