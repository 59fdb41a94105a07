//! Homogeneous constant-coefficient operators `sum_{|a|=k} A_a d^a`, their
//! principal symbols, constant-rank audits, wave cones and image cones.
//!
//! The audit is a certificate of sampled behaviour, not a proof: the rank
//! is only inspected on a finite deterministic set of directions.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector, Svd, RANK_TOL};

/// Multi-index `alpha` in `N_0^d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Self {
        MultiIndex(entries)
    }

    /// Unit multi-index `e_j` in dimension `d`.
    pub fn unit(d: usize, j: usize) -> Self {
        let mut e = vec![0; d];
        e[j] = 1;
        MultiIndex(e)
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn modulus(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `xi^alpha` for a real vector.
    pub fn monomial(&self, xi: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(xi)
            .map(|(&a, &x)| x.powi(a as i32))
            .product()
    }

    /// `d/dxi_j xi^alpha`.
    pub fn monomial_derivative(&self, xi: &[f64], j: usize) -> f64 {
        let aj = self.0[j];
        if aj == 0 {
            return 0.0;
        }
        let mut p = aj as f64;
        for (i, (&a, &x)) in self.0.iter().zip(xi).enumerate() {
            let e = if i == j { a - 1 } else { a };
            p *= x.powi(e as i32);
        }
        p
    }

    /// All multi-indices of dimension `d` and modulus `k`, in lexicographic
    /// order with the first entry largest.
    pub fn all_of_order(d: usize, k: u32) -> Vec<MultiIndex> {
        fn rec(d: usize, k: u32, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
            if prefix.len() == d - 1 {
                let mut e = prefix.clone();
                e.push(k);
                out.push(MultiIndex(e));
                return;
            }
            for a in (0..=k).rev() {
                prefix.push(a);
                rec(d, k - a, prefix, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        if d == 0 {
            return out;
        }
        rec(d, k, &mut Vec::new(), &mut out);
        out
    }
}

/// One coefficient `A_alpha` of an operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub alpha: MultiIndex,
    pub matrix: DMatrix<f64>,
}

/// Homogeneous linear differential operator of order `k` from `W = R^fiber_in`
/// to `X = R^fiber_out` on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    name: String,
    dim: usize,
    fiber_in: usize,
    fiber_out: usize,
    order: u32,
    terms: Vec<Term>,
}

impl LinearOperator {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        fiber_in: usize,
        fiber_out: usize,
        order: u32,
        terms: Vec<Term>,
    ) -> Result<Self> {
        let name = name.into();
        if dim == 0 || fiber_in == 0 || fiber_out == 0 {
            return Err(Error::InvalidInput(format!(
                "operator `{name}`: dimension and fibers must be positive"
            )));
        }
        if order == 0 {
            return Err(Error::InvalidInput(format!(
                "operator `{name}`: order must be at least 1"
            )));
        }
        for t in &terms {
            if t.alpha.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "multi-index length",
                    expected: dim,
                    found: t.alpha.len(),
                });
            }
            if t.alpha.modulus() != order {
                return Err(Error::InvalidInput(format!(
                    "operator `{name}`: multi-index {:?} has modulus {} but order is {order}",
                    t.alpha.entries(),
                    t.alpha.modulus()
                )));
            }
            if t.matrix.shape() != (fiber_out, fiber_in) {
                return Err(Error::InvalidInput(format!(
                    "operator `{name}`: coefficient for {:?} has shape {:?}, expected ({fiber_out}, {fiber_in})",
                    t.alpha.entries(),
                    t.matrix.shape()
                )));
            }
        }
        if terms.iter().all(|t| t.matrix.iter().all(|&v| v == 0.0)) {
            return Err(Error::DegenerateOperator(name));
        }
        Ok(LinearOperator {
            name,
            dim,
            fiber_in,
            fiber_out,
            order,
            terms,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn fiber_in(&self) -> usize {
        self.fiber_in
    }
    pub fn fiber_out(&self) -> usize {
        self.fiber_out
    }
    pub fn order(&self) -> u32 {
        self.order
    }
    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    fn scale(&self) -> Complex64 {
        Complex64::new(0.0, 2.0 * PI).powu(self.order)
    }

    fn check_xi(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "frequency vector",
                expected: self.dim,
                found: xi.len(),
            });
        }
        if xi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("frequency must be finite".into()));
        }
        Ok(())
    }

    /// Principal symbol `(2 pi i)^k sum A_alpha xi^alpha`.
    pub fn symbol(&self, xi: &[f64]) -> Result<SymbolMatrix> {
        self.check_xi(xi)?;
        Ok(SymbolMatrix {
            xi: xi.to_vec(),
            value: self.symbol_matrix(xi),
            order: self.order,
        })
    }

    /// Unchecked symbol evaluation.
    pub(crate) fn symbol_matrix(&self, xi: &[f64]) -> CMatrix {
        self.accumulate(|alpha| alpha.monomial(xi))
    }

    /// `d/dxi_j` of the symbol.
    pub(crate) fn symbol_derivative(&self, xi: &[f64], j: usize) -> CMatrix {
        self.accumulate(|alpha| alpha.monomial_derivative(xi, j))
    }

    /// Symbol at an integer frequency of an `n`-point periodic grid. Terms
    /// with an odd power of a Nyquist component (`-n/2`) are dropped so that
    /// the discrete operator maps real fields to real fields.
    pub(crate) fn lattice_symbol(&self, freq: &[i64], n: usize) -> CMatrix {
        let nyquist = -(n as i64) / 2;
        let xi: Vec<f64> = freq.iter().map(|&f| f as f64).collect();
        self.accumulate(|alpha| {
            let odd_nyquist = alpha
                .entries()
                .iter()
                .zip(freq)
                .any(|(&a, &f)| f == nyquist && n.is_multiple_of(2) && a % 2 == 1);
            if odd_nyquist {
                0.0
            } else {
                alpha.monomial(&xi)
            }
        })
    }

    fn accumulate(&self, coeff: impl Fn(&MultiIndex) -> f64) -> CMatrix {
        let mut m = DMatrix::<f64>::zeros(self.fiber_out, self.fiber_in);
        for t in &self.terms {
            let c = coeff(&t.alpha);
            if c != 0.0 {
                m += &t.matrix * c;
            }
        }
        let s = self.scale();
        m.map(|v| s * v)
    }

    /// Apply the symbol at `xi` to a real vector of `W`.
    pub(crate) fn symbol_apply(&self, xi: &[f64], w: &[f64]) -> CVector {
        let m = self.symbol_matrix(xi);
        let wv = CVector::from_iterator(w.len(), w.iter().map(|&x| Complex64::new(x, 0.0)));
        m * wv
    }
}

impl fmt::Display for LinearOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (d={}, order {}, R^{} -> R^{}, {} terms)",
            self.name,
            self.dim,
            self.order,
            self.fiber_in,
            self.fiber_out,
            self.terms.len()
        )
    }
}

/// Principal symbol evaluated at one frequency.
#[derive(Debug, Clone)]
pub struct SymbolMatrix {
    pub xi: Vec<f64>,
    pub value: CMatrix,
    pub order: u32,
}

// ---------------------------------------------------------------------------
// Operator definition files.

#[derive(Debug, Serialize, Deserialize)]
struct OperatorFile {
    name: Option<String>,
    dimension: usize,
    order: u32,
    fiber_in: usize,
    fiber_out: usize,
    #[serde(default)]
    terms: Vec<TermFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TermFile {
    alpha: Vec<u32>,
    matrix: Vec<Vec<f64>>,
}

impl LinearOperator {
    /// Parse the key/value operator format (TOML syntax).
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let file: OperatorFile = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    format!("{origin}:{line}")
                }
                None => origin.to_string(),
            };
            Error::parse(location, e.message().to_string())
        })?;
        let mut terms = Vec::with_capacity(file.terms.len());
        for (i, t) in file.terms.iter().enumerate() {
            let rows = t.matrix.len();
            let cols = t.matrix.first().map_or(0, Vec::len);
            if t.matrix.iter().any(|r| r.len() != cols) {
                return Err(Error::parse(
                    format!("{origin}: terms[{i}].matrix"),
                    "ragged matrix rows",
                ));
            }
            terms.push(Term {
                alpha: MultiIndex::new(t.alpha.clone()),
                matrix: DMatrix::from_fn(rows, cols, |r, c| t.matrix[r][c]),
            });
        }
        let name = file.name.unwrap_or_else(|| origin.to_string());
        LinearOperator::new(
            name,
            file.dimension,
            file.fiber_in,
            file.fiber_out,
            file.order,
            terms,
        )
        .map_err(|e| match e {
            Error::Parse { .. } | Error::DegenerateOperator(_) => e,
            other => Error::parse(origin.to_string(), other.to_string()),
        })
    }

    pub fn to_toml_string(&self) -> String {
        let file = OperatorFile {
            name: Some(self.name.clone()),
            dimension: self.dim,
            order: self.order,
            fiber_in: self.fiber_in,
            fiber_out: self.fiber_out,
            terms: self
                .terms
                .iter()
                .map(|t| TermFile {
                    alpha: t.alpha.entries().to_vec(),
                    matrix: t
                        .matrix
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("operator serialises")
    }
}

// ---------------------------------------------------------------------------
// Sphere sampling.

/// Deterministic quasi-uniform points on `S^{d-1}` (generalised spiral)
/// together with every signed axis direction and every signed diagonal
/// direction `(±e_i ± e_j)/sqrt 2` and `(±1, ..., ±1)/sqrt d`.
pub fn sphere_samples(d: usize, n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    match d {
        0 => return out,
        1 => {
            out.push(vec![1.0]);
            out.push(vec![-1.0]);
            return out;
        }
        2 => {
            for i in 0..n {
                // Offset by half a step so the spiral does not duplicate axes.
                let t = 2.0 * PI * (i as f64 + 0.5) / n as f64;
                out.push(vec![t.cos(), t.sin()]);
            }
        }
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            for i in 0..n {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                out.push(vec![r * phi.cos(), r * phi.sin(), z]);
            }
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + d as u64);
            for _ in 0..n {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let nv = linalg::norm(&v);
                out.push(v.iter().map(|x| x / nv).collect());
            }
        }
    }
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; d];
            e[i] = s;
            out.push(e);
        }
    }
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..d {
        for j in i + 1..d {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut e = vec![0.0; d];
                e[i] = si * r2;
                e[j] = sj * r2;
                out.push(e);
            }
        }
    }
    if d > 2 {
        let s = 1.0 / (d as f64).sqrt();
        for mask in 0..(1u32 << d) {
            out.push(
                (0..d)
                    .map(|i| if mask & (1 << i) != 0 { -s } else { s })
                    .collect(),
            );
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Constant-rank audit.

/// Sampled rank behaviour of a symbol and the span of its wave cone.
#[derive(Debug, Clone)]
pub struct ConeReport {
    pub samples: Vec<Vec<f64>>,
    pub ranks: Vec<usize>,
    pub rank_min: usize,
    pub rank_max: usize,
    pub constant_rank: bool,
    /// Common rank when `constant_rank` holds.
    pub rank: Option<usize>,
    pub kernel_bases: Vec<CMatrix>,
    /// Real orthonormal basis of `W_A = span(wave cone)`.
    pub span_basis: Vec<Vec<f64>>,
}

impl ConeReport {
    /// Orthogonal projection onto `W_A`.
    pub fn project_to_span(&self, v: &[f64]) -> Vec<f64> {
        linalg::project_onto(&self.span_basis, v)
    }
}

pub fn constant_rank_audit(op: &LinearOperator, n_samples: usize, tol: f64) -> Result<ConeReport> {
    if n_samples < 64 {
        return Err(Error::InvalidInput(format!(
            "constant rank audit needs at least 64 samples, got {n_samples}"
        )));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::InvalidInput(format!(
            "tolerance {tol} not in (0, 1)"
        )));
    }
    let samples = sphere_samples(op.dim(), n_samples);
    let per_sample: Vec<(usize, CMatrix)> = samples
        .par_iter()
        .map(|xi| {
            let svd = Svd::new(&op.symbol_matrix(xi));
            (svd.rank(tol), svd.null_space(tol))
        })
        .collect();
    let (ranks, kernel_bases): (Vec<usize>, Vec<CMatrix>) = per_sample.into_iter().unzip();
    let rank_min = *ranks.iter().min().expect("non-empty sample set");
    let rank_max = *ranks.iter().max().expect("non-empty sample set");
    let constant_rank = rank_min == rank_max;

    let mut stacked = Vec::new();
    for k in &kernel_bases {
        for col in k.column_iter() {
            stacked.push(col.iter().map(|z| z.re).collect::<Vec<_>>());
            stacked.push(col.iter().map(|z| z.im).collect::<Vec<_>>());
        }
    }
    let span_basis = linalg::real_span_basis(&stacked, op.fiber_in(), tol);

    Ok(ConeReport {
        samples,
        ranks,
        rank_min,
        rank_max,
        constant_rank,
        rank: constant_rank.then_some(rank_min),
        kernel_bases,
        span_basis,
    })
}

/// Audit with the default sample count and rank tolerance, refusing
/// operators whose sampled rank varies.
pub fn require_constant_rank(op: &LinearOperator) -> Result<ConeReport> {
    let report = constant_rank_audit(op, 128, RANK_TOL)?;
    if !report.constant_rank {
        return Err(Error::NotConstantRank {
            name: op.name().to_string(),
            min: report.rank_min,
            max: report.rank_max,
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Cone membership by minimisation on the sphere.

#[derive(Debug, Clone)]
pub struct Membership {
    pub member: bool,
    /// Best direction found (unit vector); empty when the answer is trivial.
    pub witness: Vec<f64>,
    /// Best relative residual found; reported even when `member` is false.
    pub residual: f64,
}

fn normalize(v: &mut [f64]) {
    let n = linalg::norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Projected gradient descent with backtracking on the unit sphere.
fn sphere_descent(
    start: &[f64],
    objective: &dyn Fn(&[f64]) -> f64,
    gradient: &dyn Fn(&[f64]) -> Vec<f64>,
    iters: usize,
) -> (Vec<f64>, f64) {
    let mut x = start.to_vec();
    normalize(&mut x);
    let mut fx = objective(&x);
    let mut step: f64 = 1.0;
    for _ in 0..iters {
        let g = gradient(&x);
        let radial: f64 = g.iter().zip(&x).map(|(a, b)| a * b).sum();
        let tangent: Vec<f64> = g.iter().zip(&x).map(|(a, b)| a - radial * b).collect();
        let gn2: f64 = tangent.iter().map(|t| t * t).sum();
        if gn2.sqrt() < 1e-15 || fx < 1e-30 {
            break;
        }
        let mut accepted = false;
        step = (step * 2.0).min(1e6);
        for _ in 0..60 {
            let mut y: Vec<f64> = x.iter().zip(&tangent).map(|(a, t)| a - step * t).collect();
            normalize(&mut y);
            let fy = objective(&y);
            if fy <= fx - 1e-4 * step * gn2 {
                x = y;
                fx = fy;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (x, fx)
}

fn multistart(
    d: usize,
    objective: &(dyn Fn(&[f64]) -> f64 + Sync),
    gradient: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
) -> (Vec<f64>, f64) {
    let grid = sphere_samples(d, 256);
    let mut seeded: Vec<(f64, Vec<f64>)> = grid.into_iter().map(|x| (objective(&x), x)).collect();
    seeded.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut starts: Vec<Vec<f64>> = seeded.into_iter().take(8).map(|(_, x)| x).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0_2e);
    for _ in 0..32 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut v);
        starts.push(v);
    }
    starts
        .par_iter()
        .map(|s| sphere_descent(s, objective, gradient, 200))
        .collect::<Vec<_>>()
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one start")
}

/// Is `w` in the wave cone `union ker A(xi)`? Minimises `|A(xi) w| / |w|`
/// over the unit sphere.
pub fn wave_cone_membership(op: &LinearOperator, w: &[f64], tol: f64) -> Result<Membership> {
    if w.len() != op.fiber_in() {
        return Err(Error::DimensionMismatch {
            what: "wave cone vector",
            expected: op.fiber_in(),
            found: w.len(),
        });
    }
    let wn = linalg::norm(w);
    if wn == 0.0 {
        return Err(Error::InvalidInput(
            "wave cone test vector must be nonzero".into(),
        ));
    }
    let wv = CVector::from_iterator(w.len(), w.iter().map(|&x| Complex64::new(x / wn, 0.0)));
    let objective = |xi: &[f64]| (op.symbol_matrix(xi) * &wv).norm_squared();
    let gradient = |xi: &[f64]| {
        let aw = op.symbol_matrix(xi) * &wv;
        (0..op.dim())
            .map(|j| {
                let dw = op.symbol_derivative(xi, j) * &wv;
                2.0 * dw.dotc(&aw).re
            })
            .collect::<Vec<_>>()
    };
    let (witness, best) = multistart(op.dim(), &objective, &gradient);
    let residual = best.max(0.0).sqrt();
    Ok(Membership {
        member: residual < tol,
        witness,
        residual,
    })
}

fn image_distance(op: &LinearOperator, xi: &[f64], w: &CVector) -> f64 {
    let svd = Svd::new(&op.symbol_matrix(xi));
    let q = svd.range(RANK_TOL);
    if q.ncols() == 0 {
        return w.norm();
    }
    (w - &q * (q.adjoint() * w)).norm()
}

/// Is `w` in the image cone `union im B(xi)`?
pub fn image_cone_membership(op: &LinearOperator, w: &[f64], tol: f64) -> Result<Membership> {
    if w.len() != op.fiber_out() {
        return Err(Error::DimensionMismatch {
            what: "image cone vector",
            expected: op.fiber_out(),
            found: w.len(),
        });
    }
    let wn = linalg::norm(w);
    if wn == 0.0 {
        return Ok(Membership {
            member: true,
            witness: Vec::new(),
            residual: 0.0,
        });
    }
    let wv = CVector::from_iterator(w.len(), w.iter().map(|&x| Complex64::new(x / wn, 0.0)));
    let objective = |xi: &[f64]| image_distance(op, xi, &wv).powi(2);
    let gradient = |xi: &[f64]| {
        let h = 1e-6;
        (0..xi.len())
            .map(|j| {
                let mut p = xi.to_vec();
                let mut m = xi.to_vec();
                p[j] += h;
                m[j] -= h;
                (objective(&p) - objective(&m)) / (2.0 * h)
            })
            .collect::<Vec<_>>()
    };
    let (witness, best) = multistart(op.dim(), &objective, &gradient);
    let residual = best.max(0.0).sqrt();
    Ok(Membership {
        member: residual < tol,
        witness,
        residual,
    })
}

// ---------------------------------------------------------------------------
// Exactness of an annihilator / potential pair.

#[derive(Debug, Clone)]
pub struct ExactnessReport {
    pub samples: usize,
    pub max_gap: f64,
    pub worst_xi: Vec<f64>,
    pub dims_match: bool,
    pub passed: bool,
}

/// Checks `im B(xi) = ker A(xi)` on sampled directions through the sine of
/// the largest principal angle.
pub fn exactness_check(
    annihilator: &LinearOperator,
    potential: &LinearOperator,
    n_samples: usize,
    tol: f64,
) -> Result<ExactnessReport> {
    if potential.fiber_out() != annihilator.fiber_in() {
        return Err(Error::DimensionMismatch {
            what: "potential target fiber vs annihilator source fiber",
            expected: annihilator.fiber_in(),
            found: potential.fiber_out(),
        });
    }
    if potential.dim() != annihilator.dim() {
        return Err(Error::DimensionMismatch {
            what: "spatial dimension",
            expected: annihilator.dim(),
            found: potential.dim(),
        });
    }
    let samples = sphere_samples(annihilator.dim(), n_samples.max(1));
    let gaps: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|xi| {
            let ker = Svd::new(&annihilator.symbol_matrix(xi)).null_space(RANK_TOL);
            let im = Svd::new(&potential.symbol_matrix(xi)).range(RANK_TOL);
            let same_dim = ker.ncols() == im.ncols();
            (linalg::subspace_gap(&ker, &im), same_dim)
        })
        .collect();
    let mut max_gap = 0.0;
    let mut worst = 0;
    let mut dims_match = true;
    for (i, &(g, same)) in gaps.iter().enumerate() {
        dims_match &= same;
        if g > max_gap {
            max_gap = g;
            worst = i;
        }
    }
    Ok(ExactnessReport {
        samples: samples.len(),
        max_gap,
        worst_xi: samples[worst].clone(),
        dims_match,
        passed: dims_match && max_gap < tol,
    })
}
