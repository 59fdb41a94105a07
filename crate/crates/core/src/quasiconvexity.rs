//! `A`-quasiconvex envelopes through the periodic cell problem
//!
//! ```text
//! Q f(z) = inf { mean_T f(z + w) : w periodic, mean zero, A w = 0 }
//! ```
//!
//! The admissible fields are truncated to frequencies `0 < |xi|_inf <= K` and
//! parameterised by real coordinates on a real orthonormal basis of
//! `ker A(xi)` (the symbol is `(2 pi i)^k` times a real matrix, so its kernel
//! is the complexification of a real subspace):
//!
//! ```text
//! w(x) = sum_xi sum_j b_j(xi) (c_j cos 2 pi xi.x + s_j sin 2 pi xi.x)
//! ```
//!
//! Every such field is exactly `A`-free and mean zero, so the optimum is an
//! upper bound on the envelope.

use std::sync::Mutex;

use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrand::Integrand;
use crate::linalg::{norm, real_span_basis, Svd, RANK_TOL};
use crate::operator::{constant_rank_audit, require_constant_rank, LinearOperator};
use crate::spectral::{is_canonical, Spectrum, TorusField};

#[derive(Debug, Clone)]
struct CellMode {
    freq: Vec<i64>,
    /// Real orthonormal basis of `ker A(xi)`.
    basis: Vec<Vec<f64>>,
    offset: usize,
}

/// Truncated space of periodic, mean-zero, `A`-free fields on an `N^d` grid.
#[derive(Debug, Clone)]
pub struct CellSpace {
    n: usize,
    dim: usize,
    fiber: usize,
    k_max: usize,
    modes: Vec<CellMode>,
    n_params: usize,
}

impl CellSpace {
    pub fn new(op: &LinearOperator, n: usize, k_max: usize) -> Result<Self> {
        require_constant_rank(op)?;
        if k_max == 0 || 2 * k_max >= n {
            return Err(Error::InvalidInput(format!(
                "frequency cutoff {k_max} must satisfy 0 < 2K < N = {n}"
            )));
        }
        let (dim, fiber) = (op.dim(), op.fiber_in());
        let width = 2 * k_max + 1;
        let mut modes = Vec::new();
        let mut offset = 0;
        for lin in 0..width.pow(dim as u32) {
            let mut rest = lin;
            let mut freq = vec![0i64; dim];
            for a in (0..dim).rev() {
                freq[a] = (rest % width) as i64 - k_max as i64;
                rest /= width;
            }
            if !is_canonical(&freq) {
                continue;
            }
            let svd = Svd::new(&op.lattice_symbol(&freq, n));
            let kernel = svd.null_space(RANK_TOL);
            let mut parts = Vec::new();
            for col in kernel.column_iter() {
                parts.push(col.iter().map(|c| c.re).collect::<Vec<_>>());
                parts.push(col.iter().map(|c| c.im).collect::<Vec<_>>());
            }
            let basis = real_span_basis(&parts, fiber, 1e-8);
            if basis.is_empty() {
                continue;
            }
            let m = basis.len();
            modes.push(CellMode {
                freq,
                basis,
                offset,
            });
            offset += 2 * m;
        }
        Ok(CellSpace {
            n,
            dim,
            fiber,
            k_max,
            modes,
            n_params: offset,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }
    pub fn grid(&self) -> usize {
        self.n
    }
    pub fn k_max(&self) -> usize {
        self.k_max
    }
    pub fn fiber(&self) -> usize {
        self.fiber
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Field with the given reduced coordinates.
    pub fn field(&self, params: &[f64]) -> TorusField {
        let mut spec = Spectrum::zeros(self.n, self.dim, self.fiber);
        for mode in &self.modes {
            let mut coef = vec![Complex64::new(0.0, 0.0); self.fiber];
            for (j, b) in mode.basis.iter().enumerate() {
                let c = params[mode.offset + 2 * j];
                let s = params[mode.offset + 2 * j + 1];
                let a = Complex64::new(c, -s) * 0.5;
                for (k, bk) in b.iter().enumerate() {
                    coef[k] += a * bk;
                }
            }
            let neg: Vec<i64> = mode.freq.iter().map(|f| -f).collect();
            for (k, v) in coef.iter().enumerate() {
                spec.set(&mode.freq, k, *v);
                spec.set(&neg, k, v.conj());
            }
        }
        spec.to_field()
    }

    /// Coordinates of the orthogonal projection of `w` onto the space.
    pub fn coordinates(&self, w: &TorusField) -> Result<Vec<f64>> {
        if (w.n(), w.dim(), w.fiber()) != (self.n, self.dim, self.fiber) {
            return Err(Error::InvalidInput(
                "field does not match the cell space".into(),
            ));
        }
        Ok(self.coordinates_of_spectrum(&w.spectrum()))
    }

    fn coordinates_of_spectrum(&self, s: &Spectrum) -> Vec<f64> {
        let mut out = vec![0.0; self.n_params];
        for mode in &self.modes {
            for (j, b) in mode.basis.iter().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, bk) in b.iter().enumerate() {
                    acc += s.get(&mode.freq, k) * bk;
                }
                out[mode.offset + 2 * j] = 2.0 * acc.re;
                out[mode.offset + 2 * j + 1] = -2.0 * acc.im;
            }
        }
        out
    }

    /// Gradient of `params -> mean g(w(x))` given the field `G = grad g`.
    fn pull_back(&self, g: &TorusField) -> Vec<f64> {
        let s = g.spectrum();
        let mut out = vec![0.0; self.n_params];
        for mode in &self.modes {
            for (j, b) in mode.basis.iter().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, bk) in b.iter().enumerate() {
                    acc += s.get(&mode.freq, k) * bk;
                }
                out[mode.offset + 2 * j] = acc.re;
                out[mode.offset + 2 * j + 1] = -acc.im;
            }
        }
        out
    }
}

/// `mean_x f(z + w(x))` on the grid.
pub fn cell_energy_field(f: &Integrand, z: &[f64], w: &TorusField) -> f64 {
    let fiber = w.fiber();
    let total: f64 = w
        .values()
        .par_chunks(fiber)
        .map(|v| {
            let p: Vec<f64> = v.iter().zip(z).map(|(a, b)| a + b).collect();
            f.value(&p)
        })
        .sum();
    total / w.points() as f64
}

/// Cell energy at reduced coordinates.
pub fn cell_energy(space: &CellSpace, f: &Integrand, z: &[f64], params: &[f64]) -> f64 {
    cell_energy_field(f, z, &space.field(params))
}

/// Cell energy and its gradient with respect to the reduced coordinates.
pub fn cell_energy_gradient(
    space: &CellSpace,
    f: &Integrand,
    z: &[f64],
    params: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if !f.is_differentiable() {
        return Err(Error::NonDifferentiable(f.to_string()));
    }
    let w = space.field(params);
    let fiber = w.fiber();
    let mut grad_values = vec![0.0; w.values().len()];
    let total: f64 = grad_values
        .par_chunks_mut(fiber)
        .zip(w.values().par_chunks(fiber))
        .map(|(g, v)| {
            let p: Vec<f64> = v.iter().zip(z).map(|(a, b)| a + b).collect();
            f.gradient(&p, g)
        })
        .sum();
    let g = TorusField::new(w.n(), w.dim(), fiber, grad_values)?;
    Ok((total / w.points() as f64, space.pull_back(&g)))
}

/// Settings of the envelope optimizer.
#[derive(Debug, Clone)]
pub struct EnvelopeConfig {
    pub k_max: usize,
    pub grid: usize,
    pub restarts: usize,
    pub iters: u64,
    /// Smoothing parameters used in turn for non-differentiable integrands.
    pub smoothing_schedule: Vec<f64>,
    /// Root-mean-square size of the random initial fields.
    pub init_amplitude: f64,
    pub seed: u64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        EnvelopeConfig {
            k_max: 8,
            grid: 32,
            restarts: 8,
            iters: 500,
            smoothing_schedule: vec![1e-1, 1e-2, 1e-3],
            init_amplitude: 0.5,
            seed: 0,
        }
    }
}

/// Outcome of [`quasiconvex_envelope`].
#[derive(Debug, Clone)]
pub struct EnvelopeResult {
    pub z: Vec<f64>,
    /// Cell energy of `field` under the unsmoothed integrand: an upper bound
    /// for the envelope over the truncated class.
    pub value: f64,
    pub field: TorusField,
    pub params: Vec<f64>,
    /// Improving energies of the winning restart.
    pub history: Vec<f64>,
    pub k_max: usize,
    pub restarts: usize,
    /// `(smoothing, smoothed optimum)` of the winning restart.
    pub schedule: Vec<(f64, f64)>,
    /// Linear extrapolation of the schedule to zero smoothing.
    pub extrapolated: Option<f64>,
}

struct CellProblem<'a> {
    space: &'a CellSpace,
    f: &'a Integrand,
    z: &'a [f64],
    best: Mutex<(f64, Vec<f64>, Vec<f64>)>,
}

impl CellProblem<'_> {
    fn record(&self, value: f64, p: &[f64]) {
        let mut best = self.best.lock().expect("poisoned");
        if value.is_finite() && value < best.0 {
            best.0 = value;
            best.1 = p.to_vec();
            best.2.push(value);
        }
    }
}

impl CostFunction for CellProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let v = cell_energy(self.space, self.f, self.z, p);
        self.record(v, p);
        Ok(v)
    }
}

impl Gradient for CellProblem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let (v, g) = cell_energy_gradient(self.space, self.f, self.z, p)?;
        self.record(v, p);
        Ok(g)
    }
}

/// Minimises the smoothed cell energy from `start`; returns the best point
/// seen and the trace of improvements.
fn descend(
    space: &CellSpace,
    f: &Integrand,
    z: &[f64],
    start: Vec<f64>,
    iters: u64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let v0 = cell_energy(space, f, z, &start);
    if !v0.is_finite() {
        return Err(Error::OptimizerDiverged(format!("initial energy {v0}")));
    }
    let problem = CellProblem {
        space,
        f,
        z,
        best: Mutex::new((v0, start.clone(), vec![v0])),
    };
    if space.n_params() > 0 {
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
            .with_tolerance_grad(1e-12)
            .and_then(|s| s.with_tolerance_cost(1e-15))
            .map_err(|e| Error::OptimizerDiverged(e.to_string()))?;
        let shared = &problem;
        // Line-search failures near convergence end the run; the best point
        // seen so far is kept either way.
        let _ = Executor::new(Wrapper(shared), solver)
            .configure(|state| state.param(start).max_iters(iters))
            .run();
    }
    let (v, p, hist) = problem.best.into_inner().expect("poisoned");
    if !v.is_finite() {
        return Err(Error::OptimizerDiverged(format!("energy became {v}")));
    }
    Ok((v, p, hist))
}

struct Wrapper<'a, 'b>(&'a CellProblem<'b>);

impl CostFunction for Wrapper<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        self.0.cost(p)
    }
}

impl Gradient for Wrapper<'_, '_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        self.0.gradient(p)
    }
}

struct RestartOutcome {
    value: f64,
    params: Vec<f64>,
    history: Vec<f64>,
    schedule: Vec<(f64, f64)>,
}

/// Upper bound on `Q_A f(z)` over the truncated field class.
///
/// Restart 0 starts from the zero field (or from `warm_start`, projected
/// onto the current space); the others from random fields. Integrands with
/// kinks are optimised along the smoothing schedule, each stage warm-started
/// from the previous one, and the final field is scored with the unsmoothed
/// integrand. The zero field is always a candidate, so `value <= f(z)`.
pub fn quasiconvex_envelope(
    op: &LinearOperator,
    f: &Integrand,
    z: &[f64],
    config: &EnvelopeConfig,
    warm_start: Option<&EnvelopeResult>,
) -> Result<EnvelopeResult> {
    if z.len() != op.fiber_in() {
        return Err(Error::DimensionMismatch {
            what: "envelope base point",
            expected: op.fiber_in(),
            found: z.len(),
        });
    }
    f.validate(z.len())?;
    let space = CellSpace::new(op, config.grid, config.k_max)?;
    let schedule: Vec<f64> = if f.is_differentiable() {
        vec![f.smoothing()]
    } else if config.smoothing_schedule.is_empty() {
        return Err(Error::NonDifferentiable(f.to_string()));
    } else {
        config.smoothing_schedule.clone()
    };
    let np = space.n_params();
    let restarts = config.restarts.max(1);
    let first = match warm_start {
        Some(prev) if prev.field.n() == config.grid => space.coordinates(&prev.field)?,
        _ => vec![0.0; np],
    };
    let amp = config.init_amplitude * (2.0 / np.max(1) as f64).sqrt();
    let starts: Vec<Vec<f64>> = (0..restarts)
        .map(|r| {
            if r == 0 {
                first.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(r as u64));
                (0..np)
                    .map(|_| amp * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        })
        .collect();

    let outcomes: Vec<Result<RestartOutcome>> = starts
        .into_par_iter()
        .map(|start| {
            let mut params = start;
            let mut history = Vec::new();
            let mut trace = Vec::new();
            for &s in &schedule {
                let g = f.with_smoothing(s);
                let (v, p, h) = descend(&space, &g, z, params, config.iters)?;
                params = p;
                history.extend(h);
                trace.push((s, v));
            }
            let value = cell_energy(&space, &f.with_smoothing(0.0), z, &params);
            Ok(RestartOutcome {
                value,
                params,
                history,
                schedule: trace,
            })
        })
        .collect();

    let mut best: Option<RestartOutcome> = None;
    for o in outcomes {
        let o = o?;
        if best.as_ref().is_none_or(|b| o.value < b.value) {
            best = Some(o);
        }
    }
    let mut best = best.expect("at least one restart");
    let fz = f.with_smoothing(0.0).value(z);
    if best.value > fz {
        best.value = fz;
        best.params = vec![0.0; np];
    }
    let extrapolated = if best.schedule.len() >= 2 {
        let (e1, v1) = best.schedule[best.schedule.len() - 2];
        let (e2, v2) = best.schedule[best.schedule.len() - 1];
        Some(v2 - (v1 - v2) * e2 / (e1 - e2))
    } else {
        None
    };
    Ok(EnvelopeResult {
        z: z.to_vec(),
        value: best.value,
        field: space.field(&best.params),
        params: best.params,
        history: best.history,
        k_max: config.k_max,
        restarts,
        schedule: best.schedule,
        extrapolated,
    })
}

/// One midpoint-convexity violation along a segment `[z, z + P]`.
#[derive(Debug, Clone)]
pub struct ConvexityViolation {
    pub base: Vec<f64>,
    pub direction: Vec<f64>,
    /// `h(z + P/2) - (h(z) + h(z + P))/2`
    pub excess: f64,
}

#[derive(Debug, Clone)]
pub struct LambdaConvexityReport {
    pub lines: usize,
    pub violations: Vec<ConvexityViolation>,
    pub max_excess: f64,
}

impl LambdaConvexityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Midpoint convexity of `h` along the given segments `(z, P)`.
pub fn lambda_convexity_on_lines(
    h: &(dyn Fn(&[f64]) -> f64 + Sync),
    lines: &[(Vec<f64>, Vec<f64>)],
    tol: f64,
) -> LambdaConvexityReport {
    let results: Vec<(f64, usize)> = lines
        .par_iter()
        .enumerate()
        .map(|(i, (z, p))| {
            let mid: Vec<f64> = z.iter().zip(p).map(|(a, b)| a + 0.5 * b).collect();
            let end: Vec<f64> = z.iter().zip(p).map(|(a, b)| a + b).collect();
            (h(&mid) - 0.5 * (h(z) + h(&end)), i)
        })
        .collect();
    let mut violations = Vec::new();
    let mut max_excess = f64::NEG_INFINITY;
    for (excess, i) in results {
        max_excess = max_excess.max(excess);
        if excess > tol {
            violations.push(ConvexityViolation {
                base: lines[i].0.clone(),
                direction: lines[i].1.clone(),
                excess,
            });
        }
    }
    LambdaConvexityReport {
        lines: lines.len(),
        violations,
        max_excess,
    }
}

/// Random segments `z + t P` with `P` drawn from the wave cone (a random
/// vector of a sampled kernel), `|z| <= radius`, `|P| <= 2 radius`.
pub fn wave_cone_lines(
    op: &LinearOperator,
    n_lines: usize,
    radius: f64,
    seed: u64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let audit = constant_rank_audit(op, 64, RANK_TOL)?;
    let fiber = op.fiber_in();
    let kernels: Vec<Vec<Vec<f64>>> = audit
        .kernel_bases
        .iter()
        .map(|k| {
            let mut parts = Vec::new();
            for col in k.column_iter() {
                parts.push(col.iter().map(|c| c.re).collect::<Vec<_>>());
                parts.push(col.iter().map(|c| c.im).collect::<Vec<_>>());
            }
            real_span_basis(&parts, fiber, 1e-8)
        })
        .filter(|b| !b.is_empty())
        .collect();
    if kernels.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(n_lines);
    for _ in 0..n_lines {
        let basis = &kernels[rng.random_range(0..kernels.len())];
        let mut p = vec![0.0; fiber];
        for b in basis {
            let c: f64 = rng.sample(StandardNormal);
            for (a, v) in p.iter_mut().zip(b) {
                *a += c * v;
            }
        }
        let np = norm(&p).max(f64::MIN_POSITIVE);
        let len = 2.0 * radius * rng.random::<f64>();
        p.iter_mut().for_each(|v| *v *= len / np);
        let z: Vec<f64> = (0..fiber)
            .map(|_| radius * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        lines.push((z, p));
    }
    Ok(lines)
}

/// Samples `n_lines` wave-cone segments and checks midpoint convexity.
pub fn lambda_convexity_check(
    op: &LinearOperator,
    h: &(dyn Fn(&[f64]) -> f64 + Sync),
    n_lines: usize,
    radius: f64,
    tol: f64,
    seed: u64,
) -> Result<LambdaConvexityReport> {
    let lines = wave_cone_lines(op, n_lines, radius, seed)?;
    Ok(lambda_convexity_on_lines(h, &lines, tol))
}

/// Data of the `L^1` coercivity bound for near-optimal cell fields.
#[derive(Debug, Clone)]
pub struct CoercivityReport {
    /// `||z + w||_{L^1}`
    pub l1: f64,
    /// `(C / eps) (1 + |z| + delta)`
    pub bound: f64,
    pub constant: f64,
    /// Smallest `C` for which the bound holds.
    pub implied_constant: f64,
    pub holds: bool,
}

/// Checks `||z + w||_1 <= (C/eps)(1 + |z| + delta)` for a cell field `w`
/// that is `delta`-optimal for `f + eps |.|`. Without an explicit `C` the
/// constant `2M + 1` from the linear growth constant `M` of `f` is used.
pub fn coercivity_bound_check(
    f: &Integrand,
    eps: f64,
    z: &[f64],
    w: &TorusField,
    delta: f64,
    constant: Option<f64>,
) -> Result<CoercivityReport> {
    if eps <= 0.0 || delta < 0.0 {
        return Err(Error::InvalidInput("need eps > 0 and delta >= 0".into()));
    }
    let c = match constant {
        Some(c) => c,
        None => {
            2.0 * f.growth_constant().ok_or_else(|| {
                Error::InvalidInput(format!("`{f}` has no linear growth constant"))
            })? + 1.0
        }
    };
    let l1 = w.shift(z).l1();
    let scale = 1.0 + norm(z) + delta;
    let bound = c / eps * scale;
    Ok(CoercivityReport {
        l1,
        bound,
        constant: c,
        implied_constant: eps * l1 / scale,
        holds: l1 <= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery;

    #[test]
    fn zero_field_energy_is_f_at_base() {
        let op = gallery::divergence(2);
        let space = CellSpace::new(&op, 16, 3).unwrap();
        let f = Integrand::area();
        let z = [0.3, -1.2];
        let e = cell_energy(&space, &f, &z, &vec![0.0; space.n_params()]);
        assert!((e - f.value(&z)).abs() < 1e-14);
    }

    #[test]
    fn quadratic_energy_adds_mean_square() {
        let op = gallery::divergence(2);
        let space = CellSpace::new(&op, 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..space.n_params())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let w = space.field(&p);
        let z = [0.5, 2.0];
        let e = cell_energy(&space, &Integrand::quadratic(), &z, &p);
        let expected = 4.25 + w.rms().powi(2);
        assert!((e - expected).abs() < 1e-10 * expected);
        // mean |w|^2 = |p|^2 / 2 for orthonormal bases
        assert!((w.rms().powi(2) - p.iter().map(|v| v * v).sum::<f64>() / 2.0).abs() < 1e-10);
    }

    #[test]
    fn cell_fields_are_free_and_mean_zero() {
        for op in [
            gallery::divergence(2),
            gallery::curl_2d(),
            gallery::saint_venant_2d(),
        ] {
            let space = CellSpace::new(&op, 16, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let p: Vec<f64> = (0..space.n_params())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let w = space.field(&p);
            let aw = crate::spectral::apply_operator(&op, &w).unwrap();
            assert!(aw.max_abs() < 1e-9 * w.max_abs(), "{}", op.name());
            assert!(w.mean().iter().all(|m| m.abs() < 1e-12));
            let back = space.coordinates(&w).unwrap();
            let gap = back
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(gap < 1e-10);
        }
    }

    #[test]
    fn elliptic_space_is_empty() {
        let space = CellSpace::new(&gallery::laplacian(2), 16, 4).unwrap();
        assert_eq!(space.n_params(), 0);
    }

    #[test]
    fn gradient_requires_smoothing() {
        let op = gallery::divergence(2);
        let space = CellSpace::new(&op, 8, 2).unwrap();
        let p = vec![0.0; space.n_params()];
        assert!(matches!(
            cell_energy_gradient(&space, &Integrand::norm(), &[0.0, 0.0], &p),
            Err(Error::NonDifferentiable(_))
        ));
        assert!(cell_energy_gradient(
            &space,
            &Integrand::norm().with_smoothing(0.1),
            &[0.0, 0.0],
            &p
        )
        .is_ok());
    }

    #[test]
    fn convex_integrand_envelope_is_itself() {
        let op = gallery::divergence(2);
        let cfg = EnvelopeConfig {
            k_max: 3,
            grid: 16,
            restarts: 3,
            iters: 100,
            ..EnvelopeConfig::default()
        };
        let z = [0.7, -0.4];
        let r = quasiconvex_envelope(&op, &Integrand::area(), &z, &cfg, None).unwrap();
        let fz = Integrand::area().value(&z);
        assert!(r.value <= fz + 1e-15);
        assert!(r.value >= fz - 1e-12, "{} vs {fz}", r.value);
    }

    #[test]
    fn convexity_check_examples() {
        let op = gallery::divergence(2);
        let convex = |z: &[f64]| Integrand::area().value(z);
        let r = lambda_convexity_check(&op, &convex, 200, 2.0, 1e-12, 7).unwrap();
        assert!(r.passed());
        let well = |z: &[f64]| Integrand::radial_double_well().value(z);
        let r = lambda_convexity_on_lines(&well, &[(vec![-1.0, 0.0], vec![2.0, 0.0])], 1e-3);
        assert_eq!(r.violations.len(), 1);
        assert!((r.max_excess - 1.0).abs() < 1e-14);
    }

    #[test]
    fn coercivity_examples() {
        let f = Integrand::norm();
        let w = TorusField::zeros(8, 2, 2).unwrap();
        let r = coercivity_bound_check(&f, 0.5, &[3.0, 4.0], &w, 0.0, None).unwrap();
        assert!(r.holds);
        assert!((r.l1 - 5.0).abs() < 1e-12);
        let huge = TorusField::constant(8, 2, &[1e6, 0.0]).unwrap();
        let r = coercivity_bound_check(&f, 0.5, &[0.0, 0.0], &huge, 0.0, None).unwrap();
        assert!(!r.holds);
    }
}
