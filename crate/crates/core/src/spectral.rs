//! Fields on the periodic unit torus sampled on a uniform `N^d` grid, and
//! the Fourier-multiplier calculus built on operator symbols: application,
//! the representative `T[u]`, the `A`-free part, potentials and Bessel
//! weighted quadratic norms.
//!
//! Conventions: grid points `x = i/N`, normalised coefficients
//! `u_hat(xi) = N^{-d} sum_x u(x) e^{-2 pi i x.xi}` on the integer lattice
//! `xi in {-N/2, ..., N/2 - 1}^d`. The factor `2 pi` of the exponential lives
//! in the `(2 pi i)^k` of the symbol.

use std::collections::HashMap;
use std::sync::{Arc, LazyLock, Mutex};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, CVector, Svd, RANK_TOL};
use crate::operator::{require_constant_rank, LinearOperator};

// ---------------------------------------------------------------------------
// FFT plans.

static PLANS: LazyLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut plans = PLANS.lock().expect("plan registry poisoned");
    plans
        .entry((n, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

/// Unnormalised in-place `d`-dimensional transform of a contiguous
/// row-major `n^d` buffer.
fn fft_nd(buf: &mut [Complex64], n: usize, d: usize, inverse: bool) {
    let fft = plan(n, inverse);
    let total = buf.len();
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for axis in 0..d {
        let stride = n.pow((d - 1 - axis) as u32);
        let block = stride * n;
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for (k, l) in line.iter_mut().enumerate() {
                    *l = buf[base + k * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (k, l) in line.iter().enumerate() {
                    buf[base + k * stride] = *l;
                }
            }
        }
    }
}

/// Signed lattice frequency of a grid index.
#[inline]
pub fn signed_frequency(i: usize, n: usize) -> i64 {
    if i < n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

fn grid_multi_index(mut idx: usize, n: usize, d: usize) -> Vec<usize> {
    let mut out = vec![0; d];
    for a in (0..d).rev() {
        out[a] = idx % n;
        idx /= n;
    }
    out
}

fn flat_index(multi: &[usize], n: usize) -> usize {
    multi.iter().fold(0, |acc, &i| acc * n + i)
}

// ---------------------------------------------------------------------------
// Fields.

/// Real `R^fiber`-valued field on the unit torus `T^d`, sampled at
/// `x = i/N`. Values are stored grid-point major with the fiber index
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusField {
    n: usize,
    dim: usize,
    fiber: usize,
    values: Vec<f64>,
}

impl TorusField {
    pub fn new(n: usize, dim: usize, fiber: usize, values: Vec<f64>) -> Result<Self> {
        if !n.is_power_of_two() || n < 2 {
            return Err(Error::InvalidInput(format!(
                "grid size {n} must be a power of two >= 2"
            )));
        }
        if dim == 0 || fiber == 0 {
            return Err(Error::InvalidInput(
                "dimension and fiber must be positive".into(),
            ));
        }
        let expected = n.pow(dim as u32) * fiber;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "field value count",
                expected,
                found: values.len(),
            });
        }
        Ok(TorusField {
            n,
            dim,
            fiber,
            values,
        })
    }

    pub fn zeros(n: usize, dim: usize, fiber: usize) -> Result<Self> {
        Self::new(n, dim, fiber, vec![0.0; n.pow(dim as u32) * fiber])
    }

    pub fn constant(n: usize, dim: usize, c: &[f64]) -> Result<Self> {
        let points = n.pow(dim as u32);
        let values = (0..points).flat_map(|_| c.iter().copied()).collect();
        Self::new(n, dim, c.len(), values)
    }

    /// Sample `f(x, out)` at every grid point.
    pub fn from_fn(
        n: usize,
        dim: usize,
        fiber: usize,
        f: impl Fn(&[f64], &mut [f64]) + Sync,
    ) -> Result<Self> {
        let mut field = Self::zeros(n, dim, fiber)?;
        field
            .values
            .par_chunks_mut(fiber)
            .enumerate()
            .for_each(|(i, out)| {
                let x: Vec<f64> = grid_multi_index(i, n, dim)
                    .into_iter()
                    .map(|k| k as f64 / n as f64)
                    .collect();
                f(&x, out);
            });
        Ok(field)
    }

    /// Random field whose Fourier coefficients are independent Gaussians on
    /// `0 < |xi|_inf <= kmax` (Hermitian-symmetric), plus a random mean.
    /// Identical across grid sizes `N > 2 kmax` for the same RNG stream.
    pub fn random_bandlimited<R: Rng + ?Sized>(
        n: usize,
        dim: usize,
        fiber: usize,
        kmax: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if 2 * kmax >= n {
            return Err(Error::InvalidInput(format!(
                "band limit {kmax} must be below the Nyquist frequency of N={n}"
            )));
        }
        let mut spec = Spectrum::zeros(n, dim, fiber);
        for c in 0..fiber {
            let mean: f64 = rng.sample(StandardNormal);
            spec.set(&vec![0; dim], c, Complex64::new(mean, 0.0));
        }
        let width = 2 * kmax + 1;
        for lin in 0..width.pow(dim as u32) {
            let freq: Vec<i64> = grid_multi_index(lin, width, dim)
                .into_iter()
                .map(|k| k as i64 - kmax as i64)
                .collect();
            if !is_canonical(&freq) {
                continue;
            }
            for c in 0..fiber {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                let z = Complex64::new(re, im) * 0.5;
                spec.set(&freq, c, z);
                let neg: Vec<i64> = freq.iter().map(|f| -f).collect();
                spec.set(&neg, c, z.conj());
            }
        }
        Ok(spec.to_field())
    }

    /// Independent standard normal values at every grid point.
    pub fn random_white<R: Rng + ?Sized>(
        n: usize,
        dim: usize,
        fiber: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let len = n.pow(dim as u32) * fiber;
        let values = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(n, dim, fiber, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn fiber(&self) -> usize {
        self.fiber
    }
    pub fn points(&self) -> usize {
        self.n.pow(self.dim as u32)
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, point: usize) -> &[f64] {
        &self.values[point * self.fiber..(point + 1) * self.fiber]
    }

    /// Coordinates of grid point `point`.
    pub fn coordinates(&self, point: usize) -> Vec<f64> {
        grid_multi_index(point, self.n, self.dim)
            .into_iter()
            .map(|k| k as f64 / self.n as f64)
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.fiber];
        for chunk in self.values.chunks(self.fiber) {
            for (a, b) in m.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        let p = self.points() as f64;
        m.iter_mut().for_each(|v| *v /= p);
        m
    }

    /// Quadratic mean `(mean |u|^2)^{1/2}`.
    pub fn rms(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.points() as f64).sqrt()
    }

    /// Mean of `|u|` (the `L^1` norm on the unit torus).
    pub fn l1(&self) -> f64 {
        self.values
            .chunks(self.fiber)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / self.points() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_compatible(&self, other: &TorusField) -> Result<()> {
        if (self.n, self.dim, self.fiber) != (other.n, other.dim, other.fiber) {
            return Err(Error::InvalidInput(format!(
                "incompatible fields: (N={}, d={}, fiber={}) vs (N={}, d={}, fiber={})",
                self.n, self.dim, self.fiber, other.n, other.dim, other.fiber
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &TorusField) -> Result<TorusField> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.with_values(values))
    }

    pub fn sub(&self, other: &TorusField) -> Result<TorusField> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(self.with_values(values))
    }

    pub fn scale(&self, s: f64) -> TorusField {
        self.with_values(self.values.iter().map(|v| v * s).collect())
    }

    /// Adds a constant vector at every point.
    pub fn shift(&self, c: &[f64]) -> TorusField {
        let mut out = self.clone();
        for chunk in out.values.chunks_mut(self.fiber) {
            for (v, s) in chunk.iter_mut().zip(c) {
                *v += s;
            }
        }
        out
    }

    fn with_values(&self, values: Vec<f64>) -> TorusField {
        TorusField {
            n: self.n,
            dim: self.dim,
            fiber: self.fiber,
            values,
        }
    }

    /// Normalised Fourier coefficients.
    pub fn spectrum(&self) -> Spectrum {
        let points = self.points();
        let scale = 1.0 / points as f64;
        let mut data = vec![Complex64::new(0.0, 0.0); points * self.fiber];
        let comps: Vec<Vec<Complex64>> = (0..self.fiber)
            .into_par_iter()
            .map(|c| {
                let mut buf: Vec<Complex64> = (0..points)
                    .map(|p| Complex64::new(self.values[p * self.fiber + c], 0.0))
                    .collect();
                fft_nd(&mut buf, self.n, self.dim, false);
                buf
            })
            .collect();
        for (c, buf) in comps.into_iter().enumerate() {
            for (p, z) in buf.into_iter().enumerate() {
                data[p * self.fiber + c] = z * scale;
            }
        }
        Spectrum {
            n: self.n,
            dim: self.dim,
            fiber: self.fiber,
            data,
        }
    }

    /// Values with every Fourier mode that has a Nyquist component removed.
    pub fn without_nyquist(&self) -> TorusField {
        let mut s = self.spectrum();
        let n = self.n;
        for p in 0..s.points() {
            if grid_multi_index(p, n, self.dim).contains(&(n / 2)) {
                for c in 0..self.fiber {
                    s.data[p * self.fiber + c] = Complex64::new(0.0, 0.0);
                }
            }
        }
        s.to_field()
    }
}

/// Normalised Fourier coefficients of a [`TorusField`], same layout.
#[derive(Debug, Clone)]
pub struct Spectrum {
    n: usize,
    dim: usize,
    fiber: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(n: usize, dim: usize, fiber: usize) -> Self {
        Spectrum {
            n,
            dim,
            fiber,
            data: vec![Complex64::new(0.0, 0.0); n.pow(dim as u32) * fiber],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn fiber(&self) -> usize {
        self.fiber
    }
    pub fn points(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Signed frequency of a grid slot.
    pub fn frequency(&self, point: usize) -> Vec<i64> {
        grid_multi_index(point, self.n, self.dim)
            .into_iter()
            .map(|i| signed_frequency(i, self.n))
            .collect()
    }

    pub fn slot(&self, freq: &[i64]) -> usize {
        let n = self.n as i64;
        let multi: Vec<usize> = freq.iter().map(|&f| f.rem_euclid(n) as usize).collect();
        flat_index(&multi, self.n)
    }

    pub fn coefficient(&self, point: usize) -> &[Complex64] {
        &self.data[point * self.fiber..(point + 1) * self.fiber]
    }

    pub fn coefficient_mut(&mut self, point: usize) -> &mut [Complex64] {
        &mut self.data[point * self.fiber..(point + 1) * self.fiber]
    }

    pub fn get(&self, freq: &[i64], c: usize) -> Complex64 {
        self.data[self.slot(freq) * self.fiber + c]
    }

    pub fn set(&mut self, freq: &[i64], c: usize, z: Complex64) {
        let s = self.slot(freq);
        self.data[s * self.fiber + c] = z;
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Inverse transform; imaginary round-off is discarded.
    pub fn to_field(&self) -> TorusField {
        let points = self.points();
        let comps: Vec<Vec<Complex64>> = (0..self.fiber)
            .into_par_iter()
            .map(|c| {
                let mut buf: Vec<Complex64> =
                    (0..points).map(|p| self.data[p * self.fiber + c]).collect();
                fft_nd(&mut buf, self.n, self.dim, true);
                buf
            })
            .collect();
        let mut values = vec![0.0; points * self.fiber];
        for (c, buf) in comps.into_iter().enumerate() {
            for (p, z) in buf.into_iter().enumerate() {
                values[p * self.fiber + c] = z.re;
            }
        }
        TorusField {
            n: self.n,
            dim: self.dim,
            fiber: self.fiber,
            values,
        }
    }

    /// Apply a per-frequency matrix multiplier producing `out_fiber`
    /// components; `None` maps the frequency to zero.
    fn map_frequencies(
        &self,
        out_fiber: usize,
        multiplier: impl Fn(&[i64]) -> Option<CMatrix> + Sync,
    ) -> Spectrum {
        let mut out = Spectrum::zeros(self.n, self.dim, out_fiber);
        out.data
            .par_chunks_mut(out_fiber)
            .enumerate()
            .for_each(|(p, dst)| {
                let freq = self.frequency(p);
                if let Some(m) = multiplier(&freq) {
                    let src = CVector::from_column_slice(self.coefficient(p));
                    let r = m * src;
                    dst.copy_from_slice(r.as_slice());
                }
            });
        out
    }
}

/// First nonzero component positive: one representative of each `{xi, -xi}`.
pub(crate) fn is_canonical(freq: &[i64]) -> bool {
    match freq.iter().find(|&&f| f != 0) {
        Some(&f) => f > 0,
        None => false,
    }
}

// ---------------------------------------------------------------------------
// Operator calculus.

fn check_fiber(op: &LinearOperator, u: &TorusField) -> Result<()> {
    if u.fiber() != op.fiber_in() {
        return Err(Error::DimensionMismatch {
            what: "field fiber vs operator source fiber",
            expected: op.fiber_in(),
            found: u.fiber(),
        });
    }
    if u.dim() != op.dim() {
        return Err(Error::DimensionMismatch {
            what: "field dimension vs operator dimension",
            expected: op.dim(),
            found: u.dim(),
        });
    }
    Ok(())
}

fn is_zero(freq: &[i64]) -> bool {
    freq.iter().all(|&f| f == 0)
}

/// `A u` computed frequency-wise.
pub fn apply_operator(op: &LinearOperator, u: &TorusField) -> Result<TorusField> {
    check_fiber(op, u)?;
    Ok(apply_spectrum(op, &u.spectrum()).to_field())
}

pub(crate) fn apply_spectrum(op: &LinearOperator, s: &Spectrum) -> Spectrum {
    let n = s.n();
    s.map_frequencies(op.fiber_out(), |freq| {
        if is_zero(freq) {
            None
        } else {
            Some(op.lattice_symbol(freq, n))
        }
    })
}

/// Representative `T[u]` computed both as `pi(xi) u_hat(xi)` and as
/// `A(xi)^+ (A u)^(xi)`; returns `(projector_form, pseudoinverse_form)`.
pub fn representative_forms(
    op: &LinearOperator,
    u: &TorusField,
) -> Result<(TorusField, TorusField)> {
    check_fiber(op, u)?;
    require_constant_rank(op)?;
    let s = u.spectrum();
    let n = u.n();
    let au = apply_spectrum(op, &s);
    let fiber = op.fiber_in();
    let mut proj = Spectrum::zeros(n, u.dim(), fiber);
    let mut pinv = Spectrum::zeros(n, u.dim(), fiber);
    let results: Vec<(Vec<Complex64>, Vec<Complex64>)> = (0..s.points())
        .into_par_iter()
        .map(|p| {
            let freq = s.frequency(p);
            if is_zero(&freq) {
                return (
                    vec![Complex64::new(0.0, 0.0); fiber],
                    vec![Complex64::new(0.0, 0.0); fiber],
                );
            }
            let svd = Svd::new(&op.lattice_symbol(&freq, n));
            let rows = svd.row_space(RANK_TOL);
            let uh = CVector::from_column_slice(s.coefficient(p));
            let a = &rows * (rows.adjoint() * &uh);
            let ah = CVector::from_column_slice(au.coefficient(p));
            let b = svd.pseudoinverse(RANK_TOL) * ah;
            (a.as_slice().to_vec(), b.as_slice().to_vec())
        })
        .collect();
    for (p, (a, b)) in results.into_iter().enumerate() {
        proj.coefficient_mut(p).copy_from_slice(&a);
        pinv.coefficient_mut(p).copy_from_slice(&b);
    }
    Ok((proj.to_field(), pinv.to_field()))
}

/// Threshold on the disagreement between the two representative formulas,
/// relative to the field size.
pub const REPRESENTATIVE_AGREEMENT: f64 = 1e-10;

/// `T[u]`: mean-zero field with `A T[u] = A u`.
pub fn a_representative(op: &LinearOperator, u: &TorusField) -> Result<TorusField> {
    let (proj, pinv) = representative_forms(op, u)?;
    let scale = u.max_abs().max(f64::MIN_POSITIVE);
    let gap = proj.sub(&pinv)?.max_abs() / scale;
    if gap > REPRESENTATIVE_AGREEMENT {
        return Err(Error::FormulaMismatch { gap });
    }
    Ok(proj)
}

/// `u = mean + T[u] + z` with `z` mean-zero and `A`-free.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub mean: Vec<f64>,
    pub representative: TorusField,
    pub afree: TorusField,
}

pub fn decompose(op: &LinearOperator, u: &TorusField) -> Result<Decomposition> {
    let representative = a_representative(op, u)?;
    let mean = u.mean();
    let afree = u
        .sub(&representative)?
        .shift(&mean.iter().map(|m| -m).collect::<Vec<_>>());
    Ok(Decomposition {
        mean,
        representative,
        afree,
    })
}

/// `z = u - mean(u) - T[u]`.
pub fn afree_part(op: &LinearOperator, u: &TorusField) -> Result<TorusField> {
    Ok(decompose(op, u)?.afree)
}

/// Relative per-frequency residual accepted by [`potential_solve`].
pub const POTENTIAL_RANGE_TOL: f64 = 1e-8;

/// Minimal-norm potential `u` with `B u = z`, frequency-wise
/// `u_hat = B(xi)^+ z_hat`.
pub fn potential_solve(potential: &LinearOperator, z: &TorusField) -> Result<TorusField> {
    if z.fiber() != potential.fiber_out() {
        return Err(Error::DimensionMismatch {
            what: "field fiber vs potential target fiber",
            expected: potential.fiber_out(),
            found: z.fiber(),
        });
    }
    if z.dim() != potential.dim() {
        return Err(Error::DimensionMismatch {
            what: "field dimension vs operator dimension",
            expected: potential.dim(),
            found: z.dim(),
        });
    }
    let s = z.spectrum();
    let n = z.n();
    let scale = s
        .data()
        .iter()
        .fold(0.0f64, |m, c| m.max(c.norm()))
        .max(f64::MIN_POSITIVE);
    let fiber = potential.fiber_in();
    let solved: Vec<(Vec<Complex64>, f64)> = (0..s.points())
        .into_par_iter()
        .map(|p| {
            let freq = s.frequency(p);
            let zh = CVector::from_column_slice(s.coefficient(p));
            if is_zero(&freq) {
                return (vec![Complex64::new(0.0, 0.0); fiber], zh.norm());
            }
            let b = potential.lattice_symbol(&freq, n);
            let uh = pseudo(&b) * &zh;
            let residual = (&zh - &b * &uh).norm();
            (uh.as_slice().to_vec(), residual)
        })
        .collect();
    let mut out = Spectrum::zeros(n, z.dim(), fiber);
    let mut worst = 0.0f64;
    for (p, (uh, r)) in solved.into_iter().enumerate() {
        worst = worst.max(r);
        out.coefficient_mut(p).copy_from_slice(&uh);
    }
    let relative = worst / scale;
    if relative > POTENTIAL_RANGE_TOL {
        return Err(Error::NotInRange { residual: relative });
    }
    Ok(out.to_field())
}

fn pseudo(m: &CMatrix) -> CMatrix {
    Svd::new(m).pseudoinverse(RANK_TOL)
}

/// Bessel-weighted quadratic norm with smoothness `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SobolevNormSpec {
    pub s: f64,
}

/// `(sum_xi (1 + |xi|^2)^s |u_hat(xi)|^2)^{1/2}` over integer frequencies.
pub fn sobolev_norm(u: &TorusField, spec: SobolevNormSpec) -> f64 {
    spectrum_norm(&u.spectrum(), spec.s)
}

pub(crate) fn spectrum_norm(s: &Spectrum, smooth: f64) -> f64 {
    let total: f64 = (0..s.points())
        .into_par_iter()
        .map(|p| {
            let freq = s.frequency(p);
            let xi2: f64 = freq.iter().map(|&f| (f * f) as f64).sum();
            let w = (1.0 + xi2).powf(smooth);
            w * s.coefficient(p).iter().map(|z| z.norm_sqr()).sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    total.sqrt()
}

/// Empirical multiplier constant `||T[u]||_0 / ||A u||_{-k}` over a batch.
#[derive(Debug, Clone)]
pub struct PoincareReport {
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub skipped: usize,
}

pub fn poincare_check(op: &LinearOperator, batch: &[TorusField]) -> Result<PoincareReport> {
    let k = op.order() as f64;
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for u in batch {
        let t = a_representative(op, u)?;
        let au = apply_operator(op, u)?;
        let num = sobolev_norm(&t, SobolevNormSpec { s: 0.0 });
        let den = sobolev_norm(&au, SobolevNormSpec { s: -k });
        let scale = u.rms().max(f64::MIN_POSITIVE);
        if den <= 1e-13 * scale {
            skipped += 1;
            continue;
        }
        ratios.push(num / den);
    }
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(PoincareReport {
        ratios,
        max_ratio,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn close(a: &TorusField, b: &TorusField, tol: f64) -> bool {
        a.sub(b).unwrap().max_abs() <= tol
    }

    #[test]
    fn transform_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..=3 {
            let u = TorusField::random_white(8, d, 2, &mut rng).unwrap();
            let back = u.spectrum().to_field();
            assert!(close(&u, &back, 1e-12 * u.max_abs()));
        }
    }

    #[test]
    fn grid_must_be_power_of_two() {
        assert!(TorusField::zeros(6, 2, 1).is_err());
        assert!(TorusField::new(4, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn constant_field_is_annihilated() {
        let u = TorusField::constant(16, 2, &[3.0, -1.0]).unwrap();
        let du = apply_operator(&gallery::divergence(2), &u).unwrap();
        assert!(du.max_abs() < 1e-12);
    }

    #[test]
    fn divergence_of_single_mode() {
        let u = TorusField::from_fn(16, 2, 2, |x, o| {
            o[0] = (2.0 * PI * x[0]).sin();
            o[1] = 0.0;
        })
        .unwrap();
        let du = apply_operator(&gallery::divergence(2), &u).unwrap();
        let expected =
            TorusField::from_fn(16, 2, 1, |x, o| o[0] = 2.0 * PI * (2.0 * PI * x[0]).cos())
                .unwrap();
        assert!(close(&du, &expected, 1e-11));
    }

    #[test]
    fn laplacian_eigenfunction() {
        let u = TorusField::from_fn(16, 2, 1, |x, o| o[0] = (2.0 * PI * x[0]).sin()).unwrap();
        let lu = apply_operator(&gallery::laplacian(2), &u).unwrap();
        assert!(close(&lu, &u.scale(-4.0 * PI * PI), 1e-10));
    }

    #[test]
    fn apply_rejects_fiber_mismatch() {
        let u = TorusField::zeros(8, 2, 3).unwrap();
        assert!(apply_operator(&gallery::divergence(2), &u).is_err());
    }

    #[test]
    fn representative_examples() {
        let div = gallery::divergence(2);
        // divergence-free mode
        let u = TorusField::from_fn(16, 2, 2, |x, o| {
            o[0] = (2.0 * PI * x[1]).sin();
            o[1] = 0.0;
        })
        .unwrap();
        assert!(a_representative(&div, &u).unwrap().max_abs() < 1e-12);
        // pure gradient mode
        let g = TorusField::from_fn(16, 2, 2, |x, o| {
            o[0] = (2.0 * PI * x[0]).sin();
            o[1] = 0.0;
        })
        .unwrap();
        assert!(close(&a_representative(&div, &g).unwrap(), &g, 1e-12));
        assert!(afree_part(&div, &g).unwrap().max_abs() < 1e-12);
        // constants
        let c = TorusField::constant(16, 2, &[2.0, 5.0]).unwrap();
        let dec = decompose(&div, &c).unwrap();
        assert!(dec.representative.max_abs() < 1e-12 && dec.afree.max_abs() < 1e-12);
        assert!((dec.mean[0] - 2.0).abs() < 1e-12 && (dec.mean[1] - 5.0).abs() < 1e-12);
        // already free and mean-zero
        assert!(close(&afree_part(&div, &u).unwrap(), &u, 1e-12));
    }

    #[test]
    fn representative_refuses_non_constant_rank() {
        let u = TorusField::zeros(8, 2, 2).unwrap();
        assert!(matches!(
            a_representative(&gallery::mueller_diagonal(), &u),
            Err(Error::NotConstantRank { .. })
        ));
    }

    #[test]
    fn potential_examples() {
        let rot = gallery::rotated_gradient_2d();
        let z = TorusField::from_fn(16, 2, 2, |x, o| {
            o[0] = (2.0 * PI * x[1]).sin();
            o[1] = 0.0;
        })
        .unwrap();
        let u = potential_solve(&rot, &z).unwrap();
        let expected = TorusField::from_fn(16, 2, 1, |x, o| {
            o[0] = -(2.0 * PI * x[1]).cos() / (2.0 * PI)
        })
        .unwrap();
        assert!(close(&u, &expected, 1e-12));

        let zero = TorusField::zeros(16, 2, 2).unwrap();
        assert!(potential_solve(&rot, &zero).unwrap().max_abs() == 0.0);

        let grad1 = gallery::gradient(1, 1);
        let z = TorusField::from_fn(32, 1, 1, |x, o| o[0] = (2.0 * PI * x[0]).cos()).unwrap();
        let u = potential_solve(&grad1, &z).unwrap();
        let expected =
            TorusField::from_fn(32, 1, 1, |x, o| o[0] = (2.0 * PI * x[0]).sin() / (2.0 * PI))
                .unwrap();
        assert!(close(&u, &expected, 1e-12));
    }

    #[test]
    fn potential_rejects_fields_outside_range() {
        let rot = gallery::rotated_gradient_2d();
        // gradient mode: not divergence-free
        let z = TorusField::from_fn(16, 2, 2, |x, o| {
            o[0] = (2.0 * PI * x[0]).sin();
            o[1] = 0.0;
        })
        .unwrap();
        assert!(matches!(
            potential_solve(&rot, &z),
            Err(Error::NotInRange { .. })
        ));
    }

    #[test]
    fn sobolev_norm_examples() {
        let zero = TorusField::zeros(8, 1, 1).unwrap();
        assert_eq!(sobolev_norm(&zero, SobolevNormSpec { s: 1.0 }), 0.0);
        let c = TorusField::constant(8, 2, &[-3.0]).unwrap();
        for s in [-2.0, 0.0, 1.5] {
            assert!((sobolev_norm(&c, SobolevNormSpec { s }) - 3.0).abs() < 1e-12);
        }
        // sin(2 pi x): coefficients -i/2, +i/2 at xi = +-1, weight 2^{-1}.
        let u = TorusField::from_fn(32, 1, 1, |x, o| o[0] = (2.0 * PI * x[0]).sin()).unwrap();
        let expected = (2.0 * 0.5 * 0.25f64).sqrt();
        assert!((sobolev_norm(&u, SobolevNormSpec { s: -1.0 }) - expected).abs() < 1e-12);
        // s = 0 is the quadratic mean
        assert!((sobolev_norm(&u, SobolevNormSpec { s: 0.0 }) - u.rms()).abs() < 1e-12);
    }

    #[test]
    fn poincare_single_frequency_closed_form() {
        let div = gallery::divergence(2);
        // u = (cos 2pi(x1 + 2 x2), 0): xi = (1, 2)
        let u = TorusField::from_fn(16, 2, 2, |x, o| {
            o[0] = (2.0 * PI * (x[0] + 2.0 * x[1])).cos();
            o[1] = 0.0;
        })
        .unwrap();
        let r = poincare_check(&div, std::slice::from_ref(&u)).unwrap();
        // |pi u_hat| = |xi_1|/|xi| |u_hat|, |A pi u_hat| = 2 pi |xi| |pi u_hat|
        let xi2 = 5.0f64;
        let expected = (1.0 + xi2).sqrt() / (2.0 * PI * xi2.sqrt());
        assert!(
            (r.max_ratio - expected).abs() < 1e-12,
            "{} vs {expected}",
            r.max_ratio
        );

        let free = TorusField::from_fn(16, 2, 2, |x, o| {
            o[0] = (2.0 * PI * x[1]).sin();
            o[1] = 0.0;
        })
        .unwrap();
        let r = poincare_check(&div, &[free]).unwrap();
        assert_eq!(r.skipped, 1);
        assert!(r.ratios.is_empty());
    }
}
