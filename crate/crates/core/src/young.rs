//! Discrete generalized Young measures `(nu, lambda, nu_inf)` on a box with a
//! uniform cell grid: `nu_x` is an atomic probability per cell, `lambda` a
//! non-negative cell density plus point masses, and `nu_inf` an atomic
//! probability on the unit sphere at every site where `lambda` lives.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery;
use crate::integrand::{Integrand, SpatialWeight};
use crate::linalg::{norm, project_onto, RANK_TOL};
use crate::operator::{constant_rank_audit, wave_cone_membership, LinearOperator};
use crate::quasiconvexity::{quasiconvex_envelope, EnvelopeConfig};
use crate::spectral::{
    a_representative, apply_operator, sobolev_norm, SobolevNormSpec, TorusField,
};

/// Tolerance on probability weights summing to one.
pub const WEIGHT_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Domain.

/// Axis-aligned box with a uniform cell grid; cells are stored row-major
/// with the first axis slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
}

impl GridBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let b = GridBox {
            lower,
            upper,
            cells,
        };
        b.validate()?;
        Ok(b)
    }

    /// `[0, 1]^d` with `n` cells per axis.
    pub fn unit(dim: usize, n: usize) -> Self {
        GridBox {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
            cells: vec![n; dim],
        }
    }

    /// `[-half, half]^d` with `n` cells per axis.
    pub fn centered(dim: usize, half: f64, n: usize) -> Self {
        GridBox {
            lower: vec![-half; dim],
            upper: vec![half; dim],
            cells: vec![n; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d || self.cells.len() != d {
            return Err(Error::InvalidInput(
                "box bounds and cell counts must share a positive dimension".into(),
            ));
        }
        for a in 0..d {
            if !(self.upper[a] > self.lower[a]) || self.cells[a] == 0 {
                return Err(Error::InvalidInput(format!(
                    "degenerate box along axis {a}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn side(&self, a: usize) -> f64 {
        self.upper[a] - self.lower[a]
    }

    pub fn spacing(&self, a: usize) -> f64 {
        self.side(a) / self.cells[a] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.side(a)).product()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let d = self.dim();
        let mut out = vec![0; d];
        for a in (0..d).rev() {
            out[a] = idx % self.cells[a];
            idx /= self.cells[a];
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.cells)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn center(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.lower[a] + (i as f64 + 0.5) * self.spacing(a))
            .collect()
    }

    /// Cell containing `x` (points on the upper faces go to the last cell).
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut multi = Vec::with_capacity(self.dim());
        for a in 0..self.dim() {
            let t = (x[a] - self.lower[a]) / self.spacing(a);
            if t < 0.0 || t > self.cells[a] as f64 {
                return None;
            }
            multi.push((t.floor() as usize).min(self.cells[a] - 1));
        }
        Some(self.flat_index(&multi))
    }

    pub fn is_boundary_cell(&self, idx: usize) -> bool {
        self.multi_index(idx)
            .iter()
            .zip(&self.cells)
            .any(|(&i, &n)| i == 0 || i + 1 == n)
    }

    pub fn strictly_inside(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && (0..self.dim()).all(|a| x[a] > self.lower[a] && x[a] < self.upper[a])
    }

    /// Distance from `x` to the boundary of the box (negative outside).
    pub fn margin(&self, x: &[f64]) -> f64 {
        (0..self.dim())
            .map(|a| (x[a] - self.lower[a]).min(self.upper[a] - x[a]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Equal power-of-two cell counts and equal sides: the box can be read
    /// as a periodic torus grid.
    pub fn torus_grid(&self) -> Option<usize> {
        let n = self.cells[0];
        let side = self.side(0);
        let ok = n.is_power_of_two()
            && n >= 2
            && self.cells.iter().all(|&c| c == n)
            && (0..self.dim()).all(|a| (self.side(a) - side).abs() <= 1e-12 * side);
        ok.then_some(n)
    }
}

// ---------------------------------------------------------------------------
// Measures.

/// Point mass `mass * direction * delta_location` with `|direction| = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub location: Vec<f64>,
    pub mass: f64,
    pub direction: Vec<f64>,
}

/// Density per cell (units of `W` per unit volume) plus atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub domain: GridBox,
    pub fiber: usize,
    pub density: Vec<f64>,
    #[serde(default)]
    pub atoms: Vec<Atom>,
}

fn normalized(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n.is_finite() && (n - 1.0).abs() <= 1e-6) {
        return Err(Error::InvalidInput(format!(
            "{what} {v:?} is not a unit vector"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl DiscreteMeasure {
    pub fn zero(domain: GridBox, fiber: usize) -> Self {
        let n = domain.n_cells() * fiber;
        DiscreteMeasure {
            domain,
            fiber,
            density: vec![0.0; n],
            atoms: Vec::new(),
        }
    }

    pub fn from_density(domain: GridBox, fiber: usize, density: Vec<f64>) -> Result<Self> {
        let m = DiscreteMeasure {
            domain,
            fiber,
            density,
            atoms: Vec::new(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Density sampled at cell centers.
    pub fn from_fn(domain: GridBox, fiber: usize, f: impl Fn(&[f64], &mut [f64]) + Sync) -> Self {
        let mut density = vec![0.0; domain.n_cells() * fiber];
        density
            .par_chunks_mut(fiber)
            .enumerate()
            .for_each(|(i, out)| {
                f(&domain.center(i), out);
            });
        DiscreteMeasure {
            domain,
            fiber,
            density,
            atoms: Vec::new(),
        }
    }

    /// Adds an atom; the direction is normalised and must be unit to 1e-6.
    pub fn push_atom(&mut self, location: Vec<f64>, mass: f64, direction: &[f64]) -> Result<()> {
        if location.len() != self.domain.dim() || direction.len() != self.fiber || !(mass > 0.0) {
            return Err(Error::InvalidInput("bad atom".into()));
        }
        let direction = normalized(direction, "atom direction")?;
        self.atoms.push(Atom {
            location,
            mass,
            direction,
        });
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        let expected = self.domain.n_cells() * self.fiber;
        if self.fiber == 0 || self.density.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "measure density length",
                expected,
                found: self.density.len(),
            });
        }
        for a in &self.atoms {
            if a.location.len() != self.domain.dim() || a.direction.len() != self.fiber {
                return Err(Error::InvalidInput("atom has wrong dimensions".into()));
            }
            if !(a.mass > 0.0) || (norm(&a.direction) - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(
                    "atom mass must be positive and direction unit".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn density_at(&self, cell: usize) -> &[f64] {
        &self.density[cell * self.fiber..(cell + 1) * self.fiber]
    }

    /// `|mu|(Omega)`
    pub fn total_variation(&self) -> f64 {
        let vol = self.domain.cell_volume();
        let ac: f64 = self.density.chunks(self.fiber).map(norm).sum::<f64>() * vol;
        ac + self.atoms.iter().map(|a| a.mass).sum::<f64>()
    }

    /// `mu(Omega)` as a vector.
    pub fn total(&self) -> Vec<f64> {
        let vol = self.domain.cell_volume();
        let mut t = vec![0.0; self.fiber];
        for c in self.density.chunks(self.fiber) {
            for (a, b) in t.iter_mut().zip(c) {
                *a += b * vol;
            }
        }
        for at in &self.atoms {
            for (a, b) in t.iter_mut().zip(&at.direction) {
                *a += at.mass * b;
            }
        }
        t
    }

    /// `int phi . d mu` for a vector test function.
    pub fn integrate(&self, phi: &(dyn Fn(&[f64], &mut [f64]) + Sync)) -> f64 {
        let vol = self.domain.cell_volume();
        let fiber = self.fiber;
        let ac: f64 = self
            .density
            .par_chunks(fiber)
            .enumerate()
            .map(|(i, c)| {
                let mut p = vec![0.0; fiber];
                phi(&self.domain.center(i), &mut p);
                p.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum();
        let sing: f64 = self
            .atoms
            .iter()
            .map(|a| {
                let mut p = vec![0.0; fiber];
                phi(&a.location, &mut p);
                a.mass * p.iter().zip(&a.direction).map(|(x, y)| x * y).sum::<f64>()
            })
            .sum();
        ac * vol + sing
    }

    /// Cell-grid field on the box read as a torus; atoms are spread over
    /// their cells.
    pub fn to_torus_field(&self) -> Result<TorusField> {
        let n = self.domain.torus_grid().ok_or_else(|| {
            Error::InvalidInput("measure domain is not a cubic power-of-two grid".into())
        })?;
        let mut values = self.density.clone();
        let vol = self.domain.cell_volume();
        for a in &self.atoms {
            let cell = self
                .domain
                .locate(&a.location)
                .ok_or_else(|| Error::InvalidInput("atom outside the domain".into()))?;
            for (k, g) in a.direction.iter().enumerate() {
                values[cell * self.fiber + k] += a.mass * g / vol;
            }
        }
        TorusField::new(n, self.domain.dim(), self.fiber, values)
    }

    /// Measure with density given by a torus field on this domain's grid.
    pub fn from_torus_field(domain: GridBox, field: &TorusField) -> Result<Self> {
        if domain.torus_grid() != Some(field.n()) || domain.dim() != field.dim() {
            return Err(Error::InvalidInput(
                "field grid does not match the domain".into(),
            ));
        }
        Self::from_density(domain, field.fiber(), field.values().to_vec())
    }
}

/// `<mu, Omega> = int sqrt(1 + |ac mu|^2) dx + |mu^s|(Omega)`
pub fn area_functional(mu: &DiscreteMeasure) -> f64 {
    let vol = mu.domain.cell_volume();
    let ac: f64 = mu
        .density
        .par_chunks(mu.fiber)
        .map(|c| (1.0 + c.iter().map(|v| v * v).sum::<f64>()).sqrt())
        .sum();
    ac * vol + mu.atoms.iter().map(|a| a.mass).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Young measures.

/// Finite atomic probability measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probability {
    pub weights: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl Probability {
    pub fn dirac(point: Vec<f64>) -> Self {
        Probability {
            weights: vec![1.0],
            points: vec![point],
        }
    }

    pub fn new(weights: Vec<f64>, points: Vec<Vec<f64>>) -> Result<Self> {
        let p = Probability { weights, points };
        p.validate(None)?;
        Ok(p)
    }

    /// Same measure with every point rescaled to unit length.
    pub fn on_sphere(weights: Vec<f64>, points: Vec<Vec<f64>>) -> Result<Self> {
        let points = points
            .iter()
            .map(|p| {
                let n = norm(p);
                if n == 0.0 {
                    Err(Error::InvalidInput("zero vector on the sphere".into()))
                } else {
                    Ok(p.iter().map(|v| v / n).collect())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights, points)
    }

    pub fn validate(&self, fiber: Option<usize>) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.points.len() {
            return Err(Error::InvalidInput(
                "probability needs matching, non-empty weights and points".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidInput("negative probability weight".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidInput(format!(
                "probability weights sum to {total}"
            )));
        }
        let len = fiber.unwrap_or(self.points[0].len());
        if self.points.iter().any(|p| p.len() != len) {
            return Err(Error::DimensionMismatch {
                what: "probability point length",
                expected: len,
                found: self
                    .points
                    .iter()
                    .map(|p| p.len())
                    .find(|&l| l != len)
                    .unwrap_or(len),
            });
        }
        Ok(())
    }

    fn validate_sphere(&self, fiber: usize) -> Result<()> {
        self.validate(Some(fiber))?;
        for p in &self.points {
            if (norm(p) - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "point {p:?} is not on the unit sphere"
                )));
            }
        }
        Ok(())
    }

    /// `<g, p>`
    pub fn expect(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.points)
            .map(|(w, p)| w * g(p))
            .sum()
    }

    /// `<id, p>`
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.points[0].len()];
        for (w, p) in self.weights.iter().zip(&self.points) {
            for (a, b) in m.iter_mut().zip(p) {
                *a += w * b;
            }
        }
        m
    }
}

/// `(nu_x, lambda density, nu_inf_x)` on one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoungCell {
    pub nu: Probability,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub nu_inf: Option<Probability>,
}

/// Point mass of `lambda` with its concentration-angle measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaAtom {
    pub location: Vec<f64>,
    pub mass: f64,
    pub nu_inf: Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteYoungMeasure {
    pub domain: GridBox,
    pub fiber: usize,
    pub cells: Vec<YoungCell>,
    pub atoms: Vec<LambdaAtom>,
}

/// On-disk layout: either one entry per cell or a single `uniform` cell.
#[derive(Debug, Serialize, Deserialize)]
struct YoungFile {
    domain: GridBox,
    fiber: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uniform: Option<YoungCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cells: Option<Vec<YoungCell>>,
    #[serde(default)]
    atoms: Vec<LambdaAtom>,
}

impl DiscreteYoungMeasure {
    pub fn uniform(domain: GridBox, cell: YoungCell) -> Result<Self> {
        let fiber = cell.nu.points[0].len();
        let ym = DiscreteYoungMeasure {
            cells: vec![cell; domain.n_cells()],
            domain,
            fiber,
            atoms: Vec::new(),
        };
        ym.validate()?;
        Ok(ym)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.cells.len() != self.domain.n_cells() {
            return Err(Error::DimensionMismatch {
                what: "young measure cell count",
                expected: self.domain.n_cells(),
                found: self.cells.len(),
            });
        }
        for c in &self.cells {
            c.nu.validate(Some(self.fiber))?;
            if !(c.lambda >= 0.0) {
                return Err(Error::InvalidInput(
                    "lambda density must be non-negative".into(),
                ));
            }
            match &c.nu_inf {
                Some(p) => p.validate_sphere(self.fiber)?,
                None if c.lambda > 0.0 => {
                    return Err(Error::InvalidInput(
                        "cell with lambda > 0 lacks nu_inf".into(),
                    ))
                }
                None => {}
            }
        }
        for a in &self.atoms {
            if !(a.mass > 0.0) {
                return Err(Error::InvalidInput(
                    "lambda atom mass must be positive".into(),
                ));
            }
            if !self.domain.strictly_inside(&a.location) {
                return Err(Error::InvalidInput(format!(
                    "lambda atom at {:?} must lie strictly inside the domain",
                    a.location
                )));
            }
            a.nu_inf.validate_sphere(self.fiber)?;
        }
        Ok(())
    }

    pub fn lambda_total(&self) -> f64 {
        self.cells.iter().map(|c| c.lambda).sum::<f64>() * self.domain.cell_volume()
            + self.atoms.iter().map(|a| a.mass).sum::<f64>()
    }

    pub fn to_json(&self) -> String {
        let file = YoungFile {
            domain: self.domain.clone(),
            fiber: self.fiber,
            uniform: None,
            cells: Some(self.cells.clone()),
            atoms: self.atoms.clone(),
        };
        serde_json::to_string_pretty(&file).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: YoungFile = serde_json::from_str(text).map_err(|e| {
            Error::parse(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        let cells = match (file.uniform, file.cells) {
            (Some(u), None) => vec![u; file.domain.n_cells()],
            (None, Some(c)) => c,
            _ => {
                return Err(Error::parse(
                    "top level",
                    "exactly one of `uniform` and `cells` must be present",
                ))
            }
        };
        let ym = DiscreteYoungMeasure {
            domain: file.domain,
            fiber: file.fiber,
            cells,
            atoms: file.atoms,
        };
        ym.validate()?;
        Ok(ym)
    }
}

impl fmt::Display for DiscreteYoungMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "young measure on {:?}..{:?} ({} cells, fiber {}, lambda mass {:.6}, {} atoms)",
            self.domain.lower,
            self.domain.upper,
            self.cells.len(),
            self.fiber,
            self.lambda_total(),
            self.atoms.len()
        )
    }
}

// ---------------------------------------------------------------------------
// Calculus.

#[derive(Debug, Clone, PartialEq)]
pub struct PairingReport {
    pub value: f64,
    pub oscillation: f64,
    pub concentration: f64,
    pub integrand: String,
}

/// `int phi <f, nu_x> dx + int phi <f_inf, nu_inf_x> d lambda`
pub fn pairing(
    f: &Integrand,
    weight: &SpatialWeight,
    ym: &DiscreteYoungMeasure,
) -> Result<PairingReport> {
    f.validate(ym.fiber)?;
    let needs_recession = ym.lambda_total() > 0.0;
    if needs_recession && !f.has_recession() {
        return Err(Error::MissingRecession(f.to_string()));
    }
    let rec = |z: &[f64]| f.recession(z).unwrap_or(0.0);
    let vol = ym.domain.cell_volume();
    let (osc, conc) = ym
        .cells
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let phi = weight.eval(&ym.domain.center(i));
            let o = phi * c.nu.expect(|z| f.value(z));
            let k = match &c.nu_inf {
                Some(p) if c.lambda > 0.0 => phi * c.lambda * p.expect(rec),
                _ => 0.0,
            };
            (o, k)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let atoms: f64 = ym
        .atoms
        .iter()
        .map(|a| weight.eval(&a.location) * a.mass * a.nu_inf.expect(rec))
        .sum();
    let oscillation = osc * vol;
    let concentration = conc * vol + atoms;
    Ok(PairingReport {
        value: oscillation + concentration,
        oscillation,
        concentration,
        integrand: f.to_string(),
    })
}

/// Threshold below which a concentration direction counts as zero.
pub const ZERO_MEAN_TOL: f64 = 1e-12;

/// `[nu] = <id, nu> L^d + <id, nu_inf> lambda`
pub fn barycenter(ym: &DiscreteYoungMeasure) -> DiscreteMeasure {
    let fiber = ym.fiber;
    let mut density = vec![0.0; ym.cells.len() * fiber];
    density
        .par_chunks_mut(fiber)
        .zip(&ym.cells)
        .for_each(|(out, c)| {
            let m = c.nu.mean();
            out.copy_from_slice(&m);
            if let (Some(p), true) = (&c.nu_inf, c.lambda > 0.0) {
                for (o, v) in out.iter_mut().zip(p.mean()) {
                    *o += c.lambda * v;
                }
            }
        });
    let atoms = ym
        .atoms
        .iter()
        .filter_map(|a| {
            let m = a.nu_inf.mean();
            let n = norm(&m);
            (n > ZERO_MEAN_TOL).then(|| Atom {
                location: a.location.clone(),
                mass: a.mass * n,
                direction: m.iter().map(|v| v / n).collect(),
            })
        })
        .collect();
    DiscreteMeasure {
        domain: ym.domain.clone(),
        fiber,
        density,
        atoms,
    }
}

/// `delta_mu = (delta_{ac mu}, |mu^s|, delta_{g_mu})`
pub fn elementary(mu: &DiscreteMeasure) -> DiscreteYoungMeasure {
    let cells = mu
        .density
        .chunks(mu.fiber)
        .map(|c| YoungCell {
            nu: Probability::dirac(c.to_vec()),
            lambda: 0.0,
            nu_inf: None,
        })
        .collect();
    let atoms = mu
        .atoms
        .iter()
        .map(|a| LambdaAtom {
            location: a.location.clone(),
            mass: a.mass,
            nu_inf: Probability::dirac(a.direction.clone()),
        })
        .collect();
    DiscreteYoungMeasure {
        domain: mu.domain.clone(),
        fiber: mu.fiber,
        cells,
        atoms,
    }
}

/// Moves every point `z` of `nu_x` to `z + v(x)`; `lambda` and `nu_inf`
/// are unchanged, so `<f, shifted> = <f(. + v(x)), nu>`.
pub fn shift(ym: &DiscreteYoungMeasure, v: &[f64]) -> Result<DiscreteYoungMeasure> {
    let expected = ym.cells.len() * ym.fiber;
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "shift field length",
            expected,
            found: v.len(),
        });
    }
    let mut out = ym.clone();
    for (c, vc) in out.cells.iter_mut().zip(v.chunks(ym.fiber)) {
        for p in c.nu.points.iter_mut() {
            for (a, b) in p.iter_mut().zip(vc) {
                *a += b;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generation.

/// Extrapolated limit of a pairing sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitEstimate {
    pub value: f64,
    /// Spread of the last three terms.
    pub error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct GenerationReport {
    /// `values[t][j]`: pairing of test `t` with the `j`-th member.
    pub values: Vec<Vec<f64>>,
    pub limits: Vec<LimitEstimate>,
    pub labels: Vec<String>,
}

/// Aitken extrapolation of the last three terms, falling back to the last
/// term when the tail is not geometric.
pub fn extrapolate(seq: &[f64]) -> LimitEstimate {
    let n = seq.len();
    match n {
        0 => LimitEstimate {
            value: f64::NAN,
            error: f64::INFINITY,
            converged: false,
        },
        1 | 2 => LimitEstimate {
            value: seq[n - 1],
            error: if n == 2 {
                (seq[1] - seq[0]).abs()
            } else {
                f64::INFINITY
            },
            converged: false,
        },
        _ => {
            let (a, b, c) = (seq[n - 3], seq[n - 2], seq[n - 1]);
            let spread = a.max(b).max(c) - a.min(b).min(c);
            let scale = a.abs().max(b.abs()).max(c.abs()).max(1.0);
            let (d1, d2) = (b - a, c - b);
            if spread <= 1e-12 * scale {
                return LimitEstimate {
                    value: c,
                    error: spread,
                    converged: true,
                };
            }
            let shrinking = d2.abs() < d1.abs();
            let ratio = d2 / d1;
            let value = if d1 != 0.0 && ratio > 0.0 && ratio < 1.0 {
                c + d2 * ratio / (1.0 - ratio)
            } else {
                c
            };
            LimitEstimate {
                value,
                error: spread,
                converged: shrinking,
            }
        }
    }
}

/// Pairings `<<f, delta_{mu_j}>>` for each test and each member of the
/// sequence, with extrapolated limits.
pub fn generation_estimate(
    sequence: &[DiscreteMeasure],
    tests: &[(Integrand, SpatialWeight)],
) -> Result<GenerationReport> {
    if let Some(first) = sequence.first() {
        if sequence
            .iter()
            .any(|m| m.domain != first.domain || m.fiber != first.fiber)
        {
            return Err(Error::InvalidInput(
                "sequence members must share domain and fiber".into(),
            ));
        }
    }
    for (f, _) in tests {
        if !f.has_recession() {
            return Err(Error::MissingRecession(f.to_string()));
        }
    }
    let mut values = vec![Vec::with_capacity(sequence.len()); tests.len()];
    for mu in sequence {
        let ym = elementary(mu);
        for (t, (f, w)) in tests.iter().enumerate() {
            values[t].push(pairing(f, w, &ym)?.value);
        }
    }
    let limits = values.iter().map(|v| extrapolate(v)).collect();
    let labels = tests
        .iter()
        .map(|(f, w)| format!("{} * {}", w.label(), f))
        .collect();
    Ok(GenerationReport {
        values,
        limits,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Certificate.

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Member `h` of a family of `A`-quasiconvex integrands with its upper
/// recession `h#`.
#[derive(Clone)]
pub struct QcMember {
    pub label: String,
    h: ScalarFn,
    h_sharp: ScalarFn,
    /// `true` when `h` comes from a numerical envelope.
    pub numeric: bool,
    /// Allowed violation of the Jensen inequality.
    pub slack: f64,
}

impl fmt::Debug for QcMember {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QcMember")
            .field("label", &self.label)
            .field("numeric", &self.numeric)
            .field("slack", &self.slack)
            .finish()
    }
}

/// Slack granted to numerically enveloped members.
pub const NUMERIC_SLACK: f64 = 5e-2;

impl QcMember {
    /// Integrand known to be `A`-quasiconvex (for instance convex).
    pub fn analytic(f: Integrand) -> Result<Self> {
        if !f.has_recession() {
            return Err(Error::MissingRecession(f.to_string()));
        }
        let g = f.clone();
        let label = f.to_string();
        Ok(QcMember {
            label,
            h: Arc::new(move |z| f.value(z)),
            h_sharp: Arc::new(move |z| g.recession(z).unwrap_or(0.0)),
            numeric: false,
            slack: 0.0,
        })
    }

    /// `Q_A f` evaluated by the cell optimizer (memoised), with `f#` as
    /// recession.
    pub fn envelope(
        op: &LinearOperator,
        f: Integrand,
        config: EnvelopeConfig,
        slack: f64,
    ) -> Result<Self> {
        if !f.has_recession() {
            return Err(Error::MissingRecession(f.to_string()));
        }
        let label = format!("Q[{f}]");
        let op = op.clone();
        let g = f.clone();
        let memo: Mutex<HashMap<Vec<u64>, f64>> = Mutex::new(HashMap::new());
        let h = move |z: &[f64]| {
            let key: Vec<u64> = z.iter().map(|v| v.to_bits()).collect();
            if let Some(v) = memo.lock().expect("poisoned").get(&key) {
                return *v;
            }
            let v = quasiconvex_envelope(&op, &f, z, &config, None)
                .map(|r| r.value)
                .unwrap_or_else(|_| f.value(z));
            memo.lock().expect("poisoned").insert(key, v);
            v
        };
        Ok(QcMember {
            label,
            h: Arc::new(h),
            h_sharp: Arc::new(move |z| g.recession(z).unwrap_or(0.0)),
            numeric: true,
            slack,
        })
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        (self.h)(z)
    }

    pub fn recession(&self, z: &[f64]) -> f64 {
        (self.h_sharp)(z)
    }
}

/// Bundled family: convex members (norm, area, the norm of the projection
/// onto `W_A`) and, when `numeric` is set, the envelope of the two-point
/// distance well at `+-u` for a unit `u` in `W_A` (or `e_1` when `W_A = {0}`).
pub fn default_qc_family(op: &LinearOperator, numeric: bool) -> Result<Vec<QcMember>> {
    let audit = constant_rank_audit(op, 128, RANK_TOL)?;
    let mut family = vec![
        QcMember::analytic(Integrand::norm())?,
        QcMember::analytic(Integrand::area())?,
        QcMember::analytic(Integrand::norm().tilde_transform(&audit.span_basis))?,
    ];
    if numeric {
        let fiber = op.fiber_in();
        let u = audit.span_basis.first().cloned().unwrap_or_else(|| {
            let mut e = vec![0.0; fiber];
            e[0] = 1.0;
            e
        });
        let minus: Vec<f64> = u.iter().map(|v| -v).collect();
        let well = Integrand::distance(vec![u, minus]);
        let config = EnvelopeConfig {
            k_max: 4,
            grid: 16,
            restarts: 4,
            iters: 200,
            ..EnvelopeConfig::default()
        };
        family.push(QcMember::envelope(op, well, config, NUMERIC_SLACK)?);
    }
    Ok(family)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConditionStatus {
    Pass,
    Fail,
    Skipped(String),
}

#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub status: ConditionStatus,
    /// Largest observed defect (residual, Jensen excess, or distance).
    pub worst: f64,
    pub location: String,
}

impl ConditionReport {
    pub fn passed(&self) -> bool {
        self.status == ConditionStatus::Pass
    }
}

/// Verdicts on the three conditions characterising `A`-free Young measures.
#[derive(Debug, Clone)]
pub struct CertificateReport {
    /// The barycenter is `A`-free.
    pub barycenter: ConditionReport,
    /// Jensen inequality at regular points for every family member.
    pub jensen: ConditionReport,
    /// Concentration directions lie in `W_A`.
    pub support: ConditionReport,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.barycenter.passed() && self.jensen.passed() && self.support.passed()
    }
}

/// How the `A`-freeness of the barycenter is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarycenterCheck {
    /// Spectral `s = -k` norm with the box read as a torus.
    Periodic,
    /// Central differences on cells at least `k` cells from the boundary,
    /// relative to the size of the individual terms; for fields that are
    /// not periodic on the box.
    Interior,
}

#[derive(Debug, Clone, Copy)]
pub struct CertificateConfig {
    pub barycenter_check: BarycenterCheck,
    /// Bound on `||A [nu]||_{-k} / ||[nu]||_0`.
    pub residual_tol: f64,
    /// Absolute tolerance of the Jensen inequality.
    pub jensen_tol: f64,
    /// Distance of concentration directions to `W_A`.
    pub support_tol: f64,
    /// Cells on which numerically enveloped members are evaluated (each
    /// evaluation is a cell-problem solve).
    pub numeric_cells: usize,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        CertificateConfig {
            barycenter_check: BarycenterCheck::Periodic,
            residual_tol: 1e-8,
            jensen_tol: 1e-9,
            support_tol: 1e-8,
            numeric_cells: 16,
        }
    }
}

/// Relative surrogate residual `||A mu||_{-k} / ||mu||_0` of a measure on a
/// torus-compatible box.
pub fn afree_residual(op: &LinearOperator, mu: &DiscreteMeasure) -> Result<f64> {
    let field = mu.to_torus_field()?;
    let den = sobolev_norm(&field, SobolevNormSpec { s: 0.0 });
    if den == 0.0 {
        return Ok(0.0);
    }
    let side = mu.domain.side(0);
    let k = op.order() as i32;
    let au = apply_operator(op, &field)?;
    // the unit-torus symbol at integer xi equals side^k times the symbol at xi/side
    Ok(sobolev_norm(&au, SobolevNormSpec { s: -(k as f64) }) / side.powi(k) / den)
}

/// `||A_h mu|| / (sum_alpha ||A_alpha D_h^alpha mu||^2)^(1/2)` over interior
/// cells, with `D_h` the central difference.
pub fn interior_residual(op: &LinearOperator, mu: &DiscreteMeasure) -> Result<f64> {
    let d = mu.domain.dim();
    let fiber = mu.fiber;
    let cells = mu.domain.n_cells();
    let mut values = mu.density.clone();
    let vol = mu.domain.cell_volume();
    for a in &mu.atoms {
        let cell = mu
            .domain
            .locate(&a.location)
            .ok_or_else(|| Error::InvalidInput("atom outside the domain".into()))?;
        for (k, g) in a.direction.iter().enumerate() {
            values[cell * fiber + k] += a.mass * g / vol;
        }
    }
    let strides: Vec<usize> = (0..d)
        .map(|a| mu.domain.cells[a + 1..].iter().product())
        .collect();
    let diff = |f: &[f64], axis: usize| -> Vec<f64> {
        let n = mu.domain.cells[axis];
        let h = mu.domain.spacing(axis);
        let st = strides[axis] * fiber;
        (0..f.len())
            .map(|idx| {
                let i = (idx / st) % n;
                if i == 0 || i + 1 == n {
                    0.0
                } else {
                    (f[idx + st] - f[idx - st]) / (2.0 * h)
                }
            })
            .collect()
    };
    let margin = op.order() as usize;
    let interior: Vec<usize> = (0..cells)
        .filter(|&i| {
            mu.domain
                .multi_index(i)
                .iter()
                .zip(&mu.domain.cells)
                .all(|(&j, &n)| j >= margin && j + margin < n)
        })
        .collect();
    let out = op.fiber_out();
    let mut total = vec![0.0; cells * out];
    let mut scale = 0.0;
    for term in op.terms() {
        let mut g = values.clone();
        for (axis, &times) in term.alpha.entries().iter().enumerate() {
            for _ in 0..times {
                g = diff(&g, axis);
            }
        }
        let mut part = vec![0.0; cells * out];
        for &i in &interior {
            for r in 0..out {
                part[i * out + r] = (0..fiber)
                    .map(|c| term.matrix[(r, c)] * g[i * fiber + c])
                    .sum();
            }
        }
        scale += part.iter().map(|v| v * v).sum::<f64>();
        for (t, p) in total.iter_mut().zip(&part) {
            *t += p;
        }
    }
    let num = total.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(if scale > 0.0 { num / scale.sqrt() } else { 0.0 })
}

/// Half of the budget goes to the cells with the most concentration or
/// oscillation, the rest is spread evenly over the grid.
fn numeric_sample(ym: &DiscreteYoungMeasure, budget: usize) -> Vec<usize> {
    let n = ym.cells.len();
    if budget >= n {
        return (0..n).collect();
    }
    let weight = |c: &YoungCell| {
        let m = c.nu.mean();
        c.lambda
            + c.nu
                .expect(|z| norm(&z.iter().zip(&m).map(|(a, b)| a - b).collect::<Vec<_>>()))
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        weight(&ym.cells[b])
            .total_cmp(&weight(&ym.cells[a]))
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order[..budget / 2].to_vec();
    let rest = budget - chosen.len();
    for k in 0..rest {
        chosen.push(k * n / rest + n / (2 * rest));
    }
    chosen.sort_unstable();
    chosen.dedup();
    chosen
}

/// Checks the three conditions characterising `A`-free Young measures. The
/// Jensen condition is necessary for every `A`-quasiconvex `h`; only the
/// supplied family is tested, so a pass is evidence, not proof.
pub fn jensen_certificate(
    ym: &DiscreteYoungMeasure,
    op: &LinearOperator,
    family: &[QcMember],
    config: &CertificateConfig,
) -> Result<CertificateReport> {
    if family.is_empty() {
        return Err(Error::EmptyFamily);
    }
    ym.validate()?;
    if ym.fiber != op.fiber_in() || ym.domain.dim() != op.dim() {
        return Err(Error::InvalidInput(format!(
            "young measure (d={}, fiber={}) does not match operator `{}`",
            ym.domain.dim(),
            ym.fiber,
            op.name()
        )));
    }
    let audit = constant_rank_audit(op, 128, RANK_TOL)?;
    let bary = barycenter(ym);

    let residual = match config.barycenter_check {
        BarycenterCheck::Periodic => afree_residual(op, &bary),
        BarycenterCheck::Interior => interior_residual(op, &bary),
    };
    let barycenter_report = match residual {
        Ok(r) => ConditionReport {
            status: if r <= config.residual_tol {
                ConditionStatus::Pass
            } else {
                ConditionStatus::Fail
            },
            worst: r,
            location: match config.barycenter_check {
                BarycenterCheck::Periodic => "whole domain (periodic)".into(),
                BarycenterCheck::Interior => "interior cells".into(),
            },
        },
        Err(e) => ConditionReport {
            status: ConditionStatus::Skipped(e.to_string()),
            worst: f64::NAN,
            location: String::new(),
        },
    };

    // (ii): h(ac[nu](x)) <= <h, nu_x> + <h#, nu_inf_x> ac lambda(x)
    let all_cells: Vec<usize> = (0..ym.cells.len()).collect();
    let sampled = numeric_sample(ym, config.numeric_cells);
    let mut worst = (f64::NEG_INFINITY, String::new(), false);
    for m in family {
        let cells = if m.numeric { &sampled } else { &all_cells };
        let excesses: Vec<(f64, usize)> = cells
            .par_iter()
            .map(|&i| {
                let c = &ym.cells[i];
                let ac = bary.density_at(i);
                let lhs = m.value(ac);
                let mut rhs = c.nu.expect(|z| m.value(z));
                if let (Some(p), true) = (&c.nu_inf, c.lambda > 0.0) {
                    rhs += c.lambda * p.expect(|z| m.recession(z));
                }
                (lhs - rhs, i)
            })
            .collect();
        for (ex, i) in excesses {
            let failed = ex > m.slack + config.jensen_tol;
            if failed && !worst.2 || (failed == worst.2 && ex > worst.0) {
                worst = (ex, format!("cell {} ({})", i, m.label), failed);
            }
        }
    }
    let jensen = ConditionReport {
        status: if worst.2 {
            ConditionStatus::Fail
        } else {
            ConditionStatus::Pass
        },
        worst: worst.0,
        location: worst.1,
    };

    // (iii): supp nu_inf in W_A on lambda-sites
    let dist = |p: &[f64]| {
        let proj = project_onto(&audit.span_basis, p);
        norm(&p.iter().zip(&proj).map(|(a, b)| a - b).collect::<Vec<_>>())
    };
    let mut sup = (0.0f64, String::new());
    for (i, c) in ym.cells.iter().enumerate() {
        if let (Some(p), true) = (&c.nu_inf, c.lambda > 0.0) {
            for q in &p.points {
                let d = dist(q);
                if d > sup.0 {
                    sup = (d, format!("cell {i}, direction {q:?}"));
                }
            }
        }
    }
    for (k, a) in ym.atoms.iter().enumerate() {
        for q in &a.nu_inf.points {
            let d = dist(q);
            if d > sup.0 {
                sup = (d, format!("atom {k}, direction {q:?}"));
            }
        }
    }
    let support = ConditionReport {
        status: if sup.0 <= config.support_tol {
            ConditionStatus::Pass
        } else {
            ConditionStatus::Fail
        },
        worst: sup.0,
        location: sup.1,
    };
    Ok(CertificateReport {
        barycenter: barycenter_report,
        jensen,
        support,
    })
}

// ---------------------------------------------------------------------------
// Constructions.

/// Concentration measure `lambda` for [`concentration_builder`].
#[derive(Debug, Clone)]
pub enum LambdaSpec {
    /// Lebesgue measure on the domain.
    Lebesgue,
    /// Non-negative density per cell.
    Density(Vec<f64>),
    /// Point masses `(location, mass)`.
    Atoms(Vec<(Vec<f64>, f64)>),
}

#[derive(Debug, Clone)]
pub struct ConcentrationConfig {
    /// Cells per axis on `[0, 1]^d` (power of two).
    pub grid: usize,
    pub stages: usize,
    /// Profile width as a fraction of the period at the first stage; halves
    /// with every stage.
    pub width: f64,
    /// Minimal profile width in cells.
    pub min_cells: f64,
    /// Radius of the bumps carrying lambda atoms at the first stage.
    pub atom_radius: f64,
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        ConcentrationConfig {
            grid: 256,
            stages: 5,
            width: 0.25,
            min_cells: 4.0,
            atom_radius: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConcentrationRun {
    pub fields: Vec<DiscreteMeasure>,
    /// Oscillation frequency `j` of each stage.
    pub frequencies: Vec<usize>,
    /// `||A w_j||_{-k}` on the unit torus.
    pub residuals: Vec<f64>,
    /// Lattice direction used for each atom of `p`.
    pub witnesses: Vec<Vec<i64>>,
    /// `|A(m/|m|) P| / |P|` for the chosen lattice directions.
    pub witness_defects: Vec<f64>,
    /// The triple `(delta_A, lambda, p)` the sequence is built to generate.
    pub target: DiscreteYoungMeasure,
}

fn bump(t: f64) -> f64 {
    if t.abs() >= 0.5 {
        0.0
    } else {
        (-1.0 / (1.0 - 4.0 * t * t)).exp()
    }
}

/// Integer direction `m` (`|m|_inf <= 8`) with `A(m) P` smallest, preferring
/// short vectors among exact hits. Returns `m` and `|A(m/|m|) P| / |P|`
/// without the `(2 pi)^k` factor.
fn lattice_witness(op: &LinearOperator, p: &[f64]) -> (Vec<i64>, f64) {
    let d = op.dim();
    let r: i64 = 8;
    let width = (2 * r + 1) as usize;
    let scale = (2.0 * std::f64::consts::PI).powi(op.order() as i32) * norm(p);
    let mut best: Option<(f64, f64, f64, Vec<i64>)> = None;
    for lin in 0..width.pow(d as u32) {
        let mut rest = lin;
        let mut m = vec![0i64; d];
        for a in (0..d).rev() {
            m[a] = (rest % width) as i64 - r;
            rest /= width;
        }
        if !crate::spectral::is_canonical(&m) {
            continue;
        }
        let len = (m.iter().map(|v| (v * v) as f64).sum::<f64>()).sqrt();
        let xi: Vec<f64> = m.iter().map(|&v| v as f64 / len).collect();
        let defect = op.symbol_apply(&xi, p).norm() / scale;
        let key = if defect < 1e-10 { 0.0 } else { defect };
        let better = match &best {
            None => true,
            Some((bk, bl, _, _)) => key < *bk || (key == *bk && len < *bl),
        };
        if better {
            best = Some((key, len, defect, m));
        }
    }
    let (_, _, defect, m) = best.expect("non-empty lattice");
    (m, defect)
}

/// Sequence of fields on `[0, 1]^d`
///
/// ```text
/// w_j(x) = A + sum_i c_i P_i lambda_j(x) S_j(j m_i . x - phase_i)
/// ```
///
/// for `p = sum_i c_i delta_{P_i}`, with `S_j` a unit-mean periodic spike
/// train whose width shrinks with the stage, `m_i` an integer direction with
/// `P_i in ker A(m_i)` and distinct phases so the spikes do not overlap.
/// Each term is exactly `A`-free when `lambda` is constant; otherwise the
/// commutator with `lambda_j` is reported as the residual.
pub fn concentration_builder(
    op: &LinearOperator,
    a: &[f64],
    lambda: &LambdaSpec,
    p: &Probability,
    config: &ConcentrationConfig,
) -> Result<ConcentrationRun> {
    let d = op.dim();
    let fiber = op.fiber_in();
    if a.len() != fiber {
        return Err(Error::DimensionMismatch {
            what: "constant state A",
            expected: fiber,
            found: a.len(),
        });
    }
    p.validate_sphere(fiber)?;
    if norm(&p.mean()) > 1e-10 {
        return Err(Error::InvalidInput(format!(
            "p has nonzero mean {:?}",
            p.mean()
        )));
    }
    let n = config.grid;
    let domain = GridBox::unit(d, n);
    if domain.torus_grid().is_none() {
        return Err(Error::InvalidInput(format!(
            "grid {n} must be a power of two"
        )));
    }
    let mut witnesses = Vec::new();
    let mut defects = Vec::new();
    for q in &p.points {
        let m = wave_cone_membership(op, q, 1e-8)?;
        if !m.member {
            return Err(Error::OutsideWaveCone(q.clone()));
        }
        let (lat, defect) = lattice_witness(op, q);
        witnesses.push(lat);
        defects.push(defect);
    }
    let lambda_cells: Vec<f64> = match lambda {
        LambdaSpec::Lebesgue => vec![1.0; domain.n_cells()],
        LambdaSpec::Density(v) => {
            if v.len() != domain.n_cells() || v.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::InvalidInput(
                    "lambda density must be non-negative per cell".into(),
                ));
            }
            v.clone()
        }
        LambdaSpec::Atoms(list) => {
            for (x, m) in list {
                if !domain.strictly_inside(x) || !(*m > 0.0) {
                    return Err(Error::InvalidInput(
                        "lambda atoms need positive mass strictly inside".into(),
                    ));
                }
            }
            vec![0.0; domain.n_cells()]
        }
    };
    let h = 1.0 / n as f64;
    let n_atoms = p.points.len();
    let mut fields = Vec::new();
    let mut frequencies = Vec::new();
    let mut residuals = Vec::new();
    for s in 0..config.stages {
        let j = 1usize << s;
        // lambda at this stage
        let lam: Vec<f64> = match lambda {
            LambdaSpec::Atoms(list) => {
                let r = config.atom_radius / (j as f64).powf(0.25);
                let r = r.max(4.0 * h);
                let mut v = vec![0.0; domain.n_cells()];
                for (x0, mass) in list {
                    let mut tmp = vec![0.0; domain.n_cells()];
                    for (i, t) in tmp.iter_mut().enumerate() {
                        let x = domain.center(i);
                        let dist = norm(&x.iter().zip(x0).map(|(a, b)| a - b).collect::<Vec<_>>());
                        *t = bump(dist / (2.0 * r));
                    }
                    let total: f64 = tmp.iter().sum::<f64>() * domain.cell_volume();
                    for (a, b) in v.iter_mut().zip(&tmp) {
                        *a += mass * b / total;
                    }
                }
                v
            }
            _ => lambda_cells.clone(),
        };
        let mut density = vec![0.0; domain.n_cells() * fiber];
        for c in density.chunks_mut(fiber) {
            c.copy_from_slice(a);
        }
        for (i, (weight, dir)) in p.weights.iter().zip(&p.points).enumerate() {
            let m = &witnesses[i];
            let mlen = (m.iter().map(|v| (v * v) as f64).sum::<f64>()).sqrt();
            let period = 1.0 / (j as f64 * mlen);
            let min_width = config.min_cells * h / period;
            let width = (config.width / (1u64 << s) as f64)
                .max(min_width)
                .min(1.0 / n_atoms as f64);
            let phase = (i as f64 + 0.5) / n_atoms as f64;
            let profile: Vec<f64> = (0..domain.n_cells())
                .into_par_iter()
                .map(|cell| {
                    let x = domain.center(cell);
                    let t: f64 =
                        j as f64 * m.iter().zip(&x).map(|(a, b)| *a as f64 * b).sum::<f64>();
                    let u = (t - phase).rem_euclid(1.0);
                    let u = if u > 0.5 { u - 1.0 } else { u };
                    bump(u / width)
                })
                .collect();
            let mean = profile.iter().sum::<f64>() / profile.len() as f64;
            if mean == 0.0 {
                return Err(Error::InvalidInput(
                    "profile is not resolved by the grid".into(),
                ));
            }
            for (cell, c) in density.chunks_mut(fiber).enumerate() {
                let amp = weight * lam[cell] * profile[cell] / mean;
                for (v, q) in c.iter_mut().zip(dir) {
                    *v += amp * q;
                }
            }
        }
        let mu = DiscreteMeasure::from_density(domain.clone(), fiber, density)?;
        let field = mu.to_torus_field()?;
        let au = apply_operator(op, &field)?;
        residuals.push(sobolev_norm(
            &au,
            SobolevNormSpec {
                s: -(op.order() as f64),
            },
        ));
        frequencies.push(j);
        fields.push(mu);
    }
    let cell = |l: f64| YoungCell {
        nu: Probability::dirac(a.to_vec()),
        lambda: l,
        nu_inf: (l > 0.0).then(|| p.clone()),
    };
    let target = DiscreteYoungMeasure {
        domain: domain.clone(),
        fiber,
        cells: lambda_cells.iter().map(|&l| cell(l)).collect(),
        atoms: match lambda {
            LambdaSpec::Atoms(list) => list
                .iter()
                .map(|(x, m)| LambdaAtom {
                    location: x.clone(),
                    mass: *m,
                    nu_inf: p.clone(),
                })
                .collect(),
            _ => Vec::new(),
        },
    };
    Ok(ConcentrationRun {
        fields,
        frequencies,
        residuals,
        witnesses,
        witness_defects: defects,
        target,
    })
}

/// Output of [`divergence_flexibility`].
#[derive(Debug, Clone)]
pub struct FlexibilityResult {
    /// `w = -(<id, p> . D lambda) * Phi` on the domain.
    pub w: DiscreteMeasure,
    /// `(delta_w, lambda, p)`
    pub triple: DiscreteYoungMeasure,
    /// `||div w + <id,p> . D lambda|| / ||<id,p> . D lambda||` with central
    /// differences.
    pub residual: f64,
    /// Relative distance to the spectral solution of the same equation.
    pub spectral_gap: f64,
    pub certificate: CertificateReport,
}

/// Surface measure of the unit sphere in `R^d`.
fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        _ => {
            // 2 pi^{d/2} / Gamma(d/2) by the recursion |S^{d-1}| = 2 pi / (d-2) |S^{d-3}|
            2.0 * std::f64::consts::PI / (d as f64 - 2.0) * sphere_area(d - 2)
        }
    }
}

/// Cells closer than this many spacings to the kernel singularity are left
/// out of the convolution stencil.
pub const EXCLUSION_CELLS: f64 = 2.0;

/// Divergence-free completion of `<id, p> lambda`: convolves
/// `-(<id,p> . D lambda)` with the fundamental solution
/// `Phi(x) = x / (|S^{d-1}| |x|^d)` of the divergence, and returns the triple
/// `(delta_w, lambda, p)` with its certificate.
pub fn divergence_flexibility(
    domain: &GridBox,
    lambda: &[f64],
    p: &Probability,
    family: &[QcMember],
    config: &CertificateConfig,
) -> Result<FlexibilityResult> {
    let d = domain.dim();
    if !(d == 2 || d == 3) {
        return Err(Error::InvalidInput(
            "divergence flexibility needs d = 2 or 3".into(),
        ));
    }
    let n = domain
        .torus_grid()
        .ok_or_else(|| Error::InvalidInput("domain must be a cubic power-of-two grid".into()))?;
    if lambda.len() != domain.n_cells() || lambda.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidInput(
            "lambda must be a non-negative value per cell".into(),
        ));
    }
    if (0..lambda.len()).any(|i| domain.is_boundary_cell(i) && lambda[i] != 0.0) {
        return Err(Error::InvalidInput(
            "lambda must vanish on boundary cells".into(),
        ));
    }
    p.validate_sphere(d)?;
    let b = p.mean();
    let h = domain.spacing(0);

    // lambda * Phi_a on a zero-padded grid of twice the size
    let np = 2 * n;
    let padded_len = np.pow(d as u32);
    // the box sits in the middle of the padded grid, away from the wrap
    let pad_index = |multi: &[usize]| multi.iter().fold(0, |acc, &i| acc * np + i + n / 2);
    let mut lam_pad = vec![0.0; padded_len];
    for (i, &v) in lambda.iter().enumerate() {
        lam_pad[pad_index(&domain.multi_index(i))] = v;
    }
    // periodic central differences on the padded grid
    let diff = |f: &[f64], axis: usize| -> Vec<f64> {
        let stride = np.pow((d - 1 - axis) as u32);
        (0..padded_len)
            .into_par_iter()
            .map(|idx| {
                let i = (idx / stride) % np;
                let base = idx - i * stride;
                let fwd = f[base + ((i + 1) % np) * stride];
                let bwd = f[base + ((i + np - 1) % np) * stride];
                (fwd - bwd) / (2.0 * h)
            })
            .collect()
    };
    let norm_const = 1.0 / sphere_area(d);
    let displacement = |idx: usize| {
        let mut rest = idx;
        let mut r = vec![0.0; d];
        for c in (0..d).rev() {
            let i = rest % np;
            rest /= np;
            let signed = if i < np / 2 {
                i as f64
            } else {
                i as f64 - np as f64
            };
            r[c] = signed * h;
        }
        r
    };
    let mut kernels: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            (0..padded_len)
                .into_par_iter()
                .map(|idx| {
                    let r = displacement(idx);
                    let rn = norm(&r);
                    if rn < EXCLUSION_CELLS * h {
                        0.0
                    } else {
                        norm_const * r[a] / rn.powi(d as i32) * h.powi(d as i32)
                    }
                })
                .collect()
        })
        .collect();
    // renormalise so the discrete divergence of the truncated kernel has unit
    // mass near the origin
    let mut div_k = vec![0.0; padded_len];
    for (a, k) in kernels.iter().enumerate() {
        for (x, y) in div_k.iter_mut().zip(diff(k, a)) {
            *x += y;
        }
    }
    let reach = np as f64 / 4.0 * h;
    let mass: f64 = (0..padded_len)
        .filter(|&idx| norm(&displacement(idx)) <= reach)
        .map(|idx| div_k[idx])
        .sum();
    for k in kernels.iter_mut() {
        k.iter_mut().for_each(|v| *v /= mass);
    }
    // the excluded ball smears lambda over a shell; cancel the second moment
    // of that smearing by pre-correcting lambda with its Laplacian
    let near = 8.0 * h;
    let second_moment: f64 = (0..padded_len)
        .map(|idx| (idx, norm(&displacement(idx))))
        .filter(|&(_, r)| r <= near)
        .map(|(idx, r)| r * r * div_k[idx] / mass)
        .sum();
    let mut lam_corr = lam_pad.clone();
    for a in 0..d {
        let dd = diff(&diff(&lam_pad, a), a);
        for (x, y) in lam_corr.iter_mut().zip(dd) {
            *x -= second_moment / (2.0 * d as f64) * y;
        }
    }
    let lam_spec = TorusField::new(np, d, 1, lam_corr)?.spectrum();
    let mut potential = vec![vec![0.0; padded_len]; d];
    for (pot, kernel) in potential.iter_mut().zip(kernels) {
        let k_spec = TorusField::new(np, d, 1, kernel)?.spectrum();
        let total = padded_len as f64;
        // circular convolution = N_total * inverse(product of normalised coefficients)
        let mut prod = crate::spectral::Spectrum::zeros(np, d, 1);
        for idx in 0..padded_len {
            prod.coefficient_mut(idx)[0] =
                lam_spec.coefficient(idx)[0] * k_spec.coefficient(idx)[0] * total;
        }
        *pot = prod.to_field().into_values();
    }

    // w = -(b . D)(lambda * Phi)
    let mut w_pad = vec![vec![0.0; padded_len]; d];
    for (j, bj) in b.iter().enumerate() {
        if *bj == 0.0 {
            continue;
        }
        for (a, wa) in w_pad.iter_mut().enumerate() {
            let dv = diff(&potential[a], j);
            for (x, y) in wa.iter_mut().zip(dv) {
                *x -= bj * y;
            }
        }
    }
    // residual of div w + b . D lambda on the box
    let mut div_w = vec![0.0; padded_len];
    for (a, wa) in w_pad.iter().enumerate() {
        for (x, y) in div_w.iter_mut().zip(diff(wa, a)) {
            *x += y;
        }
    }
    let mut source = vec![0.0; padded_len];
    for (j, bj) in b.iter().enumerate() {
        for (x, y) in source.iter_mut().zip(diff(&lam_pad, j)) {
            *x += bj * y;
        }
    }
    let mut w_density = vec![0.0; domain.n_cells() * d];
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..domain.n_cells() {
        let idx = pad_index(&domain.multi_index(i));
        for a in 0..d {
            w_density[i * d + a] = w_pad[a][idx];
        }
        num += (div_w[idx] + source[idx]).powi(2);
        den += source[idx].powi(2);
    }
    let residual = if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    };

    // spectral oracle: w = -(gradient part of b lambda) on the padded torus
    let mut bl = vec![0.0; padded_len * d];
    for (idx, v) in lam_pad.iter().enumerate() {
        for a in 0..d {
            bl[idx * d + a] = b[a] * v;
        }
    }
    let bl_field = TorusField::new(np, d, d, bl)?;
    let w_spec = a_representative(&gallery::divergence(d), &bl_field)?.scale(-1.0);
    // the periodic solution differs from the free-space one by a constant
    // (the torus Green function compensates the mean of the source) and by
    // the smaller field of the periodic images; the constant is removed
    let cells = domain.n_cells();
    let mut offset = vec![0.0; d];
    for i in 0..cells {
        let idx = pad_index(&domain.multi_index(i));
        for a in 0..d {
            offset[a] += (w_density[i * d + a] - w_spec.values()[idx * d + a]) / cells as f64;
        }
    }
    let (mut gnum, mut gden) = (0.0, 0.0);
    for i in 0..cells {
        let idx = pad_index(&domain.multi_index(i));
        for a in 0..d {
            let s = w_spec.values()[idx * d + a];
            gnum += (w_density[i * d + a] - s - offset[a]).powi(2);
            gden += s * s;
        }
    }
    let spectral_gap = if gden > 0.0 {
        (gnum / gden).sqrt()
    } else {
        gnum.sqrt()
    };

    let w = DiscreteMeasure::from_density(domain.clone(), d, w_density)?;
    let triple = DiscreteYoungMeasure {
        domain: domain.clone(),
        fiber: d,
        cells: w
            .density
            .chunks(d)
            .zip(lambda)
            .map(|(c, &l)| YoungCell {
                nu: Probability::dirac(c.to_vec()),
                lambda: l,
                nu_inf: (l > 0.0).then(|| p.clone()),
            })
            .collect(),
        atoms: Vec::new(),
    };
    // w is not periodic on the box, so the barycenter is checked in the interior
    let config = CertificateConfig {
        barycenter_check: BarycenterCheck::Interior,
        ..*config
    };
    let certificate = jensen_certificate(&triple, &gallery::divergence(d), family, &config)?;
    Ok(FlexibilityResult {
        w,
        triple,
        residual,
        spectral_gap,
        certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> GridBox {
        GridBox::unit(2, 8)
    }

    fn e1() -> Vec<f64> {
        vec![1.0, 0.0]
    }

    fn split_pair() -> Probability {
        Probability::new(vec![0.5, 0.5], vec![e1(), vec![-1.0, 0.0]]).unwrap()
    }

    #[test]
    fn pairing_examples() {
        // elementary measure of a density: mean of f(w(x))
        let mu = DiscreteMeasure::from_fn(unit_box(), 2, |x, o| {
            o[0] = x[0];
            o[1] = -x[1];
        });
        let f = Integrand::area();
        let r = pairing(&f, &SpatialWeight::one(), &elementary(&mu)).unwrap();
        let direct: f64 = mu.density.chunks(2).map(|c| f.value(c)).sum::<f64>() / 64.0;
        assert!((r.value - direct).abs() < 1e-14);
        assert_eq!(r.concentration, 0.0);

        // (delta_0, unit atom at x0, delta_e)
        let mut ym = DiscreteYoungMeasure::uniform(
            unit_box(),
            YoungCell {
                nu: Probability::dirac(vec![0.0, 0.0]),
                lambda: 0.0,
                nu_inf: None,
            },
        )
        .unwrap();
        ym.atoms.push(LambdaAtom {
            location: vec![0.3, 0.6],
            mass: 1.0,
            nu_inf: Probability::dirac(e1()),
        });
        let r = pairing(&Integrand::area(), &SpatialWeight::one(), &ym).unwrap();
        assert!((r.value - 2.0).abs() < 1e-14);

        // (delta_A, L^d, (delta_e + delta_-e)/2) with f = |.|
        let a = vec![0.3, 0.4];
        let ym = DiscreteYoungMeasure::uniform(
            unit_box(),
            YoungCell {
                nu: Probability::dirac(a),
                lambda: 1.0,
                nu_inf: Some(split_pair()),
            },
        )
        .unwrap();
        let r = pairing(&Integrand::norm(), &SpatialWeight::one(), &ym).unwrap();
        assert!((r.value - 1.5).abs() < 1e-14);
        assert!((r.oscillation - 0.5).abs() < 1e-14 && (r.concentration - 1.0).abs() < 1e-14);
        // recession is required when lambda is present
        assert!(matches!(
            pairing(&Integrand::quadratic(), &SpatialWeight::one(), &ym),
            Err(Error::MissingRecession(_))
        ));
    }

    #[test]
    fn barycenter_examples() {
        let a = vec![0.3, -0.7];
        let ym = DiscreteYoungMeasure::uniform(
            unit_box(),
            YoungCell {
                nu: Probability::dirac(a.clone()),
                lambda: 2.5,
                nu_inf: Some(split_pair()),
            },
        )
        .unwrap();
        let b = barycenter(&ym);
        assert!(b
            .density
            .chunks(2)
            .all(|c| (c[0] - a[0]).abs() < 1e-15 && (c[1] - a[1]).abs() < 1e-15));
        assert!(b.atoms.is_empty());

        let mut mu = DiscreteMeasure::from_fn(unit_box(), 2, |x, o| o[0] = x[1]);
        mu.push_atom(vec![0.5, 0.5], 2.0, &[0.6, 0.8]).unwrap();
        assert_eq!(barycenter(&elementary(&mu)), mu);

        let mut ym = elementary(&DiscreteMeasure::zero(unit_box(), 2));
        ym.atoms.push(LambdaAtom {
            location: vec![0.2, 0.2],
            mass: 1.0,
            nu_inf: Probability::dirac(e1()),
        });
        let b = barycenter(&ym);
        assert_eq!(b.atoms.len(), 1);
        assert_eq!(b.atoms[0].mass, 1.0);
        assert_eq!(b.atoms[0].direction, e1());
    }

    #[test]
    fn elementary_examples() {
        let zero = elementary(&DiscreteMeasure::zero(unit_box(), 2));
        assert_eq!(zero.lambda_total(), 0.0);
        assert!(zero.cells.iter().all(|c| c.nu.points[0] == vec![0.0, 0.0]));
        let mut mu = DiscreteMeasure::zero(unit_box(), 2);
        mu.push_atom(vec![0.4, 0.4], 3.0, &e1()).unwrap();
        let ym = elementary(&mu);
        assert_eq!(ym.atoms[0].mass, 3.0);
        assert_eq!(ym.atoms[0].nu_inf, Probability::dirac(e1()));
    }

    #[test]
    fn shift_examples() {
        let mu = DiscreteMeasure::from_fn(unit_box(), 2, |x, o| {
            o[0] = x[0];
            o[1] = 1.0;
        });
        let ym = elementary(&mu);
        let zero = vec![0.0; 128];
        assert_eq!(shift(&ym, &zero).unwrap(), ym);
        let v: Vec<f64> = (0..128).map(|i| (i as f64).sin()).collect();
        let minus: Vec<f64> = v.iter().map(|x| -x).collect();
        let back = shift(&shift(&ym, &v).unwrap(), &minus).unwrap();
        for (a, b) in back.cells.iter().zip(&ym.cells) {
            for (p, q) in a.nu.points[0].iter().zip(&b.nu.points[0]) {
                assert!((p - q).abs() < 1e-15);
            }
        }
        let b = barycenter(&shift(&ym, &v).unwrap());
        for (i, c) in b.density.iter().enumerate() {
            assert!((c - (mu.density[i] + v[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn area_examples() {
        let zero = DiscreteMeasure::zero(unit_box(), 2);
        assert!((area_functional(&zero) - 1.0).abs() < 1e-15);
        let mut atom = zero.clone();
        atom.push_atom(vec![0.5, 0.5], 0.7, &e1()).unwrap();
        assert!((area_functional(&atom) - 1.7).abs() < 1e-15);
        let big = GridBox::centered(2, 1.0, 4);
        let c = DiscreteMeasure::from_fn(big, 2, |_, o| {
            o[0] = 3.0;
            o[1] = 4.0;
        });
        assert!((area_functional(&c) - 4.0 * 26f64.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn young_file_round_trip() {
        let ym = DiscreteYoungMeasure::uniform(
            unit_box(),
            YoungCell {
                nu: Probability::new(vec![0.25, 0.75], vec![vec![1.0, 2.0], vec![0.0, -1.0]])
                    .unwrap(),
                lambda: 0.5,
                nu_inf: Some(split_pair()),
            },
        )
        .unwrap();
        let back = DiscreteYoungMeasure::from_json(&ym.to_json()).unwrap();
        assert_eq!(back, ym);
        let uniform = r#"{"domain": {"lower": [0, 0], "upper": [1, 1], "cells": [2, 2]}, "fiber": 2,
            "uniform": {"nu": {"weights": [1], "points": [[0, 0]]}}}"#;
        assert_eq!(
            DiscreteYoungMeasure::from_json(uniform)
                .unwrap()
                .cells
                .len(),
            4
        );
        let bad = r#"{"domain": {"lower": [0, 0], "upper": [1, 1], "cells": [2, 2]}, "fiber": 2,
            "uniform": {"nu": {"weights": [0.5], "points": [[0, 0]]}}}"#;
        assert!(DiscreteYoungMeasure::from_json(bad).is_err());
        assert!(matches!(
            DiscreteYoungMeasure::from_json("{"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn atoms_must_be_interior() {
        let mut ym = elementary(&DiscreteMeasure::zero(unit_box(), 2));
        ym.atoms.push(LambdaAtom {
            location: vec![0.0, 0.5],
            mass: 1.0,
            nu_inf: Probability::dirac(e1()),
        });
        assert!(ym.validate().is_err());
    }

    #[test]
    fn extrapolation() {
        let seq: Vec<f64> = (0..6).map(|k| 2.0 + 0.5f64.powi(k)).collect();
        let l = extrapolate(&seq);
        assert!((l.value - 2.0).abs() < 1e-12 && l.converged);
        let constant = extrapolate(&[1.0, 1.0, 1.0]);
        assert!(constant.converged && constant.value == 1.0);
        let noisy = extrapolate(&[1.0, 1.1, 0.8]);
        assert!(!noisy.converged);
    }

    #[test]
    fn certificate_needs_family() {
        let ym = elementary(&DiscreteMeasure::zero(GridBox::unit(2, 8), 2));
        assert!(matches!(
            jensen_certificate(
                &ym,
                &gallery::divergence(2),
                &[],
                &CertificateConfig::default()
            ),
            Err(Error::EmptyFamily)
        ));
    }

    #[test]
    fn elementary_free_measure_is_certified() {
        // w = (sin 2 pi x2, cos 2 pi x1) is divergence-free
        let mu = DiscreteMeasure::from_fn(GridBox::unit(2, 16), 2, |x, o| {
            o[0] = (2.0 * std::f64::consts::PI * x[1]).sin();
            o[1] = (2.0 * std::f64::consts::PI * x[0]).cos();
        });
        let family = default_qc_family(&gallery::divergence(2), false).unwrap();
        let r = jensen_certificate(
            &elementary(&mu),
            &gallery::divergence(2),
            &family,
            &CertificateConfig::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.jensen.worst <= 1e-12);
    }

    #[test]
    fn builder_with_zero_amplitude_is_constant() {
        let op = gallery::divergence(2);
        let p = split_pair();
        let cfg = ConcentrationConfig {
            grid: 16,
            stages: 1,
            ..ConcentrationConfig::default()
        };
        let run = concentration_builder(
            &op,
            &[0.5, 0.25],
            &LambdaSpec::Density(vec![0.0; 256]),
            &p,
            &cfg,
        )
        .unwrap();
        assert_eq!(run.fields.len(), 1);
        assert!(run.fields[0].density.chunks(2).all(|c| c == [0.5, 0.25]));
        assert!(run.residuals[0] < 1e-12);
    }

    #[test]
    fn builder_rejects_directions_outside_the_cone() {
        let p = Probability::new(vec![0.5, 0.5], vec![vec![1.0], vec![-1.0]]).unwrap();
        let r = concentration_builder(
            &gallery::laplacian(2),
            &[0.0],
            &LambdaSpec::Lebesgue,
            &p,
            &ConcentrationConfig::default(),
        );
        assert!(matches!(r, Err(Error::OutsideWaveCone(_))));
    }

    #[test]
    fn flexibility_trivial_cases() {
        let domain = GridBox::centered(2, 1.0, 32);
        let family = default_qc_family(&gallery::divergence(2), false).unwrap();
        let zero = vec![0.0; domain.n_cells()];
        let r = divergence_flexibility(
            &domain,
            &zero,
            &Probability::dirac(e1()),
            &family,
            &CertificateConfig::default(),
        )
        .unwrap();
        assert_eq!(r.w.density.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
        let lam: Vec<f64> = (0..domain.n_cells())
            .map(|i| {
                let x = domain.center(i);
                bump(norm(&x) / 1.2)
            })
            .collect();
        let r = divergence_flexibility(
            &domain,
            &lam,
            &split_pair(),
            &family,
            &CertificateConfig::default(),
        )
        .unwrap();
        assert_eq!(r.w.density.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
    }
}
