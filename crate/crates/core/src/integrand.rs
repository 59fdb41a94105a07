//! Integrands `f: W -> R` built from a small expression language, with
//! optional smoothing of the non-differentiable pieces, analytic strong
//! recession functions, growth constants and the `S` and tilde transforms.
//!
//! Text syntax (sums, differences, numeric scaling and nesting):
//!
//! ```text
//! norm()  area()  quadratic()  radial_double_well()
//! constant(c=2.0)  linear(l=[1, 0])
//! distance(points=[[1, 0], [-1, 0]])
//! min(norm(), 0.5 * distance(points=[[2, 0]]))
//! 2 * area() - 1
//! ```

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{norm, project_onto};

/// Expression tree of an integrand.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Constant(f64),
    /// `l . z`
    Linear(Vec<f64>),
    /// `|z|`
    Norm,
    /// `sqrt(1 + |z|^2)`
    Area,
    /// `|z|^2`
    Quadratic,
    /// `(|z|^2 - 1)^2`
    RadialDoubleWell,
    /// `min_i |z - p_i|`
    Distance(Vec<Vec<f64>>),
    /// `min_i f_i(z)`
    Min(Vec<Expr>),
    Sum(Vec<Expr>),
    Scale(f64, Box<Expr>),
    /// `f(P z)` with `P` the orthogonal projector onto the span of an
    /// orthonormal family.
    Project(Arc<Vec<Vec<f64>>>, Box<Expr>),
}

/// Evaluable integrand. `smoothing > 0` replaces `|.|` by
/// `sqrt(|.|^2 + s^2) - s` and hard minima by `-s log sum exp(-./s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Integrand {
    expr: Expr,
    smoothing: f64,
}

/// Classification used in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrandKind {
    Polynomial,
    NormComposite,
    DistanceToPointSet,
    PositivelyHomogeneous,
    SmoothedMin,
}

/// Upper recession value together with how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecessionValue {
    pub value: f64,
    /// `false` when the value is the numerical limsup estimate.
    pub analytic: bool,
}

impl Integrand {
    pub fn new(expr: Expr) -> Self {
        Integrand {
            expr,
            smoothing: 0.0,
        }
    }

    pub fn norm() -> Self {
        Self::new(Expr::Norm)
    }
    pub fn area() -> Self {
        Self::new(Expr::Area)
    }
    pub fn quadratic() -> Self {
        Self::new(Expr::Quadratic)
    }
    pub fn radial_double_well() -> Self {
        Self::new(Expr::RadialDoubleWell)
    }
    pub fn constant(c: f64) -> Self {
        Self::new(Expr::Constant(c))
    }
    pub fn distance(points: Vec<Vec<f64>>) -> Self {
        Self::new(Expr::Distance(points))
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn with_smoothing(&self, s: f64) -> Self {
        Integrand {
            expr: self.expr.clone(),
            smoothing: s.max(0.0),
        }
    }

    /// Parse the text syntax described in the module documentation.
    pub fn parse(text: &str) -> Result<Self> {
        Parser::new(text).parse_all().map(Integrand::new)
    }

    pub fn kind(&self) -> IntegrandKind {
        if self.expr.contains_min() {
            IntegrandKind::SmoothedMin
        } else if self.expr.contains_distance() {
            IntegrandKind::DistanceToPointSet
        } else if self.expr.is_positively_homogeneous() {
            IntegrandKind::PositivelyHomogeneous
        } else if self.expr.is_polynomial() {
            IntegrandKind::Polynomial
        } else {
            IntegrandKind::NormComposite
        }
    }

    /// Fiber dimension fixed by the expression, if any.
    pub fn fixed_dim(&self) -> Option<usize> {
        self.expr.fixed_dim()
    }

    /// Checks that the integrand can be evaluated on `R^dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.expr.validate(dim)
    }

    /// Whether gradients exist everywhere.
    pub fn is_differentiable(&self) -> bool {
        self.smoothing > 0.0 || !self.expr.has_kinks()
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.expr.value(z, self.smoothing)
    }

    /// Gradient; at kinks of an unsmoothed integrand a subgradient is
    /// returned.
    pub fn gradient(&self, z: &[f64], out: &mut [f64]) -> f64 {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.expr.value_grad(z, self.smoothing, 1.0, out)
    }

    /// Analytic strong recession `lim f(tz')/t`, when it exists.
    pub fn recession(&self, z: &[f64]) -> Option<f64> {
        self.expr.recession(z)
    }

    pub fn has_recession(&self) -> bool {
        self.expr.has_recession()
    }

    /// `M` with `|f(z)| <= M (1 + |z|)`, when the integrand has linear growth.
    pub fn growth_constant(&self) -> Option<f64> {
        self.expr.growth()
    }

    pub fn lipschitz_constant(&self) -> Option<f64> {
        self.expr.lipschitz()
    }

    /// Upper recession `f^#(z)`: analytic when available, else the
    /// numerical estimate.
    pub fn upper_recession(&self, z: &[f64]) -> RecessionValue {
        match self.recession(z) {
            Some(value) => RecessionValue {
                value,
                analytic: true,
            },
            None => RecessionValue {
                value: self.upper_recession_estimate(z),
                analytic: false,
            },
        }
    }

    /// Max of `f(t z')/t` over 64 points `z'` in balls of radius
    /// `max(|z|, 1)/t^{1/2}` around `z`, for `t in {2^4, ..., 2^12}`; the
    /// limsup is read off the three largest scales.
    pub fn upper_recession_estimate(&self, z: &[f64]) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let scale = norm(z).max(1.0);
        let mut per_t = Vec::new();
        for e in 4..=12 {
            let t = f64::powi(2.0, e);
            let radius = scale / t.sqrt();
            let mut best = self.value(&z.iter().map(|v| v * t).collect::<Vec<_>>()) / t;
            for _ in 0..64 {
                let dir: Vec<f64> = (0..z.len()).map(|_| rng.sample(StandardNormal)).collect();
                let nd = norm(&dir).max(f64::MIN_POSITIVE);
                let r = radius * rng.random::<f64>();
                let zp: Vec<f64> = z
                    .iter()
                    .zip(&dir)
                    .map(|(a, b)| t * (a + r * b / nd))
                    .collect();
                best = best.max(self.value(&zp) / t);
            }
            per_t.push(best);
        }
        // limsup: the tail maximum over the largest scales
        per_t[per_t.len() - 3..]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(Sf)(z) = (1 - |z|) f(z / (1 - |z|))` on the closed unit ball, with
    /// `f^inf` on the sphere.
    pub fn s_transform(&self, z: &[f64]) -> Result<f64> {
        let r = norm(z);
        if r > 1.0 + 1e-12 {
            return Err(Error::InvalidInput(format!("|z| = {r} exceeds 1")));
        }
        if (1.0 - r).abs() <= 1e-12 {
            return self
                .recession(z)
                .ok_or_else(|| Error::MissingRecession(self.to_string()));
        }
        let s = 1.0 - r;
        let inner: Vec<f64> = z.iter().map(|v| v / s).collect();
        Ok(s * self.value(&inner))
    }

    /// `f~(z) = f(P z)` for the orthogonal projector onto the span of an
    /// orthonormal family.
    pub fn tilde_transform(&self, span_basis: &[Vec<f64>]) -> Integrand {
        Integrand {
            expr: Expr::Project(Arc::new(span_basis.to_vec()), Box::new(self.expr.clone())),
            smoothing: self.smoothing,
        }
    }

    /// `f + c |.|`
    pub fn plus_norm(&self, c: f64) -> Integrand {
        Integrand {
            expr: Expr::Sum(vec![
                self.expr.clone(),
                Expr::Scale(c, Box::new(Expr::Norm)),
            ]),
            smoothing: self.smoothing,
        }
    }
}

impl fmt::Display for Integrand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.expr)
    }
}

fn write_vec(f: &mut fmt::Formatter<'_>, v: &[f64]) -> fmt::Result {
    write!(f, "[")?;
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            write!(f, ", ")?;
        }
        write!(f, "{x}")?;
    }
    write!(f, "]")
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Constant(c) => write!(f, "constant(c={c})"),
            Expr::Linear(l) => {
                write!(f, "linear(l=")?;
                write_vec(f, l)?;
                write!(f, ")")
            }
            Expr::Norm => write!(f, "norm()"),
            Expr::Area => write!(f, "area()"),
            Expr::Quadratic => write!(f, "quadratic()"),
            Expr::RadialDoubleWell => write!(f, "radial_double_well()"),
            Expr::Distance(points) => {
                write!(f, "distance(points=[")?;
                for (i, p) in points.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write_vec(f, p)?;
                }
                write!(f, "])")
            }
            Expr::Min(items) => {
                write!(f, "min(")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, ")")
            }
            Expr::Sum(items) => {
                write!(f, "(")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, ")")
            }
            Expr::Scale(c, e) => write!(f, "{c} * {e}"),
            Expr::Project(basis, e) => {
                write!(f, "project(basis=[")?;
                for (i, b) in basis.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write_vec(f, b)?;
                }
                write!(f, "], {e})")
            }
        }
    }
}

fn smooth_abs(r: f64, s: f64) -> f64 {
    if s > 0.0 {
        (r * r + s * s).sqrt() - s
    } else {
        r
    }
}

/// Derivative of `smooth_abs` divided by `r` (so that the gradient of
/// `smooth_abs(|v|)` is `factor * v`).
fn smooth_abs_factor(r: f64, s: f64) -> f64 {
    if s > 0.0 {
        1.0 / (r * r + s * s).sqrt()
    } else if r > 0.0 {
        1.0 / r
    } else {
        0.0
    }
}

/// Smoothed minimum and its weights.
fn soft_min(values: &[f64], s: f64) -> (f64, Vec<f64>) {
    let m = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if s > 0.0 {
        let ws: Vec<f64> = values.iter().map(|v| (-(v - m) / s).exp()).collect();
        let total: f64 = ws.iter().sum();
        (
            m - s * total.ln(),
            ws.into_iter().map(|w| w / total).collect(),
        )
    } else {
        let idx = values.iter().position(|&v| v == m).unwrap_or(0);
        let mut ws = vec![0.0; values.len()];
        ws[idx] = 1.0;
        (m, ws)
    }
}

impl Expr {
    fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Min(v) | Expr::Sum(v) => v.iter().collect(),
            Expr::Scale(_, e) | Expr::Project(_, e) => vec![e],
            _ => Vec::new(),
        }
    }

    fn any(&self, p: &dyn Fn(&Expr) -> bool) -> bool {
        p(self) || self.children().into_iter().any(|c| c.any(p))
    }

    fn contains_min(&self) -> bool {
        self.any(&|e| matches!(e, Expr::Min(_)))
    }

    fn contains_distance(&self) -> bool {
        self.any(&|e| matches!(e, Expr::Distance(_)))
    }

    fn has_kinks(&self) -> bool {
        self.any(&|e| matches!(e, Expr::Norm | Expr::Distance(_) | Expr::Min(_)))
    }

    fn is_polynomial(&self) -> bool {
        match self {
            Expr::Constant(_) | Expr::Linear(_) | Expr::Quadratic | Expr::RadialDoubleWell => true,
            Expr::Sum(v) => v.iter().all(|e| e.is_polynomial()),
            Expr::Scale(_, e) | Expr::Project(_, e) => e.is_polynomial(),
            _ => false,
        }
    }

    fn is_positively_homogeneous(&self) -> bool {
        match self {
            Expr::Linear(_) | Expr::Norm => true,
            Expr::Sum(v) | Expr::Min(v) => v.iter().all(|e| e.is_positively_homogeneous()),
            Expr::Scale(_, e) | Expr::Project(_, e) => e.is_positively_homogeneous(),
            _ => false,
        }
    }

    fn fixed_dim(&self) -> Option<usize> {
        match self {
            Expr::Linear(l) => Some(l.len()),
            Expr::Distance(p) => p.first().map(|p| p.len()),
            Expr::Project(b, e) => b.first().map(|b| b.len()).or_else(|| e.fixed_dim()),
            _ => self.children().into_iter().find_map(|c| c.fixed_dim()),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let check = |len: usize| {
            if len == dim {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    what: "integrand vector length",
                    expected: dim,
                    found: len,
                })
            }
        };
        match self {
            Expr::Linear(l) => check(l.len())?,
            Expr::Distance(p) => {
                if p.is_empty() {
                    return Err(Error::InvalidInput(
                        "distance() needs at least one point".into(),
                    ));
                }
                for q in p {
                    check(q.len())?;
                }
            }
            Expr::Min(v) if v.is_empty() => {
                return Err(Error::InvalidInput(
                    "min() needs at least one argument".into(),
                ))
            }
            Expr::Project(b, _) => {
                for q in b.iter() {
                    check(q.len())?;
                }
            }
            _ => {}
        }
        for c in self.children() {
            c.validate(dim)?;
        }
        Ok(())
    }

    fn value(&self, z: &[f64], s: f64) -> f64 {
        match self {
            Expr::Constant(c) => *c,
            Expr::Linear(l) => l.iter().zip(z).map(|(a, b)| a * b).sum(),
            Expr::Norm => smooth_abs(norm(z), s),
            Expr::Area => (1.0 + z.iter().map(|v| v * v).sum::<f64>()).sqrt(),
            Expr::Quadratic => z.iter().map(|v| v * v).sum(),
            Expr::RadialDoubleWell => {
                let r2: f64 = z.iter().map(|v| v * v).sum();
                (r2 - 1.0) * (r2 - 1.0)
            }
            Expr::Distance(points) => {
                let ds: Vec<f64> = points
                    .iter()
                    .map(|p| {
                        let r = z
                            .iter()
                            .zip(p)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        smooth_abs(r, s)
                    })
                    .collect();
                soft_min(&ds, s).0
            }
            Expr::Min(items) => {
                let vs: Vec<f64> = items.iter().map(|e| e.value(z, s)).collect();
                soft_min(&vs, s).0
            }
            Expr::Sum(items) => items.iter().map(|e| e.value(z, s)).sum(),
            Expr::Scale(c, e) => c * e.value(z, s),
            Expr::Project(b, e) => e.value(&project_onto(b, z), s),
        }
    }

    /// Returns the value and accumulates `weight * gradient` into `out`.
    fn value_grad(&self, z: &[f64], s: f64, weight: f64, out: &mut [f64]) -> f64 {
        match self {
            Expr::Constant(c) => *c,
            Expr::Linear(l) => {
                for (o, a) in out.iter_mut().zip(l) {
                    *o += weight * a;
                }
                l.iter().zip(z).map(|(a, b)| a * b).sum()
            }
            Expr::Norm => {
                let r = norm(z);
                let k = smooth_abs_factor(r, s);
                for (o, v) in out.iter_mut().zip(z) {
                    *o += weight * k * v;
                }
                smooth_abs(r, s)
            }
            Expr::Area => {
                let a = (1.0 + z.iter().map(|v| v * v).sum::<f64>()).sqrt();
                for (o, v) in out.iter_mut().zip(z) {
                    *o += weight * v / a;
                }
                a
            }
            Expr::Quadratic => {
                for (o, v) in out.iter_mut().zip(z) {
                    *o += weight * 2.0 * v;
                }
                z.iter().map(|v| v * v).sum()
            }
            Expr::RadialDoubleWell => {
                let r2: f64 = z.iter().map(|v| v * v).sum();
                for (o, v) in out.iter_mut().zip(z) {
                    *o += weight * 4.0 * (r2 - 1.0) * v;
                }
                (r2 - 1.0) * (r2 - 1.0)
            }
            Expr::Distance(points) => {
                let rs: Vec<f64> = points
                    .iter()
                    .map(|p| {
                        z.iter()
                            .zip(p)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                let ds: Vec<f64> = rs.iter().map(|&r| smooth_abs(r, s)).collect();
                let (v, ws) = soft_min(&ds, s);
                for ((p, &r), w) in points.iter().zip(&rs).zip(&ws) {
                    if *w == 0.0 {
                        continue;
                    }
                    let k = smooth_abs_factor(r, s);
                    for ((o, a), b) in out.iter_mut().zip(z).zip(p) {
                        *o += weight * w * k * (a - b);
                    }
                }
                v
            }
            Expr::Min(items) => {
                let vs: Vec<f64> = items.iter().map(|e| e.value(z, s)).collect();
                let (v, ws) = soft_min(&vs, s);
                for (e, w) in items.iter().zip(&ws) {
                    if *w != 0.0 {
                        e.value_grad(z, s, weight * w, out);
                    }
                }
                v
            }
            Expr::Sum(items) => items.iter().map(|e| e.value_grad(z, s, weight, out)).sum(),
            Expr::Scale(c, e) => c * e.value_grad(z, s, weight * c, out),
            Expr::Project(b, e) => {
                let pz = project_onto(b, z);
                let mut g = vec![0.0; z.len()];
                let v = e.value_grad(&pz, s, weight, &mut g);
                // the projector is symmetric
                for (o, pg) in out.iter_mut().zip(project_onto(b, &g)) {
                    *o += pg;
                }
                v
            }
        }
    }

    fn has_recession(&self) -> bool {
        match self {
            Expr::Quadratic | Expr::RadialDoubleWell => false,
            _ => self.children().into_iter().all(|c| c.has_recession()),
        }
    }

    fn recession(&self, z: &[f64]) -> Option<f64> {
        Some(match self {
            Expr::Constant(_) => 0.0,
            Expr::Linear(l) => l.iter().zip(z).map(|(a, b)| a * b).sum(),
            Expr::Norm | Expr::Area | Expr::Distance(_) => norm(z),
            Expr::Quadratic | Expr::RadialDoubleWell => return None,
            Expr::Min(items) => {
                let mut m = f64::INFINITY;
                for e in items {
                    m = m.min(e.recession(z)?);
                }
                m
            }
            Expr::Sum(items) => {
                let mut t = 0.0;
                for e in items {
                    t += e.recession(z)?;
                }
                t
            }
            Expr::Scale(c, e) => c * e.recession(z)?,
            Expr::Project(b, e) => e.recession(&project_onto(b, z))?,
        })
    }

    fn growth(&self) -> Option<f64> {
        Some(match self {
            Expr::Constant(c) => c.abs(),
            Expr::Linear(l) => norm(l),
            Expr::Norm | Expr::Area => 1.0,
            Expr::Distance(p) => p
                .iter()
                .map(|q| norm(q))
                .fold(f64::INFINITY, f64::min)
                .max(1.0),
            Expr::Quadratic | Expr::RadialDoubleWell => return None,
            Expr::Min(items) => {
                let mut m: f64 = 0.0;
                for e in items {
                    m = m.max(e.growth()?);
                }
                m
            }
            Expr::Sum(items) => {
                let mut t = 0.0;
                for e in items {
                    t += e.growth()?;
                }
                t
            }
            Expr::Scale(c, e) => c.abs() * e.growth()?,
            Expr::Project(_, e) => e.growth()?,
        })
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(match self {
            Expr::Constant(_) => 0.0,
            Expr::Linear(l) => norm(l),
            Expr::Norm | Expr::Area | Expr::Distance(_) => 1.0,
            Expr::Quadratic | Expr::RadialDoubleWell => return None,
            Expr::Min(items) => {
                let mut m: f64 = 0.0;
                for e in items {
                    m = m.max(e.lipschitz()?);
                }
                m
            }
            Expr::Sum(items) => {
                let mut t = 0.0;
                for e in items {
                    t += e.lipschitz()?;
                }
                t
            }
            Expr::Scale(c, e) => c.abs() * e.lipschitz()?,
            Expr::Project(_, e) => e.lipschitz()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Parser.

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Eq,
    Plus,
    Minus,
    Star,
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    error: Option<Error>,
}

#[derive(Debug, Clone)]
enum Value {
    Num(f64),
    List(Vec<Value>),
}

impl Parser {
    fn new(text: &str) -> Self {
        let mut tokens = Vec::new();
        let mut error = None;
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            match c {
                ' ' | '\t' | '\n' | '\r' => {
                    i += 1;
                    continue;
                }
                '(' => tokens.push((col, Token::LParen)),
                ')' => tokens.push((col, Token::RParen)),
                '[' => tokens.push((col, Token::LBracket)),
                ']' => tokens.push((col, Token::RBracket)),
                ',' => tokens.push((col, Token::Comma)),
                '=' => tokens.push((col, Token::Eq)),
                '+' => tokens.push((col, Token::Plus)),
                '-' | '\u{2212}' => tokens.push((col, Token::Minus)),
                '*' => tokens.push((col, Token::Star)),
                c if c.is_ascii_digit() || c == '.' => {
                    let start = i;
                    while i < chars.len()
                        && (chars[i].is_ascii_digit()
                            || chars[i] == '.'
                            || chars[i] == 'e'
                            || chars[i] == 'E'
                            || ((chars[i] == '-' || chars[i] == '+')
                                && matches!(chars[i - 1], 'e' | 'E')))
                    {
                        i += 1;
                    }
                    let s: String = chars[start..i].iter().collect();
                    match s.parse::<f64>() {
                        Ok(v) => tokens.push((col, Token::Num(v))),
                        Err(_) => {
                            error.get_or_insert(Error::parse(
                                format!("column {col}"),
                                format!("bad number `{s}`"),
                            ));
                        }
                    }
                    continue;
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let start = i;
                    while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                        i += 1;
                    }
                    tokens.push((col, Token::Ident(chars[start..i].iter().collect())));
                    continue;
                }
                other => {
                    error.get_or_insert(Error::parse(
                        format!("column {col}"),
                        format!("unexpected character `{other}`"),
                    ));
                }
            }
            i += 1;
        }
        Parser {
            tokens,
            pos: 0,
            error,
        }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        self.err_at(self.pos, message)
    }

    fn err_at<T>(&self, idx: usize, message: impl Into<String>) -> Result<T> {
        let location = match self.tokens.get(idx) {
            Some((col, _)) => format!("column {col}"),
            None => "end of input".to_string(),
        };
        Err(Error::parse(location, message))
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, tok: Token) -> Result<()> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {tok:?}"))
        }
    }

    fn parse_all(mut self) -> Result<Expr> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if self.tokens.is_empty() {
            return self.err("empty integrand");
        }
        let e = self.expr()?;
        if self.pos < self.tokens.len() {
            return self.err("trailing input");
        }
        Ok(e)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut items = vec![self.term()?];
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    items.push(self.term()?);
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    let t = self.term()?;
                    items.push(Expr::Scale(-1.0, Box::new(t)));
                }
                _ => break,
            }
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Expr::Sum(items)
        })
    }

    fn term(&mut self) -> Result<Expr> {
        let mut e = self.factor()?;
        while self.peek() == Some(&Token::Star) {
            self.pos += 1;
            let rhs = self.factor()?;
            e = match (e, rhs) {
                (Expr::Constant(a), Expr::Constant(b)) => Expr::Constant(a * b),
                (Expr::Constant(a), other) | (other, Expr::Constant(a)) => {
                    Expr::Scale(a, Box::new(other))
                }
                _ => return self.err("products are only allowed with a numeric factor"),
            };
        }
        Ok(e)
    }

    fn factor(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Expr::Constant(v)),
            Some(Token::Minus) => {
                let f = self.factor()?;
                Ok(match f {
                    Expr::Constant(v) => Expr::Constant(-v),
                    other => Expr::Scale(-1.0, Box::new(other)),
                })
            }
            Some(Token::LParen) => {
                let e = self.expr()?;
                self.expect(Token::RParen)?;
                Ok(e)
            }
            Some(Token::Ident(name)) => self.call(&name),
            _ => {
                self.pos -= 1;
                self.err("expected a number, a call or `(`")
            }
        }
    }

    fn value(&mut self) -> Result<Value> {
        match self.peek() {
            Some(Token::LBracket) => {
                self.pos += 1;
                let mut items = Vec::new();
                if self.peek() != Some(&Token::RBracket) {
                    loop {
                        items.push(self.value()?);
                        if self.peek() == Some(&Token::Comma) {
                            self.pos += 1;
                        } else {
                            break;
                        }
                    }
                }
                self.expect(Token::RBracket)?;
                Ok(Value::List(items))
            }
            Some(Token::Minus) => {
                self.pos += 1;
                match self.value()? {
                    Value::Num(v) => Ok(Value::Num(-v)),
                    _ => self.err("cannot negate a list"),
                }
            }
            Some(Token::Num(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(Value::Num(v))
            }
            _ => self.err("expected a number or a list"),
        }
    }

    fn call(&mut self, name: &str) -> Result<Expr> {
        let start = self.pos - 1;
        self.expect(Token::LParen)?;
        if name == "min" {
            let mut items = vec![self.expr()?];
            while self.peek() == Some(&Token::Comma) {
                self.pos += 1;
                items.push(self.expr()?);
            }
            self.expect(Token::RParen)?;
            return Ok(Expr::Min(items));
        }
        let mut args: Vec<(String, Value)> = Vec::new();
        if self.peek() != Some(&Token::RParen) {
            loop {
                let key = match self.next() {
                    Some(Token::Ident(k)) => k,
                    _ => {
                        self.pos -= 1;
                        return self.err("expected `name=value`");
                    }
                };
                self.expect(Token::Eq)?;
                args.push((key, self.value()?));
                if self.peek() == Some(&Token::Comma) {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        self.expect(Token::RParen)?;
        let arg = |key: &str| args.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        let num_list = |v: &Value| -> Option<Vec<f64>> {
            match v {
                Value::List(items) => items
                    .iter()
                    .map(|x| match x {
                        Value::Num(n) => Some(*n),
                        _ => None,
                    })
                    .collect(),
                _ => None,
            }
        };
        let no_args = |p: &Parser, e: Expr| {
            if args.is_empty() {
                Ok(e)
            } else {
                p.err_at(start, format!("{name}() takes no arguments"))
            }
        };
        match name {
            "norm" => no_args(self, Expr::Norm),
            "area" => no_args(self, Expr::Area),
            "quadratic" => no_args(self, Expr::Quadratic),
            "radial_double_well" => no_args(self, Expr::RadialDoubleWell),
            "constant" => match arg("c") {
                Some(Value::Num(c)) => Ok(Expr::Constant(c)),
                _ => self.err_at(start, "constant() needs c=<number>"),
            },
            "linear" => match arg("l").as_ref().and_then(num_list) {
                Some(l) => Ok(Expr::Linear(l)),
                None => self.err_at(start, "linear() needs l=[..]"),
            },
            "distance" => {
                let points = match arg("points") {
                    Some(Value::List(items)) => {
                        items.iter().map(num_list).collect::<Option<Vec<_>>>()
                    }
                    _ => None,
                };
                match points {
                    Some(p) if !p.is_empty() && p.iter().all(|q| q.len() == p[0].len()) => {
                        Ok(Expr::Distance(p))
                    }
                    _ => self.err_at(start, "distance() needs points=[[..], ..] of equal length"),
                }
            }
            other => self.err_at(start, format!("unknown integrand `{other}`")),
        }
    }
}

/// Weight `phi(x)` multiplying an integrand in pairings.
#[derive(Clone)]
pub struct SpatialWeight {
    label: String,
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl SpatialWeight {
    pub fn new(
        label: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        SpatialWeight {
            label: label.into(),
            f: Arc::new(f),
        }
    }

    pub fn one() -> Self {
        Self::new("1", |_| 1.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl fmt::Debug for SpatialWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SpatialWeight({})", self.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_gradient(f: &Integrand, z: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..z.len())
            .map(|i| {
                let mut a = z.to_vec();
                let mut b = z.to_vec();
                a[i] += h;
                b[i] -= h;
                (f.value(&a) - f.value(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn s_transform_examples() {
        let z = [0.3, -0.4];
        let r = 0.5;
        assert!((Integrand::norm().s_transform(&z).unwrap() - r).abs() < 1e-14);
        assert!((Integrand::constant(1.0).s_transform(&z).unwrap() - (1.0 - r)).abs() < 1e-14);
        let expected = ((1.0 - r) * (1.0 - r) + r * r).sqrt();
        assert!((Integrand::area().s_transform(&z).unwrap() - expected).abs() < 1e-14);
        // on the sphere the recession takes over
        assert!((Integrand::area().s_transform(&[0.6, 0.8]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            Integrand::quadratic().s_transform(&[1.0, 0.0]),
            Err(Error::MissingRecession(_))
        ));
    }

    #[test]
    fn upper_recession_examples() {
        let z = [0.6, -0.8];
        assert_eq!(
            Integrand::norm().upper_recession(&z),
            RecessionValue {
                value: 1.0,
                analytic: true
            }
        );
        assert!((Integrand::area().upper_recession(&z).value - 1.0).abs() < 1e-15);
        let d = Integrand::distance(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert!((d.upper_recession(&[1.0, 0.0]).value - 1.0).abs() < 1e-15);
        // the estimator agrees with the analytic values up to the ball radius
        for f in [Integrand::norm(), Integrand::area(), d] {
            let est = f.upper_recession_estimate(&z);
            assert!((est - 1.0).abs() < 0.05, "{f}: {est}");
        }
    }

    #[test]
    fn tilde_examples() {
        let f = Integrand::norm();
        let full = f.tilde_transform(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let zero = f.tilde_transform(&[]);
        let line = f.tilde_transform(&[vec![1.0, 0.0]]);
        let z = [0.3, -2.0];
        assert!((full.value(&z) - f.value(&z)).abs() < 1e-15);
        assert_eq!(zero.value(&z), 0.0);
        assert!((line.value(&z) - 0.3).abs() < 1e-15);
        assert!((line.recession(&z).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn recession_is_positively_homogeneous() {
        let f = Integrand::parse("2 * area() + distance(points=[[1, 2]]) - linear(l=[0.5, 1]) + 3")
            .unwrap();
        let z = [0.7, -0.2];
        for t in [0.1, 1.0, 7.5] {
            let zt: Vec<f64> = z.iter().map(|v| v * t).collect();
            let lhs = f.recession(&zt).unwrap();
            let rhs = t * f.recession(&z).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let exprs = [
            "norm()",
            "area()",
            "quadratic()",
            "radial_double_well()",
            "distance(points=[[1, 0], [-1, 0.5]])",
            "min(norm(), 0.5 * area() + 1)",
            "3 * area() - linear(l=[1, -2])",
        ];
        let z = [0.31, -0.77];
        for e in exprs {
            let f = Integrand::parse(e).unwrap().with_smoothing(0.05);
            let mut g = vec![0.0; 2];
            f.gradient(&z, &mut g);
            let fd = fd_gradient(&f, &z);
            for (a, b) in g.iter().zip(&fd) {
                assert!(
                    (a - b).abs() < 1e-6 * (1.0 + b.abs()),
                    "{e}: {g:?} vs {fd:?}"
                );
            }
        }
    }

    #[test]
    fn smoothing_is_a_small_lower_perturbation() {
        let f = Integrand::parse("distance(points=[[1, 0], [-1, 0]])").unwrap();
        for s in [1e-1, 1e-2, 1e-3] {
            let g = f.with_smoothing(s);
            for z in [[0.0, 0.0], [1.0, 0.0], [0.2, 3.0]] {
                let gap = f.value(&z) - g.value(&z);
                assert!(gap >= -1e-15 && gap <= s * (1.0 + 2f64.ln()), "{gap}");
            }
        }
    }

    #[test]
    fn growth_bounds_hold_on_samples() {
        let f = Integrand::parse("area() + distance(points=[[3, 0], [-1, 4]]) - 2").unwrap();
        let m = f.growth_constant().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..2)
                .map(|_| 10.0 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            assert!(f.value(&z).abs() <= m * (1.0 + norm(&z)) + 1e-12);
        }
        assert!(Integrand::radial_double_well().growth_constant().is_none());
    }

    #[test]
    fn parse_round_trip_and_errors() {
        for e in [
            "norm()",
            "distance(points=[[1, 0], [-1, 0]]) + 0.0",
            "radial_double_well()",
            "min(norm(), area())",
            "-2 * area() + constant(c=1.5)",
        ] {
            let f = Integrand::parse(e).unwrap();
            let again = Integrand::parse(&f.to_string()).unwrap();
            let z = [0.4, 0.9];
            assert!((f.value(&z) - again.value(&z)).abs() < 1e-14, "{e}");
        }
        assert!(Integrand::parse("distance(points=[[1,0],[−1,0]])").is_ok());
        for bad in [
            "",
            "norm(",
            "nrm()",
            "norm() * area()",
            "distance(points=[[1],[1,2]])",
            "norm() $",
        ] {
            assert!(
                matches!(Integrand::parse(bad), Err(Error::Parse { .. })),
                "{bad}"
            );
        }
        match Integrand::parse("norm() + foo()") {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "column 10"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kinds() {
        assert_eq!(
            Integrand::norm().kind(),
            IntegrandKind::PositivelyHomogeneous
        );
        assert_eq!(
            Integrand::radial_double_well().kind(),
            IntegrandKind::Polynomial
        );
        assert_eq!(Integrand::area().kind(), IntegrandKind::NormComposite);
        assert_eq!(
            Integrand::distance(vec![vec![0.0]]).kind(),
            IntegrandKind::DistanceToPointSet
        );
        assert_eq!(
            Integrand::parse("min(norm(), area())").unwrap().kind(),
            IntegrandKind::SmoothedMin
        );
        assert!(!Integrand::norm().is_differentiable());
        assert!(Integrand::norm().with_smoothing(0.1).is_differentiable());
    }
}
