use std::fs;
use std::path::{Path, PathBuf};

use afree_core::approximation::fmt10;
use afree_core::spectral::representative_forms;
use afree_core::young::{extrapolate, BarycenterCheck};
use afree_core::{
    apply_operator, area_strict_run, circle_measure, concentration_builder, constant_rank_audit,
    decompose, default_qc_family, exactness_check, gallery, image_cone_membership, io,
    jensen_certificate, pairing, quasiconvex_envelope, sobolev_norm, wave_cone_membership,
    CertificateConfig, CertificateReport, ConcentrationConfig, DiscreteMeasure,
    DiscreteYoungMeasure, EnvelopeConfig, GridBox, Integrand, LambdaSpec, LinearOperator,
    Probability, SobolevNormSpec, SpatialWeight, TorusField,
};
use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::report::Report;
use crate::{Cli, Command, Outcome};

/// Resolves `--op`: an existing file, the same path with `.toml`, or a
/// bundled operator named by the last path component.
pub fn load_op(spec: &str) -> Result<LinearOperator> {
    for candidate in [PathBuf::from(spec), PathBuf::from(format!("{spec}.toml"))] {
        if candidate.is_file() {
            let text = fs::read_to_string(&candidate)
                .with_context(|| format!("reading {}", candidate.display()))?;
            return Ok(LinearOperator::from_toml_str(
                &text,
                &candidate.display().to_string(),
            )?);
        }
    }
    let stem = Path::new(spec)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(spec);
    gallery::by_name(stem)
        .ok_or_else(|| anyhow!("no operator file `{spec}` and no bundled operator `{stem}`"))
}

fn require_op(cli: &Cli) -> Result<LinearOperator> {
    load_op(
        cli.op
            .as_deref()
            .ok_or_else(|| anyhow!("--op is required"))?,
    )
}

pub fn read_field(path: &Path) -> Result<TorusField> {
    let field = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        io::read_field_csv(path)?
    } else {
        io::read_field_binary(path)?
    };
    Ok(field)
}

pub fn write_field(path: &Path, field: &TorusField) -> Result<()> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        io::write_field_csv(path, field)?;
    } else {
        io::write_field_binary(path, field)?;
    }
    Ok(())
}

fn read_ym(path: Option<&PathBuf>) -> Result<DiscreteYoungMeasure> {
    let path = path.ok_or_else(|| anyhow!("--ym is required"))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    DiscreteYoungMeasure::from_json(&text).with_context(|| format!("in {}", path.display()))
}

fn default_grid(d: usize) -> usize {
    if d >= 3 {
        16
    } else {
        32
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let outcome = match &cli.command {
        Command::Audit { samples } => audit(&require_op(cli)?, *samples, cli.tol.unwrap_or(1e-10))?,
        Command::Cone { vector, image } => {
            cone(&require_op(cli)?, vector, *image, cli.tol.unwrap_or(1e-8))?
        }
        Command::Exactness { potential, samples } => {
            let b = load_op(
                potential
                    .as_deref()
                    .ok_or_else(|| anyhow!("--potential is required"))?,
            )?;
            exactness(&require_op(cli)?, &b, *samples, cli.tol.unwrap_or(1e-10))?
        }
        Command::Project { input, field } => project(cli, input.as_deref(), field.as_deref())?,
        Command::Envelope {
            integrand,
            point,
            k_max,
            restarts,
            iters,
        } => {
            let op = require_op(cli)?;
            let f = Integrand::parse(
                integrand
                    .as_deref()
                    .ok_or_else(|| anyhow!("--integrand is required"))?,
            )?;
            let config = EnvelopeConfig {
                k_max: *k_max,
                grid: cli.grid.unwrap_or(default_grid(op.dim())),
                restarts: *restarts,
                iters: *iters,
                seed: cli.seed,
                ..EnvelopeConfig::default()
            };
            envelope(&op, &f, point, &config)?
        }
        Command::Certify {
            ym,
            numeric,
            interior,
        } => {
            let config = CertificateConfig {
                barycenter_check: if *interior {
                    BarycenterCheck::Interior
                } else {
                    BarycenterCheck::Periodic
                },
                residual_tol: cli.tol.unwrap_or(CertificateConfig::default().residual_tol),
                ..CertificateConfig::default()
            };
            certify(&require_op(cli)?, &read_ym(ym.as_ref())?, *numeric, &config)?
        }
        Command::Generate {
            a,
            p_points,
            p_weights,
            lambda,
            stages,
            ym_out,
            field,
        } => {
            let op = require_op(cli)?;
            let p = parse_probability(
                p_points
                    .as_deref()
                    .ok_or_else(|| anyhow!("--p-points is required"))?,
                p_weights,
            )?;
            let a = if a.is_empty() {
                vec![0.0; op.fiber_in()]
            } else {
                a.clone()
            };
            let config = ConcentrationConfig {
                grid: cli.grid.unwrap_or(256),
                stages: *stages,
                ..ConcentrationConfig::default()
            };
            generate(
                &op,
                &a,
                &parse_lambda(lambda)?,
                &p,
                &config,
                ym_out.as_deref(),
                field.as_deref(),
            )?
        }
        Command::Approx {
            target,
            input,
            eps,
            field,
        } => {
            return approx(cli, target, input.as_deref(), eps, field.as_deref());
        }
        Command::Pair { ym, integrand } => {
            let f = Integrand::parse(
                integrand
                    .as_deref()
                    .ok_or_else(|| anyhow!("--integrand is required"))?,
            )?;
            pair(&f, &read_ym(ym.as_ref())?)?
        }
        Command::Gallery { export } => gallery_cmd(export.as_deref())?,
    };
    if let Some(out) = &cli.out {
        fs::write(out, outcome.report.render(cli.format))
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(outcome)
}

pub fn audit(op: &LinearOperator, samples: usize, tol: f64) -> Result<Outcome> {
    let audit = constant_rank_audit(op, samples, tol)?;
    let mut r = Report::new();
    r.text("operator", op.name())
        .int("d", op.dim())
        .int("fiber_in", op.fiber_in())
        .int("fiber_out", op.fiber_out())
        .int("order", op.order() as usize)
        .int("samples", audit.samples.len())
        .flag("constant_rank", audit.constant_rank);
    match audit.rank {
        Some(rank) => r.int("r", rank),
        None => r.text("r", "none"),
    };
    r.int("rank_min", audit.rank_min)
        .int("rank_max", audit.rank_max)
        .int("wave_cone_span_dim", audit.span_basis.len());
    for (i, v) in audit.span_basis.iter().enumerate() {
        r.vector(&format!("span_basis_{i}"), v);
    }
    Ok(Outcome {
        passed: audit.constant_rank,
        report: r,
    })
}

pub fn cone(op: &LinearOperator, v: &[f64], image: bool, tol: f64) -> Result<Outcome> {
    let m = if image {
        image_cone_membership(op, v, tol)?
    } else {
        wave_cone_membership(op, v, tol)?
    };
    let mut r = Report::new();
    r.text("operator", op.name())
        .text("cone", if image { "image" } else { "wave" })
        .vector("vector", v)
        .flag("member", m.member)
        .num("residual", m.residual)
        .vector("witness", &m.witness);
    Ok(Outcome {
        report: r,
        passed: true,
    })
}

pub fn exactness(
    a: &LinearOperator,
    b: &LinearOperator,
    samples: usize,
    tol: f64,
) -> Result<Outcome> {
    let e = exactness_check(a, b, samples, tol)?;
    let mut r = Report::new();
    r.text("annihilator", a.name())
        .text("potential", b.name())
        .int("samples", e.samples)
        .flag("dims_match", e.dims_match)
        .num("max_gap", e.max_gap)
        .vector("worst_xi", &e.worst_xi)
        .flag("exact", e.passed);
    Ok(Outcome {
        passed: e.passed,
        report: r,
    })
}

fn project(cli: &Cli, input: Option<&Path>, out_field: Option<&Path>) -> Result<Outcome> {
    let op = require_op(cli)?;
    let u = match input {
        Some(p) => read_field(p)?,
        None => {
            let n = cli.grid.unwrap_or(default_grid(op.dim()));
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            TorusField::random_bandlimited(n, op.dim(), op.fiber_in(), (n / 4).max(1), &mut rng)?
        }
    };
    let outcome = project_field(&op, &u, cli.tol.unwrap_or(1e-8))?;
    if let Some(path) = out_field {
        write_field(path, &decompose(&op, &u)?.afree)?;
    }
    Ok(outcome)
}

pub fn project_field(op: &LinearOperator, u: &TorusField, tol: f64) -> Result<Outcome> {
    let dec = decompose(op, u)?;
    let k = op.order() as f64;
    let norm0 = |f: &TorusField| sobolev_norm(f, SobolevNormSpec { s: 0.0 });
    let scale = norm0(u).max(f64::MIN_POSITIVE);
    let residual =
        sobolev_norm(&apply_operator(op, &dec.afree)?, SobolevNormSpec { s: -k }) / scale;
    let rebuilt = dec.representative.add(&dec.afree)?.shift(&dec.mean);
    let reconstruction = norm0(&rebuilt.sub(u)?) / scale;
    let (t1, t2) = representative_forms(op, u)?;
    let formula_gap = norm0(&t1.sub(&t2)?) / scale;
    let mut r = Report::new();
    r.text("operator", op.name())
        .int("grid", u.n())
        .vector("mean", &dec.mean)
        .num("representative_norm", norm0(&dec.representative))
        .num("afree_norm", norm0(&dec.afree))
        .num("afree_residual", residual)
        .num("reconstruction_error", reconstruction)
        .num("formula_gap", formula_gap);
    Ok(Outcome {
        passed: residual <= tol && reconstruction <= tol,
        report: r,
    })
}

pub fn envelope(
    op: &LinearOperator,
    f: &Integrand,
    z: &[f64],
    config: &EnvelopeConfig,
) -> Result<Outcome> {
    if z.is_empty() {
        bail!("--point is required");
    }
    let e = quasiconvex_envelope(op, f, z, config, None)?;
    let mut r = Report::new();
    r.text("operator", op.name())
        .text("integrand", f.to_string())
        .vector("point", z)
        .int("K", e.k_max)
        .int("grid", config.grid)
        .int("restarts", e.restarts)
        .num("f", f.value(z))
        .num("value", e.value);
    match e.extrapolated {
        Some(x) => r.num("extrapolated", x),
        None => r.text("extrapolated", "none"),
    };
    for (s, v) in &e.schedule {
        r.num(&format!("smoothed_{}", fmt10(*s)), *v);
    }
    r.text("bound", "upper");
    Ok(Outcome {
        report: r,
        passed: true,
    })
}

fn condition_lines(r: &mut Report, name: &str, c: &afree_core::young::ConditionReport) {
    let status = match &c.status {
        afree_core::young::ConditionStatus::Pass => "pass".to_string(),
        afree_core::young::ConditionStatus::Fail => "fail".to_string(),
        afree_core::young::ConditionStatus::Skipped(why) => format!("skipped ({why})"),
    };
    r.text(name, status)
        .num(&format!("{name}_worst"), c.worst)
        .text(&format!("{name}_location"), c.location.clone());
}

fn certificate_lines(r: &mut Report, c: &CertificateReport) {
    condition_lines(r, "barycenter", &c.barycenter);
    condition_lines(r, "jensen", &c.jensen);
    condition_lines(r, "support", &c.support);
    r.flag("certified", c.passed());
}

pub fn certify(
    op: &LinearOperator,
    ym: &DiscreteYoungMeasure,
    numeric: bool,
    config: &CertificateConfig,
) -> Result<Outcome> {
    let family = default_qc_family(op, numeric)?;
    let c = jensen_certificate(ym, op, &family, config)?;
    let mut r = Report::new();
    r.text("operator", op.name())
        .text("measure", ym.to_string());
    let labels: Vec<&str> = family.iter().map(|m| m.label.as_str()).collect();
    r.text("family", labels.join("; "));
    certificate_lines(&mut r, &c);
    Ok(Outcome {
        passed: c.passed(),
        report: r,
    })
}

fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("`{}` is not a number", s.trim()))
        })
        .collect()
}

/// `1,0;-1,0` with optional weights; uniform weights when none are given.
pub fn parse_probability(points: &str, weights: &[f64]) -> Result<Probability> {
    let pts: Vec<Vec<f64>> = points
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(parse_vector)
        .collect::<Result<_>>()?;
    if pts.is_empty() {
        bail!("p needs at least one atom");
    }
    let w = if weights.is_empty() {
        vec![1.0 / pts.len() as f64; pts.len()]
    } else {
        weights.to_vec()
    };
    Ok(Probability::new(w, pts)?)
}

/// `lebesgue` or `x1,x2@mass;...`
pub fn parse_lambda(text: &str) -> Result<LambdaSpec> {
    if text.trim().eq_ignore_ascii_case("lebesgue") {
        return Ok(LambdaSpec::Lebesgue);
    }
    let atoms = text
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (loc, mass) = item
                .split_once('@')
                .ok_or_else(|| anyhow!("lambda atom `{item}` must read `x1,x2@mass`"))?;
            let mass: f64 = mass
                .trim()
                .parse()
                .map_err(|_| anyhow!("`{mass}` is not a mass"))?;
            Ok((parse_vector(loc)?, mass))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaSpec::Atoms(atoms))
}

pub fn generate(
    op: &LinearOperator,
    a: &[f64],
    lambda: &LambdaSpec,
    p: &Probability,
    config: &ConcentrationConfig,
    ym_out: Option<&Path>,
    field_out: Option<&Path>,
) -> Result<Outcome> {
    let run = concentration_builder(op, a, lambda, p, config)?;
    let masses: Vec<f64> = run.fields.iter().map(|w| w.total_variation()).collect();
    let limit = extrapolate(&masses);
    let target = pairing(&Integrand::norm(), &SpatialWeight::one(), &run.target)?.value;
    let family = default_qc_family(op, false)?;
    let cert = jensen_certificate(&run.target, op, &family, &CertificateConfig::default())?;
    let mut r = Report::new();
    r.text("operator", op.name()).int("grid", config.grid);
    for (s, ((j, res), m)) in run
        .frequencies
        .iter()
        .zip(&run.residuals)
        .zip(&masses)
        .enumerate()
    {
        r.int(&format!("stage_{s}_frequency"), *j)
            .num(&format!("stage_{s}_residual"), *res)
            .num(&format!("stage_{s}_norm"), *m);
    }
    for (i, (m, defect)) in run.witnesses.iter().zip(&run.witness_defects).enumerate() {
        let m: Vec<f64> = m.iter().map(|&v| v as f64).collect();
        r.vector(&format!("witness_{i}"), &m)
            .num(&format!("witness_{i}_defect"), *defect);
    }
    r.num("norm_limit", limit.value)
        .num("norm_limit_error", limit.error)
        .num("target_norm", target);
    certificate_lines(&mut r, &cert);
    if let Some(path) = ym_out {
        fs::write(path, run.target.to_json())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let (Some(path), Some(last)) = (field_out, run.fields.last()) {
        write_field(path, &last.to_torus_field()?)?;
    }
    Ok(Outcome {
        passed: cert.passed(),
        report: r,
    })
}

fn approx(
    cli: &Cli,
    target: &str,
    input: Option<&Path>,
    eps_cells: &[f64],
    field: Option<&Path>,
) -> Result<Outcome> {
    let op = require_op(cli)?;
    let n = cli.grid.unwrap_or(256);
    let mu = match target {
        "circle" => circle_measure(GridBox::centered(2, 2.0, n), &[0.0, 0.0], 1.0, 8 * n)?,
        "zero" => DiscreteMeasure::zero(GridBox::unit(op.dim(), n), op.fiber_in()),
        "file" => {
            let path = input.ok_or_else(|| anyhow!("--target file needs --input"))?;
            let f = read_field(path)?;
            DiscreteMeasure::from_torus_field(GridBox::unit(f.dim(), f.n()), &f)?
        }
        other => bail!("unknown target `{other}` (circle, zero, file)"),
    };
    if eps_cells.is_empty() {
        bail!("--eps needs at least one radius");
    }
    let h = mu.domain.spacing(0);
    let schedule: Vec<f64> = eps_cells.iter().map(|c| c * h).collect();
    let run = area_strict_run(&op, &mu, &schedule)?;
    let csv = run.to_csv();
    let mut r = Report::new();
    r.text("operator", op.name())
        .text("target", target)
        .int("grid", n)
        .num("target_area", run.target_area)
        .num("target_mass", run.target_mass)
        .vector("epsilon", &schedule)
        .vector("area_error", &run.area_errors())
        .vector("weak_error", &run.weak_errors())
        .vector(
            "residual",
            &run.stages.iter().map(|s| s.residual).collect::<Vec<_>>(),
        );
    match &cli.out {
        Some(out) => {
            fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
            r.text("csv", out.display().to_string());
        }
        None => print!("{csv}"),
    }
    let field_path = field
        .map(Path::to_path_buf)
        .or_else(|| cli.out.as_ref().map(|o| o.with_extension("bin")));
    if let (Some(path), Some(last)) = (field_path, run.final_stage()) {
        write_field(&path, &last.field)?;
        r.text("field", path.display().to_string());
    }
    Ok(Outcome {
        report: r,
        passed: true,
    })
}

pub fn pair(f: &Integrand, ym: &DiscreteYoungMeasure) -> Result<Outcome> {
    let p = pairing(f, &SpatialWeight::one(), ym)?;
    let mut r = Report::new();
    r.text("integrand", p.integrand.clone())
        .num("value", p.value)
        .num("oscillation", p.oscillation)
        .num("concentration", p.concentration);
    Ok(Outcome {
        report: r,
        passed: true,
    })
}

fn gallery_cmd(export: Option<&Path>) -> Result<Outcome> {
    let mut r = Report::new();
    if let Some(dir) = export {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for name in gallery::NAMES {
        let op = gallery::by_name(name).ok_or_else(|| anyhow!("gallery entry `{name}` missing"))?;
        let desc = format!(
            "d={} fiber_in={} fiber_out={} order={}",
            op.dim(),
            op.fiber_in(),
            op.fiber_out(),
            op.order()
        );
        r.text(name, desc);
        if let Some(dir) = export {
            let path = dir.join(format!("{name}.toml"));
            fs::write(&path, op.to_toml_string())
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(Outcome {
        report: r,
        passed: true,
    })
}
