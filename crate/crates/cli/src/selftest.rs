//! Built-in examples per subcommand; `--selftest` prints one line per check
//! and exits 2 on any mismatch.

use std::process::ExitCode;

use afree_core::{
    elementary, gallery, CertificateConfig, ConcentrationConfig, DiscreteMeasure,
    DiscreteYoungMeasure, EnvelopeConfig, GridBox, Integrand, LambdaSpec, LinearOperator,
    Probability, TorusField, YoungCell,
};
use anyhow::{anyhow, Result};

use crate::commands;
use crate::Command;

type Check = (&'static str, Box<dyn Fn() -> Result<bool>>);

fn op(name: &str) -> Result<LinearOperator> {
    gallery::by_name(name).ok_or_else(|| anyhow!("missing gallery operator {name}"))
}

fn value(outcome: &crate::Outcome, key: &str) -> Result<f64> {
    outcome
        .report
        .get(key)
        .ok_or_else(|| anyhow!("report lacks `{key}`"))?
        .parse()
        .map_err(|_| anyhow!("`{key}` is not numeric"))
}

fn checks(command: &Command) -> Vec<Check> {
    match command {
        Command::Audit { .. } => vec![
            (
                "divergence2d has constant rank 1",
                Box::new(|| {
                    let o = commands::audit(&op("divergence2d")?, 256, 1e-10)?;
                    Ok(o.passed && o.report.get("r") == Some("1"))
                }),
            ),
            (
                "mueller_diagonal fails constant rank",
                Box::new(|| Ok(!commands::audit(&op("mueller_diagonal")?, 256, 1e-10)?.passed)),
            ),
        ],
        Command::Cone { .. } => vec![
            (
                "e1 is in the divergence wave cone",
                Box::new(|| {
                    let o = commands::cone(&op("divergence2d")?, &[1.0, 0.0], false, 1e-8)?;
                    Ok(o.report.get("member") == Some("true"))
                }),
            ),
            (
                "the Laplacian wave cone is trivial",
                Box::new(|| {
                    let o = commands::cone(&op("laplacian2d")?, &[1.0], false, 1e-8)?;
                    Ok(o.report.get("member") == Some("false"))
                }),
            ),
        ],
        Command::Exactness { .. } => vec![
            (
                "gradient is a potential for curl",
                Box::new(|| {
                    Ok(commands::exactness(&op("curl2d")?, &op("gradient2d")?, 128, 1e-10)?.passed)
                }),
            ),
            (
                "rotated gradient is a potential for divergence",
                Box::new(|| {
                    Ok(commands::exactness(
                        &op("divergence2d")?,
                        &op("rotated_gradient2d")?,
                        128,
                        1e-10,
                    )?
                    .passed)
                }),
            ),
            (
                "gradient is not a potential for divergence",
                Box::new(|| {
                    Ok(
                        !commands::exactness(&op("divergence2d")?, &op("gradient2d")?, 128, 1e-10)?
                            .passed,
                    )
                }),
            ),
        ],
        Command::Project { .. } => vec![
            (
                "a constant field has no oscillating part",
                Box::new(|| {
                    let u = TorusField::constant(16, 2, &[0.5, -2.0])?;
                    let o = commands::project_field(&op("divergence2d")?, &u, 1e-10)?;
                    Ok(o.passed
                        && value(&o, "representative_norm")? < 1e-12
                        && value(&o, "afree_norm")? < 1e-12)
                }),
            ),
            (
                "a curl-free field is A-free for curl",
                Box::new(|| {
                    let u = TorusField::from_fn(16, 2, 2, |x, out| {
                        let t = 2.0 * std::f64::consts::PI;
                        out[0] = (t * x[0]).cos() * (t * x[1]).sin();
                        out[1] = (t * x[0]).sin() * (t * x[1]).cos();
                    })?;
                    let o = commands::project_field(&op("curl2d")?, &u, 1e-10)?;
                    Ok(o.passed && value(&o, "representative_norm")? < 1e-10)
                }),
            ),
        ],
        Command::Envelope { .. } => vec![(
            "a convex integrand is its own envelope",
            Box::new(|| {
                let config = EnvelopeConfig {
                    k_max: 2,
                    grid: 8,
                    restarts: 2,
                    iters: 50,
                    ..EnvelopeConfig::default()
                };
                let o = commands::envelope(
                    &op("divergence2d")?,
                    &Integrand::norm(),
                    &[0.3, -0.4],
                    &config,
                )?;
                Ok((value(&o, "value")? - 0.5).abs() < 1e-9)
            }),
        )],
        Command::Certify { .. } => vec![
            (
                "an elementary measure of a constant is certified",
                Box::new(|| {
                    let mu = DiscreteMeasure::from_fn(GridBox::unit(2, 8), 2, |_, out| {
                        out[0] = 1.0;
                        out[1] = -0.5;
                    });
                    let o = commands::certify(
                        &op("divergence2d")?,
                        &elementary(&mu),
                        false,
                        &CertificateConfig::default(),
                    )?;
                    Ok(o.passed)
                }),
            ),
            (
                "concentration outside the Laplacian wave cone is rejected",
                Box::new(|| {
                    let cell = YoungCell {
                        nu: Probability::dirac(vec![0.0]),
                        lambda: 1.0,
                        nu_inf: Some(Probability::on_sphere(
                            vec![0.5, 0.5],
                            vec![vec![1.0], vec![-1.0]],
                        )?),
                    };
                    let ym = DiscreteYoungMeasure::uniform(GridBox::unit(2, 8), cell)?;
                    let o = commands::certify(
                        &op("laplacian2d")?,
                        &ym,
                        false,
                        &CertificateConfig::default(),
                    )?;
                    Ok(!o.passed && o.report.get("support") == Some("fail"))
                }),
            ),
        ],
        Command::Generate { .. } => vec![(
            "a two-state concentration has unit mass",
            Box::new(|| {
                let p = commands::parse_probability("1,0;-1,0", &[])?;
                let config = ConcentrationConfig {
                    grid: 64,
                    stages: 3,
                    ..ConcentrationConfig::default()
                };
                let o = commands::generate(
                    &op("divergence2d")?,
                    &[0.0, 0.0],
                    &LambdaSpec::Lebesgue,
                    &p,
                    &config,
                    None,
                    None,
                )?;
                let ok = (0..3)
                    .map(|s| value(&o, &format!("stage_{s}_norm")))
                    .collect::<Result<Vec<_>>>()?;
                Ok(o.passed && ok.iter().all(|m| (m - 1.0).abs() < 1e-9))
            }),
        )],
        Command::Approx { .. } => vec![(
            "the zero target stays zero",
            Box::new(|| {
                let mu = DiscreteMeasure::zero(GridBox::unit(2, 32), 2);
                let run = afree_core::area_strict_run(
                    &op("divergence2d")?,
                    &mu,
                    &[4.0 / 32.0, 2.0 / 32.0],
                )?;
                Ok(run
                    .stages
                    .iter()
                    .all(|s| s.mass == 0.0 && (s.area - 1.0).abs() < 1e-12)
                    && run.weak_errors().iter().all(|e| *e == 0.0))
            }),
        )],
        Command::Pair { .. } => vec![
            (
                "the norm of a Dirac at zero pairs to zero",
                Box::new(|| {
                    let ym = DiscreteYoungMeasure::uniform(
                        GridBox::unit(2, 4),
                        YoungCell {
                            nu: Probability::dirac(vec![0.0, 0.0]),
                            lambda: 0.0,
                            nu_inf: None,
                        },
                    )?;
                    let o = commands::pair(&Integrand::norm(), &ym)?;
                    Ok(value(&o, "value")? == 0.0)
                }),
            ),
            (
                "the area of zero is the volume",
                Box::new(|| {
                    let ym = elementary(&DiscreteMeasure::zero(GridBox::centered(2, 1.0, 4), 2));
                    let o = commands::pair(&Integrand::area(), &ym)?;
                    Ok((value(&o, "value")? - 4.0).abs() < 1e-12)
                }),
            ),
        ],
        Command::Gallery { .. } => vec![(
            "bundled operators round-trip through TOML",
            Box::new(|| {
                for name in gallery::NAMES {
                    let o = op(name)?;
                    let back = LinearOperator::from_toml_str(&o.to_toml_string(), name)?;
                    if back != o {
                        return Ok(false);
                    }
                }
                Ok(true)
            }),
        )],
    }
}

pub fn run(command: &Command) -> ExitCode {
    let mut failed = 0;
    for (name, check) in checks(command) {
        match check() {
            Ok(true) => println!("selftest {name} ... ok"),
            Ok(false) => {
                failed += 1;
                println!("selftest {name} ... FAILED");
            }
            Err(e) => {
                failed += 1;
                println!("selftest {name} ... FAILED ({e:#})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}
