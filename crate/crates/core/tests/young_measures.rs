use afree_core::integrand::Expr;
use afree_core::young::BarycenterCheck;
use afree_core::{
    barycenter, concentration_builder, default_qc_family, divergence_flexibility, elementary,
    gallery, jensen_certificate, pairing, shift, CertificateConfig, ConcentrationConfig,
    DiscreteMeasure, DiscreteYoungMeasure, GridBox, Integrand, LambdaAtom, LambdaSpec, Probability,
    SpatialWeight, YoungCell,
};
use proptest::prelude::*;

fn unit(v: [f64; 2]) -> Vec<f64> {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    vec![v[0] / n, v[1] / n]
}

prop_compose! {
    fn cell()(
        w in 0.05f64..0.95,
        p in prop::array::uniform4(-2.0f64..2.0),
        lambda in prop_oneof![Just(0.0), 0.0f64..3.0],
        dir in (0.1f64..6.2).prop_map(|t| [t.cos(), t.sin()]),
    ) -> YoungCell {
        YoungCell {
            nu: Probability::new(vec![w, 1.0 - w], vec![vec![p[0], p[1]], vec![p[2], p[3]]]).unwrap(),
            lambda,
            nu_inf: Some(Probability::on_sphere(vec![0.5, 0.5], vec![unit(dir), vec![-dir[0], -dir[1]]]).unwrap()),
        }
    }
}

prop_compose! {
    fn young_measure()(
        cells in prop::collection::vec(cell(), 16),
        mass in 0.1f64..2.0,
        at in prop::array::uniform2(-0.9f64..0.9),
    ) -> DiscreteYoungMeasure {
        DiscreteYoungMeasure {
            domain: GridBox::centered(2, 1.0, 4),
            fiber: 2,
            cells,
            atoms: vec![LambdaAtom {
                location: at.to_vec(),
                mass,
                nu_inf: Probability::dirac(vec![0.6, -0.8]),
            }],
        }
    }
}

fn weight() -> SpatialWeight {
    SpatialWeight::new("1 + x1^2", |x| 1.0 + x[0] * x[0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pairing_is_linear_in_the_integrand(ym in young_measure(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        ym.validate().unwrap();
        let f = Integrand::norm();
        let g = Integrand::area();
        let combo = Integrand::new(Expr::Sum(vec![
            Expr::Scale(a, Box::new(Expr::Norm)),
            Expr::Scale(b, Box::new(Expr::Area)),
        ]));
        let lhs = pairing(&combo, &weight(), &ym).unwrap().value;
        let rhs = a * pairing(&f, &weight(), &ym).unwrap().value + b * pairing(&g, &weight(), &ym).unwrap().value;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn shifting_moves_the_barycenter_and_the_pairing(ym in young_measure(), v in prop::array::uniform2(-1.0f64..1.0)) {
        let field: Vec<f64> = (0..ym.cells.len()).flat_map(|_| v).collect();
        let moved = shift(&ym, &field).unwrap();
        let (b0, b1) = (barycenter(&ym), barycenter(&moved));
        for (i, (x, y)) in b0.density.iter().zip(&b1.density).enumerate() {
            prop_assert!((y - x - v[i % 2]).abs() < 1e-12);
        }
        prop_assert_eq!(b0.atoms.len(), b1.atoms.len());
        // |z + v| has the same recession as |z|
        let translated = Integrand::distance(vec![vec![-v[0], -v[1]]]);
        let lhs = pairing(&Integrand::norm(), &weight(), &moved).unwrap().value;
        let rhs = pairing(&translated, &weight(), &ym).unwrap().value;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn young_files_round_trip(ym in young_measure()) {
        let back = DiscreteYoungMeasure::from_json(&ym.to_json()).unwrap();
        prop_assert_eq!(back, ym);
    }

    #[test]
    fn elementary_measures_have_the_measure_as_barycenter(
        density in prop::collection::vec(-3.0f64..3.0, 32),
        mass in 0.1f64..2.0,
    ) {
        let mut mu = DiscreteMeasure::from_density(GridBox::centered(2, 1.0, 4), 2, density).unwrap();
        mu.push_atom(vec![0.1, -0.2], mass, &[0.0, 1.0]).unwrap();
        let b = barycenter(&elementary(&mu));
        prop_assert_eq!(&b.density, &mu.density);
        prop_assert_eq!(b.atoms.len(), 1);
        prop_assert!((b.atoms[0].mass - mass).abs() < 1e-12);
        // the norm pairs to the total variation
        let tv = pairing(&Integrand::norm(), &SpatialWeight::one(), &elementary(&mu)).unwrap().value;
        prop_assert!((tv - mu.total_variation()).abs() < 1e-10 * (1.0 + tv));
    }

    #[test]
    fn two_state_concentrations_are_certified(angle in 0.0f64..std::f64::consts::TAU) {
        let op = gallery::divergence(2);
        let q = vec![angle.cos(), angle.sin()];
        let p = Probability::new(vec![0.5, 0.5], vec![q.clone(), vec![-q[0], -q[1]]]).unwrap();
        let config = ConcentrationConfig { grid: 32, stages: 2, ..ConcentrationConfig::default() };
        let run = concentration_builder(&op, &[0.0, 0.0], &LambdaSpec::Lebesgue, &p, &config).unwrap();
        for w in &run.fields {
            prop_assert!((w.total_variation() - 1.0).abs() < 1e-9);
        }
        let family = default_qc_family(&op, false).unwrap();
        let cert = jensen_certificate(&run.target, &op, &family, &CertificateConfig::default()).unwrap();
        prop_assert!(cert.passed());
    }
}

#[test]
fn certificate_rejects_a_barycenter_with_divergence() {
    let op = gallery::divergence(2);
    let mu = DiscreteMeasure::from_fn(GridBox::unit(2, 16), 2, |x, out| {
        out[0] = (2.0 * std::f64::consts::PI * x[0]).sin();
        out[1] = 0.0;
    });
    let family = default_qc_family(&op, false).unwrap();
    let cert = jensen_certificate(
        &elementary(&mu),
        &op,
        &family,
        &CertificateConfig::default(),
    )
    .unwrap();
    assert!(!cert.barycenter.passed());
    assert!(cert.jensen.passed());
    assert!(cert.support.passed());
}

#[test]
fn homogeneous_splits_are_certified_for_the_divergence() {
    // div-quasiconvex integrands are convex, so every homogeneous
    // oscillation measure satisfies Jensen
    let op = gallery::divergence(2);
    let cell = YoungCell {
        nu: Probability::new(vec![0.5, 0.5], vec![vec![2.0, 0.0], vec![-2.0, 0.0]]).unwrap(),
        lambda: 0.0,
        nu_inf: None,
    };
    let ym = DiscreteYoungMeasure::uniform(GridBox::unit(2, 8), cell).unwrap();
    let family = default_qc_family(&op, false).unwrap();
    let cert = jensen_certificate(&ym, &op, &family, &CertificateConfig::default()).unwrap();
    assert!(cert.passed());
}

fn bump(r: f64, radius: f64) -> f64 {
    let t = r / radius;
    if t >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - t * t)).exp()
    }
}

#[test]
fn divergence_flexibility_completes_a_bump() {
    let domain = GridBox::centered(2, 1.0, 128);
    let lambda: Vec<f64> = (0..domain.n_cells())
        .map(|i| {
            let x = domain.center(i);
            bump((x[0] * x[0] + x[1] * x[1]).sqrt(), 0.8)
        })
        .collect();
    let op = gallery::divergence(2);
    let family = default_qc_family(&op, false).unwrap();
    let config = CertificateConfig {
        barycenter_check: BarycenterCheck::Interior,
        residual_tol: 5e-2,
        ..CertificateConfig::default()
    };
    let r = divergence_flexibility(
        &domain,
        &lambda,
        &Probability::dirac(vec![1.0, 0.0]),
        &family,
        &config,
    )
    .unwrap();
    assert!(r.residual < 1e-2, "residual {}", r.residual);
    assert!(r.spectral_gap < 5e-2, "gap {}", r.spectral_gap);
    assert!(r.certificate.passed());
    // div w = -d1 lambda: w is odd in x2 for its second component
    let n = 128;
    let (i, j) = (40, 70);
    let a = r.w.density_at(i * n + j)[1];
    let b = r.w.density_at(i * n + (n - 1 - j))[1];
    assert!((a + b).abs() < 1e-9 * (1.0 + a.abs()));
}
