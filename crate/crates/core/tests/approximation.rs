use afree_core::{
    area_functional, area_strict_run, bgradient_run, circle_measure, gallery, mollify,
    DiscreteMeasure, GridBox, Mollifier, TorusField,
};

/// Unit pyramid `(1 - |x|_inf)_+` on `[-2, 2]^2`.
fn pyramid(x: &[f64]) -> f64 {
    (1.0 - x[0].abs().max(x[1].abs())).max(0.0)
}

/// `(d2 u, -d1 u)` of the pyramid, evaluated exactly per cell center.
fn rotated_pyramid_gradient(domain: GridBox) -> DiscreteMeasure {
    DiscreteMeasure::from_fn(domain, 2, |x, out| {
        let (a, b) = (x[0].abs(), x[1].abs());
        out.fill(0.0);
        if a.max(b) < 1.0 {
            if a >= b {
                // u = 1 - |x1|
                out[1] = x[0].signum();
            } else {
                out[0] = -x[1].signum();
            }
        }
    })
}

fn field_on(domain: &GridBox, f: impl Fn(&[f64]) -> f64) -> TorusField {
    let n = domain.cells[0];
    let mut values = vec![0.0; domain.n_cells()];
    for (i, v) in values.iter_mut().enumerate() {
        *v = f(&domain.center(i));
    }
    TorusField::new(n, 2, 1, values).unwrap()
}

#[test]
fn pyramid_potential_is_recovered_and_area_converges() {
    let n = 128;
    let domain = GridBox::centered(2, 2.0, n);
    let h = domain.spacing(0);
    let mu = rotated_pyramid_gradient(domain.clone());
    // |grad u| = 1 on the unit square: 12 + 4 sqrt(2)
    let exact = 16.0 + 4.0 * (2f64.sqrt() - 1.0);
    assert!((area_functional(&mu) - exact).abs() < 1e-12);
    let target = field_on(&domain, pyramid);
    let run = bgradient_run(
        &gallery::divergence(2),
        &gallery::rotated_gradient_2d(),
        &mu,
        Some(&target),
        &[16.0 * h, 8.0 * h, 4.0 * h],
    )
    .unwrap();
    let area = run.run.area_errors();
    for w in area.windows(2) {
        assert!(w[1] < w[0]);
    }
    for w in run.potential_errors.windows(2) {
        assert!(w[1] < w[0]);
    }
    // first order in epsilon across the Lipschitz corners
    assert!(area[2] < 1.5e-2);
    assert!(run.potential_errors[2] < 5e-2);
    for s in &run.run.stages {
        assert!(s.residual < 1e-9);
    }
}

#[test]
fn smooth_target_area_is_reproduced() {
    let n = 128;
    let domain = GridBox::centered(2, 2.0, n);
    let h = domain.spacing(0);
    // rotated gradient of a smooth bump supported in the unit disc
    let mu = DiscreteMeasure::from_fn(domain.clone(), 2, |x, out| {
        let r2 = x[0] * x[0] + x[1] * x[1];
        out.fill(0.0);
        if r2 < 1.0 {
            // u = exp(-1 / (1 - r^2)), du/dxi = u * (-2 xi) / (1 - r^2)^2
            let u = (-1.0 / (1.0 - r2)).exp();
            let g = -2.0 * u / ((1.0 - r2) * (1.0 - r2));
            out[0] = g * x[1];
            out[1] = -g * x[0];
        }
    });
    let run = area_strict_run(&gallery::divergence(2), &mu, &[8.0 * h, 4.0 * h, 2.0 * h]).unwrap();
    let area = run.area_errors();
    for w in area.windows(2) {
        assert!(w[1] < w[0]);
    }
    assert!(*area.last().unwrap() < 1e-3);
}

#[test]
fn mollified_circle_keeps_its_mass() {
    let domain = GridBox::centered(2, 2.0, 128);
    let mu = circle_measure(domain.clone(), &[0.0, 0.0], 1.0, 1024).unwrap();
    let total = mu.total_variation();
    assert!((total - 2.0 * std::f64::consts::PI).abs() < 1e-9);
    let w = mollify(&mu, &Mollifier::new(8.0 * domain.spacing(0)).unwrap()).unwrap();
    let mass = w.l1() * domain.volume();
    assert!(mass <= total * (1.0 + 1e-9));
}
