use std::hint::black_box;

use afree_core::{
    a_representative, area_strict_run, circle_measure, concentration_builder, constant_rank_audit,
    default_qc_family, gallery, jensen_certificate, pairing, quasiconvex_envelope,
    CertificateConfig, ConcentrationConfig, EnvelopeConfig, GridBox, Integrand, LambdaSpec,
    Probability, SpatialWeight, TorusField,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn audit(c: &mut Criterion) {
    let op = gallery::symmetric_gradient(3);
    c.bench_function("constant_rank_audit/symmetric_gradient3d/512", |b| {
        b.iter(|| constant_rank_audit(black_box(&op), 512, 1e-10).unwrap())
    });
}

fn representative(c: &mut Criterion) {
    let op = gallery::divergence(2);
    let mut group = c.benchmark_group("a_representative/divergence2d");
    for n in [32usize, 64, 128] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = TorusField::random_bandlimited(n, 2, 2, n / 4, &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &u, |b, u| {
            b.iter(|| a_representative(&op, black_box(u)).unwrap())
        });
    }
    group.finish();
}

fn envelope(c: &mut Criterion) {
    let op = gallery::divergence(2);
    let f = Integrand::radial_double_well();
    let config = EnvelopeConfig {
        k_max: 4,
        grid: 16,
        restarts: 2,
        iters: 100,
        ..EnvelopeConfig::default()
    };
    let mut group = c.benchmark_group("envelope");
    group.sample_size(10);
    group.bench_function("divergence2d/double_well/K4", |b| {
        b.iter(|| quasiconvex_envelope(&op, &f, black_box(&[0.0, 0.0]), &config, None).unwrap())
    });
    group.finish();
}

fn young(c: &mut Criterion) {
    let op = gallery::divergence(2);
    let p = Probability::on_sphere(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    let config = ConcentrationConfig {
        grid: 128,
        stages: 3,
        ..ConcentrationConfig::default()
    };
    let run = concentration_builder(&op, &[0.0, 0.0], &LambdaSpec::Lebesgue, &p, &config).unwrap();
    let family = default_qc_family(&op, false).unwrap();
    let mut group = c.benchmark_group("young");
    group.sample_size(20);
    group.bench_function("concentration_builder/128x3", |b| {
        b.iter(|| {
            concentration_builder(
                &op,
                &[0.0, 0.0],
                &LambdaSpec::Lebesgue,
                black_box(&p),
                &config,
            )
            .unwrap()
        })
    });
    group.bench_function("pairing/area/128x128", |b| {
        b.iter(|| {
            pairing(
                &Integrand::area(),
                &SpatialWeight::one(),
                black_box(&run.target),
            )
            .unwrap()
        })
    });
    group.bench_function("jensen_certificate/128x128", |b| {
        b.iter(|| {
            jensen_certificate(
                black_box(&run.target),
                &op,
                &family,
                &CertificateConfig::default(),
            )
            .unwrap()
        })
    });
    group.finish();
}

fn approximation(c: &mut Criterion) {
    let op = gallery::divergence(2);
    let domain = GridBox::centered(2, 2.0, 128);
    let h = domain.spacing(0);
    let mu = circle_measure(domain, &[0.0, 0.0], 1.0, 1024).unwrap();
    let mut group = c.benchmark_group("approximation");
    group.sample_size(10);
    group.bench_function("circle/128/eps8h", |b| {
        b.iter(|| area_strict_run(&op, black_box(&mu), &[8.0 * h]).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    audit,
    representative,
    envelope,
    young,
    approximation
);
criterion_main!(benches);
