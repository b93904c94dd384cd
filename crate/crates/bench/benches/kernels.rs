use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use tumorcal::baselines::{dram_sample, DramConfig};
use tumorcal::forward::solve_forward;
use tumorcal::inversion::{randomized_ghep, Misfit};
use tumorcal::metrics::{dice, extract_boundary, tumor_indicator};
use tumorcal::prior::GaussianPrior;
use tumorcal::registration::{demons_register, downsample_image, DemonsParams};
use tumorcal_bench::fixture;

fn forward_and_derivatives(c: &mut Criterion) {
    let f = fixture();
    let days = f.ctx.days();
    let theta = f.truth.to_vec();
    c.bench_function("forward_41x61_4days", |b| {
        b.iter(|| solve_forward(&f.phantom.grid, &f.truth, &f.phantom.u0, &days, &f.ctx.solver()).unwrap())
    });
    let (_, point) = f.ctx.evaluate(&theta).unwrap();
    c.bench_function("adjoint_gradient", |b| b.iter(|| f.ctx.gradient(&point).unwrap()));
    c.bench_function("gauss_newton_hessian_apply", |b| b.iter(|| f.ctx.gn_apply(&point, black_box(&theta)).unwrap()));
}

fn prior_ops(c: &mut Criterion) {
    let f = fixture();
    let x = f.truth.to_vec();
    c.bench_function("prior_precision_apply", |b| b.iter(|| f.prior.apply_precision(black_box(&x))));
    c.bench_function("prior_sample", |b| {
        b.iter_batched(|| ChaCha8Rng::seed_from_u64(3), |mut rng| f.prior.sample_fluctuation(&mut rng), BatchSize::SmallInput)
    });
    let (_, point) = f.ctx.evaluate(&x).unwrap();
    let h = |v: &[f64]| f.ctx.gn_apply(&point, v);
    let mut g = c.benchmark_group("ghep");
    g.sample_size(10);
    g.bench_function("randomized_ghep_r16", |b| b.iter(|| randomized_ghep(&h, f.prior.as_ref(), 16, 10, 1, 7).unwrap()));
    g.finish();
}

fn imaging(c: &mut Criterion) {
    let f = fixture();
    let atlas = downsample_image(&f.phantom.atlas_image, 2, 2).unwrap();
    let mut g = c.benchmark_group("demons");
    g.sample_size(10);
    g.bench_function("demons_phantom", |b| {
        b.iter(|| demons_register(&f.phantom.subject_image, &atlas, &DemonsParams::default()).unwrap())
    });
    g.finish();
    let u = f.phantom.u0.clone();
    let m = tumor_indicator(&u, 0.5);
    c.bench_function("dice", |b| b.iter(|| dice(black_box(&m), &m).unwrap()));
    c.bench_function("marching_squares", |b| b.iter(|| extract_boundary(black_box(&u), 0.5)));
}

fn sampler(c: &mut Criterion) {
    let target = |x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>();
    c.bench_function("dram_4d_10k", |b| b.iter(|| dram_sample(target, 4, 10_000, &DramConfig::default(), 1).unwrap()));
}

criterion_group!(benches, forward_and_derivatives, prior_ops, imaging, sampler);
criterion_main!(benches);
