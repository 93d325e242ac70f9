//! Benchmarks for the closed-form pipeline stages: the margin solver, the
//! random-projection decoder, the gated construction, verification, and the
//! NTK baseline. Instances are deliberately small so a full run stays quick;
//! scale the constants up for profiling sessions.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use factmlp_bench::{solved_outputs, tied_instance};
use factmlp_core::{
    build_decoder, construct_with_outputs, decode_margins, ntk_construct, optimal_outputs,
    verify_storage, Activation, ConstructCfg, Dist, SolverCfg,
};

fn bench_margin_solver(c: &mut Criterion) {
    let (v, _) = tied_instance(16, 8, 5);
    c.bench_function("optimal_outputs_n16_d8", |b| {
        b.iter(|| optimal_outputs(black_box(&v), &SolverCfg::default()).unwrap())
    });
}

fn bench_decoder(c: &mut Criterion) {
    let (v, _) = tied_instance(64, 32, 7);
    let (u, _) = solved_outputs(&v);
    c.bench_function("build_decoder_n64_d32_m256", |b| {
        b.iter(|| build_decoder(black_box(&u), 256, Dist::Gaussian, 11).unwrap())
    });
    let pack = build_decoder(&u, 256, Dist::Gaussian, 11).unwrap();
    c.bench_function("decode_margins_n64_d32_m256", |b| {
        b.iter(|| decode_margins(black_box(&v), black_box(&pack)).unwrap())
    });
}

fn bench_construct(c: &mut Criterion) {
    let (v, f) = tied_instance(32, 16, 9);
    let (u, rho_hat) = solved_outputs(&v);
    let cfg = ConstructCfg::default();
    c.bench_function("construct_n32_d16_m48", |b| {
        b.iter(|| {
            construct_with_outputs(
                black_box(&v),
                &v,
                &f,
                48,
                Activation::Silu,
                13,
                &cfg,
                &u,
                rho_hat,
            )
            .unwrap()
        })
    });
}

fn bench_verify(c: &mut Criterion) {
    let (v, f) = tied_instance(32, 16, 9);
    let (u, rho_hat) = solved_outputs(&v);
    let model =
        construct_with_outputs(&v, &v, &f, 48, Activation::Silu, 13, &ConstructCfg::default(), &u, rho_hat)
            .unwrap();
    c.bench_function("verify_storage_n32_d16", |b| {
        b.iter(|| verify_storage(black_box(&model), &v, &v, &f).unwrap())
    });
}

fn bench_ntk(c: &mut Criterion) {
    let (v, f) = tied_instance(16, 16, 15);
    c.bench_function("ntk_construct_n16_d16_h512", |b| {
        b.iter(|| ntk_construct(black_box(&v), &v, &f, 512, 2, false, 17).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_margin_solver, bench_decoder, bench_construct, bench_verify, bench_ntk
}
criterion_main!(benches);
