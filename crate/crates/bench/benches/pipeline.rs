use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dmt_bench::{filled, nonnegative};
use dmt_core::dhc::correlation4d;
use dmt_core::episodes::{gen_domain, FeatureBank, Model, ModelConfig, SyntheticDomain};
use dmt_core::fusion::{sep4d_conv, FusionParams};

fn corr4d(c: &mut Criterion) {
    let mut g = c.benchmark_group("correlation4d");
    for (ch, side) in [(16, 16), (32, 8), (64, 4)] {
        let fs = filled(&[ch, side, side], 1);
        let fq = filled(&[ch, side, side], 2);
        let ws = filled(&[ch, ch], 3);
        let wq = filled(&[ch, ch], 4);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{side}x{side}")), &(), |b, _| {
            b.iter(|| correlation4d(black_box(&fs), black_box(&fq), &ws, &wq).unwrap())
        });
    }
    g.finish();
}

fn sep4d(c: &mut Criterion) {
    let params = FusionParams::init(3, 0);
    let mut g = c.benchmark_group("sep4d");
    for side in [4, 8, 16] {
        let corr = nonnegative(&[side, side, side, side], 5);
        g.bench_with_input(BenchmarkId::from_parameter(side), &corr, |b, corr| {
            b.iter(|| sep4d_conv(black_box(corr), &params.sep4d[0]).unwrap())
        });
    }
    g.finish();
}

fn predict(c: &mut Criterion) {
    let ds = gen_domain(&SyntheticDomain::source(), 6, 0).unwrap();
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let bank = FeatureBank::build(&model, &ds).unwrap();
    let hw = ds.samples[0].mask.dims2().unwrap();
    let mut g = c.benchmark_group("predict");
    for k in [1, 5] {
        let idx: Vec<usize> = (1..=k).collect();
        let shots = bank.shots(&ds, &idx);
        g.bench_with_input(BenchmarkId::new("shots", k), &shots, |b, shots| {
            b.iter(|| model.predict(black_box(shots), &bank.pyramids[0], hw).unwrap())
        });
    }
    g.bench_function("extract", |b| b.iter(|| model.extract(black_box(&ds.samples[0].image)).unwrap()));
    g.finish();
}

criterion_group!(benches, corr4d, sep4d, predict);
criterion_main!(benches);
