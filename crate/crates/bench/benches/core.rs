use std::hint::black_box;

use ciar_core::decoder::{run_ciar, DecodeConfig};
use ciar_core::interval::{inter_fuse, uncertainty_score, FuseConfig};
use ciar_core::math::keyed_rng;
use ciar_core::properties::{random_logit_interval, random_training_instance};
use ciar_core::toy::{AnalyticHeadConfig, InterHeadParams, ModelParams, SceneSpec, ToyWorld};
use ciar_core::training::{analytic_gradient, InterDroConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn fuse(c: &mut Criterion) {
    let cfg = FuseConfig::default();
    let mut group = c.benchmark_group("inter_fuse");
    for n in [64usize, 512, 4096] {
        let iv = random_logit_interval(&mut keyed_rng(0, 0, n as u64), n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &iv, |b, iv| {
            b.iter(|| inter_fuse(black_box(iv), &cfg).unwrap())
        });
    }
    group.finish();

    let iv = random_logit_interval(&mut keyed_rng(0, 0, 1), 4096);
    let p = inter_fuse(&iv, &cfg).unwrap();
    c.bench_function("uncertainty_score/4096", |b| b.iter(|| uncertainty_score(black_box(&p))));
}

fn decode(c: &mut Criterion) {
    let params = ModelParams::generate(64, 32, 0).unwrap();
    let head = InterHeadParams::analytic(&params, &AnalyticHeadConfig::default());
    let world = ToyWorld::new(SceneSpec::default(), &params).unwrap();
    let cfg = DecodeConfig::default();
    c.bench_function("run_ciar/default_scene", |b| {
        b.iter(|| run_ciar(black_box(&cfg), &world, &head).unwrap())
    });
}

fn gradient(c: &mut Criterion) {
    let (ih, batch) = random_training_instance(&mut keyed_rng(0, 0, 0), 64, 96, 256);
    let cfg = InterDroConfig::default();
    c.bench_function("analytic_gradient/n64_d96_batch256", |b| {
        b.iter(|| analytic_gradient(black_box(&ih), &batch, &cfg).unwrap())
    });
}

criterion_group!(benches, fuse, decode, gradient);
criterion_main!(benches);
