use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use heatcast_bench::pseudo_random;
use heatcast_core::features::SpectralTransform;
use heatcast_core::nn::{ArchConfig, Mode, Network};
use heatcast_core::optim::{AmsGrad, AmsGradConfig};

fn spectral(c: &mut Criterion) {
    let mut group = c.benchmark_group("spectral_transform");
    for (rows, cols, out) in [(24, 32, 16), (25, 128, 64)] {
        let t = SpectralTransform::new(rows, cols, out, out).unwrap();
        let field = pseudo_random(rows * cols, 1);
        let mut dst = vec![0.0; t.output_len()];
        group.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}->{out}")), &field, |b, f| {
            b.iter(|| t.apply(black_box(f), &mut dst))
        });
    }
    group.finish();
}

fn input(n: usize, channels: usize, side: usize) -> Vec<f32> {
    pseudo_random(n * channels * side * side, 2).into_iter().map(|v| v as f32).collect()
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("network_forward");
    group.sample_size(20);
    for (name, arch, side, n) in [("desk", ArchConfig::desk(), 16, 32), ("full", ArchConfig::full_scale(), 64, 2)] {
        let net: Network<f32> = Network::build(&[4], side, side, &arch, 1).unwrap();
        let x = vec![input(n, 4, side)];
        group.bench_function(BenchmarkId::new(name, format!("batch{n}")), |b| {
            b.iter(|| net.forward(black_box(&x), n, Mode::Eval, 0).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut net: Network<f32> = Network::build(&[4], 16, 16, &ArchConfig::desk(), 1).unwrap();
    let mut opt = AmsGrad::new(AmsGradConfig::default());
    let n = 64;
    let x = vec![input(n, 4, 16)];
    let targets: Vec<f32> = (0..n).map(|i| (i % 3 == 0) as u8 as f32).collect();
    c.bench_function("train_step_desk_batch64", |b| {
        b.iter(|| {
            let cache = net.forward(&x, n, Mode::Train, 7).unwrap();
            net.update_running_stats(&cache).unwrap();
            let (grads, _) = net.backward(&cache, &targets).unwrap();
            opt.step(&mut net.tensors_mut(), &grads.0).unwrap();
        })
    });
}

criterion_group!(benches, spectral, forward, train_step);
criterion_main!(benches);
