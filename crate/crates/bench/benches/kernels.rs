use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssl_seg_core::losses::{loss_and_grad, random_field, LossConfig, LossInput, LossKind};
use ssl_seg_core::metrics::{nsd_with, SurfaceDistance};
use ssl_seg_core::nn::{ConvMode, Gradients, Tensor};
use ssl_seg_core::phantom::{generate_case, PhantomConfig};
use ssl_seg_core::{build_network, NetworkSpec};

fn random_patch(side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = [side; 3];
    let data = (0..side * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_data(1, shape, data)
}

fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for mode in [ConvMode::Separable, ConvMode::Regular] {
        let net = build_network(&NetworkSpec { conv_mode: mode, ..NetworkSpec::toy(4) }, 1).unwrap();
        for side in [16, 32] {
            let x = random_patch(side, &mut rng);
            group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), side), &x, |b, x| {
                b.iter(|| net.forward(std::slice::from_ref(x)).unwrap())
            });
        }
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = build_network(&NetworkSpec::toy(4), 1).unwrap();
    let x = random_patch(16, &mut rng);
    let mut grads = Gradients::zeros_like(&net);
    c.bench_function("forward_backward_16", |b| {
        b.iter(|| {
            let (out, trace) = net.forward_train(&x).unwrap();
            let d = Tensor::from_data(out.logits.channels, out.logits.shape, vec![1e-3; out.logits.data.len()]);
            net.backward(trace, d, Vec::new(), &mut grads);
        })
    });
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mu, target) = random_field(&mut rng, 4, [16, 16, 16]);
    let mut group = c.benchmark_group("loss_and_grad_4x16");
    for kind in [LossKind::Rs, LossKind::DiceCe] {
        let cfg = LossConfig { kind, ..Default::default() };
        group.bench_function(format!("{kind:?}"), |b| {
            b.iter(|| loss_and_grad(&LossInput::new(&mu, &target, &cfg).unwrap()).unwrap())
        });
    }
    group.finish();
}

fn nsd(c: &mut Criterion) {
    let mut group = c.benchmark_group("nsd");
    group.sample_size(10);
    let cfg = PhantomConfig { min_voxels_per_class: 50, ..PhantomConfig::new(4, [32, 32, 32], 2, 0.0) };
    let (_, a) = generate_case(&cfg, 1).unwrap();
    let (_, b) = generate_case(&cfg, 2).unwrap();
    for (name, mode) in [("brute_force", SurfaceDistance::BruteForce), ("distance_transform", SurfaceDistance::DistanceTransform)] {
        group.bench_function(name, |bch| bch.iter(|| nsd_with(black_box(&a), black_box(&b), 1, 2.0, mode).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, forward, train_step, losses, nsd);
criterion_main!(benches);
