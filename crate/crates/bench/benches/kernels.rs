use std::hint::black_box;

use classrecon_core::diffusion::UNetConfig;
use classrecon_core::{
    denoise_step, gradient_of_path_loss, Arch, Classifier, GradMode, NoisePath, Tensor, UNet, VarianceSchedule,
};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image() -> Tensor<f32> {
    Tensor::from_vec([1, 1, 64, 64], (0..4096).map(|i| (i as f32 * 0.01).sin()).collect())
}

fn classifiers(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = image();
    for arch in [Arch::Cnn2, Arch::Vgg11 { width: 16 }] {
        let clf = Classifier::<f32>::new(arch, 64, 64, 40, &mut rng).unwrap();
        c.bench_function(&format!("{arch} logits"), |b| {
            b.iter(|| clf.logits(black_box(&x)).unwrap())
        });
        c.bench_function(&format!("{arch} input gradient"), |b| {
            b.iter(|| clf.ce_and_grad(black_box(&x), 3).unwrap())
        });
    }
}

fn denoising(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = UNet::<f32>::new(UNetConfig::noise_predictor(8), &mut rng);
    let sched = VarianceSchedule::linear(600).unwrap();
    let x = image();
    let z = Tensor::full([1, 1, 64, 64], 0.1);
    c.bench_function("denoise step unet8", |b| {
        b.iter(|| denoise_step(black_box(&x), 300, &z, &net, &sched).unwrap())
    });
}

fn path_gradient(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = UNet::<f32>::new(UNetConfig::noise_predictor(8), &mut rng);
    let clf = Classifier::<f32>::new(Arch::Vgg11 { width: 16 }, 64, 64, 40, &mut rng).unwrap();
    let sched = VarianceSchedule::linear(20).unwrap();
    let path = NoisePath::<f32>::from_seed(3, 20, &[1, 1, 64, 64], true);
    let mut group = c.benchmark_group("path gradient T=20");
    group.sample_size(10);
    for mode in [GradMode::FullGraph, GradMode::Checkpointed(5)] {
        group.bench_function(mode.to_string(), |b| {
            b.iter(|| gradient_of_path_loss(&clf, &net, &sched, black_box(&path), 3, mode, false).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, classifiers, denoising, path_gradient);
criterion_main!(benches);
