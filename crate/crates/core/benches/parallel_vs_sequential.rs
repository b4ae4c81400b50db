//! Frame-model forward/backward on one training batch, run on the default rayon pool
//! and on a single-thread pool. Built without the `parallel` feature both variants
//! take the sequential path.

use affect_mtl::datakit::Image;
use affect_mtl::losses::FrameModelOutput;
use affect_mtl::models::{Backbone, FrameModel, FrameModelSpec, Role};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, side: usize) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n).map(|_| Image::new(side, side, (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect())).collect()
}

fn step(model: &FrameModel, images: &[&Image]) -> Vec<f32> {
    let (outs, tapes) = model.forward_train(images).unwrap();
    let grads: Vec<FrameModelOutput> = outs
        .iter()
        .map(|o| FrameModelOutput { expr_logits: vec![0.1; o.expr_logits.len()], va_logits: vec![0.1; o.va_logits.len()] })
        .collect();
    model.backward(&tapes, &grads).unwrap()
}

fn bench(c: &mut Criterion) {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut group = c.benchmark_group("frame_step");
    group.sample_size(10);
    for backbone in [Backbone::ToyConv, Backbone::Resnet50Style] {
        let spec = FrameModelSpec { backbone, ..Default::default() };
        let model = FrameModel::new(&spec, 1, Role::Teacher).unwrap();
        let images = batch(48, spec.image_height);
        let refs: Vec<&Image> = images.iter().collect();
        let name = format!("{backbone:?}");
        group.bench_with_input(BenchmarkId::new("parallel", &name), &refs, |b, r| b.iter(|| step(&model, r)));
        group.bench_with_input(BenchmarkId::new("sequential", &name), &refs, |b, r| {
            b.iter(|| single.install(|| step(&model, r)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
