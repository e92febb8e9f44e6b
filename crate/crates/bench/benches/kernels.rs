//! Hot-kernel benchmarks: mask algebra, adaptive filters, KDE, and the
//! forward/backward pass of the three-branch network.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use uasnet_core::adversarial::{joint_objective, BatchTargets, TermWeights};
use uasnet_core::autodiff::Tape;
use uasnet_core::data::phantom::{generate_phantom, PhantomSpec};
use uasnet_core::filters::{otsu_binarize, sobel_magnitude, FeatureMap};
use uasnet_core::mask::{derive_targets, BinaryMask};
use uasnet_core::metrics::kde_from_values;
use uasnet_core::model::{ArchConfig, ModelBundle, ModelConfig, ModelKind};

fn bench_mask_algebra(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let masks: Vec<BinaryMask> = (0..4)
        .map(|_| {
            BinaryMask::new(Array2::from_shape_fn((64, 64), |_| rng.gen_range(0..=1u8))).unwrap()
        })
        .collect();
    c.bench_function("union_4x64x64", |b| {
        b.iter(|| uasnet_core::mask::union(black_box(&masks)).unwrap())
    });
    c.bench_function("select_reference_4x64x64", |b| {
        b.iter(|| uasnet_core::mask::select_reference(black_box(&masks)).unwrap())
    });
}

fn bench_filters(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = FeatureMap::new(Array3::from_shape_fn((4, 64, 64), |_| rng.gen::<f32>())).unwrap();
    c.bench_function("sobel_4x64x64", |b| {
        b.iter(|| sobel_magnitude(black_box(&x)))
    });
    c.bench_function("otsu_4x64x64", |b| b.iter(|| otsu_binarize(black_box(&x))));
}

fn bench_kde(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let values: Vec<f64> = (0..4096).map(|_| rng.gen_range(-900.0..0.0)).collect();
    c.bench_function("kde_4096_values", |b| {
        b.iter(|| kde_from_values(black_box(&values), None).unwrap())
    });
}

fn bench_network(c: &mut Criterion) {
    let config = ModelConfig {
        kind: ModelKind::Uasnet,
        arch: ArchConfig::thin(),
        adv: Default::default(),
    };
    let bundle = ModelBundle::new(config, 7, false).unwrap();
    let spec = PhantomSpec::for_patch(32);
    let set = generate_phantom(&spec, 11).unwrap();
    let targets = derive_targets(&set).unwrap();
    let (h, w) = set.image.dim();
    let mut images = Array4::<f32>::zeros((1, 1, h, w));
    let mut union = Array4::<f32>::zeros((1, 1, h, w));
    let mut inter = Array4::<f32>::zeros((1, 1, h, w));
    let mut reference = Array4::<f32>::zeros((1, 1, h, w));
    for i in 0..h {
        for j in 0..w {
            images[[0, 0, i, j]] = set.image[[i, j]];
            union[[0, 0, i, j]] = targets.union.data()[[i, j]] as f32;
            inter[[0, 0, i, j]] = targets.intersection.data()[[i, j]] as f32;
            reference[[0, 0, i, j]] = targets.reference.data()[[i, j]] as f32;
        }
    }

    c.bench_function("forward_thin_32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            black_box(bundle.forward_batch(&mut tape, &images, None).unwrap());
        })
    });
    c.bench_function("forward_backward_thin_32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let fwd = bundle.forward_batch(&mut tape, &images, None).unwrap();
            let batch_targets = BatchTargets {
                union: union.clone(),
                inter: inter.clone(),
                reference: reference.clone(),
                labels: vec![Some(0)],
            };
            let objective = joint_objective(
                &mut tape,
                &bundle,
                &fwd,
                &images,
                &batch_targets,
                TermWeights::default(),
                false,
            )
            .unwrap();
            black_box(tape.backward(objective.total_min, bundle.store.len()));
        })
    });
}

criterion_group!(
    benches,
    bench_mask_algebra,
    bench_filters,
    bench_kde,
    bench_network
);
criterion_main!(benches);
