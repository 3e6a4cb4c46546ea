use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use std::hint::black_box;

use opclass_bench::{observations, production_scale_model};
use opclass_core::features::{embed_image, FeatureVector};
use opclass_core::hmm::{baum_welch, forward_backward, posterior_decode};
use opclass_core::nn::{
    forward, init_cnn, CnnSpec, Tensor, default_conv_blocks,
};

fn bench_hmm(c: &mut Criterion) {
    let model = production_scale_model();
    let obs = observations(&model, 10_000);

    let mut group = c.benchmark_group("hmm");
    group.throughput(Throughput::Elements(obs.len() as u64));
    group.sample_size(10);
    group.bench_function("forward_backward_t10k", |b| {
        b.iter(|| forward_backward(black_box(&model), black_box(&obs)).unwrap())
    });
    group.bench_function("baum_welch_iteration_t10k", |b| {
        b.iter(|| baum_welch(black_box(&model), black_box(&obs), 0, 1e9, 1).unwrap())
    });
    let short = &obs[..112];
    group.bench_function("posterior_decode_l112", |b| {
        b.iter(|| posterior_decode(black_box(&model), black_box(short)).unwrap())
    });
    group.finish();
}

fn bench_features(c: &mut Criterion) {
    let vector = FeatureVector {
        values: (0..784).map(|i| (i % 20) as f64).collect(),
        sample_id: "bench".into(),
        label: "bench".into(),
    };
    c.bench_function("embed_image_784_into_224", |b| {
        b.iter(|| embed_image(black_box(&vector), 224).unwrap())
    });
}

fn bench_cnn(c: &mut Criterion) {
    let spec = CnnSpec {
        input_side: 224,
        conv_blocks: default_conv_blocks(),
        num_classes: 7,
    };
    let model = init_cnn(&spec, 3).unwrap();
    let batch = Tensor::from_vec(
        &[1, 1, 224, 224],
        (0..224 * 224).map(|i| (i % 97) as f64 / 97.0).collect(),
    )
    .unwrap();
    let mut group = c.benchmark_group("cnn");
    group.sample_size(10);
    group.bench_function("forward_224_single", |b| {
        b.iter(|| forward(black_box(&model), black_box(&batch)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_hmm, bench_features, bench_cnn);
criterion_main!(benches);
