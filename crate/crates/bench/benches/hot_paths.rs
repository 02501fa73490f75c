use criterion::{criterion_group, criterion_main, Criterion};
use gaze_focus::adapter::{upsample_logits, AdapterConfig, AdapterState};
use gaze_focus::backbone::{BackboneConfig, FrozenBackbone};
use gaze_focus::data_schema::{synth_sample, SynthConfig};
use gaze_focus::gazeprep::{render_heatmap, DEFAULT_RADIUS};
use gaze_focus::metrics::ssim;
use ndarray::Array2;
use std::hint::black_box;

fn bench_render(c: &mut Criterion) {
    let sample = synth_sample(7, &SynthConfig::default());
    let (w, h) = (sample.image.width(), sample.image.height());
    c.bench_function("render_heatmap_448", |b| {
        b.iter(|| render_heatmap(black_box(&sample.fixations), w, h, DEFAULT_RADIUS).unwrap())
    });
}

fn bench_adapter(c: &mut Criterion) {
    let synth = SynthConfig {
        image_size: 224,
        ..SynthConfig::default()
    };
    let sample = synth_sample(3, &synth);
    let backbone = FrozenBackbone::toy(BackboneConfig::default()).unwrap();
    let features = backbone.visual_encode(&sample.image);
    let text = backbone.text_encode("heart").unwrap();
    let adapter = AdapterState::for_backbone(AdapterConfig::default(), &backbone).unwrap();
    c.bench_function("adapter_forward_224", |b| {
        b.iter(|| adapter.forward(black_box(&sample.image), &features, &text).unwrap())
    });
    let pass = adapter.forward(&sample.image, &features, &text).unwrap();
    let d_logits = Array2::from_elem(pass.logits.dim(), 1e-3);
    c.bench_function("adapter_backward_224", |b| {
        b.iter(|| adapter.backward(black_box(&pass), &d_logits))
    });
    c.bench_function("upsample_logits_14_to_224", |b| {
        b.iter(|| upsample_logits(black_box(&pass.a_l), 224, 224))
    });
}

fn bench_ssim(c: &mut Criterion) {
    let a = Array2::from_shape_fn((224, 224), |(y, x)| ((x * 7 + y * 13) % 97) as f64 / 97.0);
    let b = a.mapv(|v| (v * 0.9 + 0.05).min(1.0));
    c.bench_function("ssim_224", |bch| {
        bch.iter(|| ssim(black_box(&a), black_box(&b)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_render, bench_adapter, bench_ssim
}
criterion_main!(benches);
