use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use textmark_bench::{fixture, model_for};
use textmark_core::concealment::{onion_filter, NgramScorer, PerplexityScorer};
use textmark_core::material::{compute_digest, generate_keys};
use textmark_core::model::Arch;
use textmark_core::training::wm_regularizer;
use textmark_core::verification::{extract_delta, DeltaMode};

fn bench_forward(c: &mut Criterion) {
    let fx = fixture();
    let mut group = c.benchmark_group("forward_batch64");
    for arch in [Arch::TextCnn, Arch::Gru, Arch::BiLstm] {
        let model = model_for(arch, &fx);
        let (ids, _) = fx.batch.gather(&fx.batch.all_indices(), 5);
        group.bench_function(arch.as_str(), |b| {
            b.iter(|| model.logits(black_box(ids.view())).unwrap())
        });
    }
    group.finish();
}

fn bench_watermark_math(c: &mut Criterion) {
    let keys = generate_keys((16, 2), 0.5, 42).unwrap();
    let s = keys.s_flat();
    let b = keys.kappa2_flat();
    let w: Vec<f64> = s.iter().map(|v| v + 0.004).collect();
    c.bench_function("wm_regularizer_32", |bch| {
        bch.iter(|| wm_regularizer(black_box(&w), black_box(&s), black_box(&b)).unwrap())
    });
    c.bench_function("extract_delta_32", |bch| {
        bch.iter(|| {
            extract_delta(
                black_box(&w),
                black_box(&s),
                black_box(&b),
                DeltaMode::SelectedOnly,
            )
            .unwrap()
        })
    });
}

fn bench_digest(c: &mut Criterion) {
    let key = [7u8; 32];
    c.bench_function("hmac_digest", |b| {
        b.iter(|| compute_digest(black_box(&key), black_box("Owner Co. model v1")).unwrap())
    });
}

fn bench_onion(c: &mut Criterion) {
    let fx = fixture();
    let scorer = NgramScorer::train(&fx.train, 0.1).unwrap();
    let text = &fx.train.samples()[0].text;
    let p0 = scorer
        .score_tokens(&textmark_core::corpus::tokenize(text))
        .unwrap();
    c.bench_function("onion_filter_one_text", |b| {
        b.iter(|| onion_filter(black_box(text), &scorer, black_box(p0)).unwrap())
    });
}

criterion_group!(
    benches,
    bench_forward,
    bench_watermark_math,
    bench_digest,
    bench_onion
);
criterion_main!(benches);
