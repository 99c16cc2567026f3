use std::hint::black_box;

use agssp_bench::{maps, text, tokens};
use agssp_core::kead::{
    bilinear_resize, few_shot_map, zero_shot_map, BankLayers, MemoryBank, ScoringConfig,
};
use agssp_core::metrics::{auroc, mean_ap, ScoredSample};
use agssp_core::pseudolabel::{
    binarize, boxes_for_map, label_components, Connectivity, ThresholdConfig,
};
use agssp_core::synth::{cases, SynthRng};
use agssp_core::tensorio::{decode_tensor, encode_tensor};
use criterion::{criterion_group, criterion_main, Criterion};

fn scoring(c: &mut Criterion) {
    let t = tokens(1, 27, 64);
    let txt = text(2, 64);
    let cfg = ScoringConfig::default();
    c.bench_function("zero_shot_map 27x27 -> 378x378", |b| {
        b.iter(|| zero_shot_map(black_box(&t), &txt, &cfg, 378, 378).unwrap())
    });
    let refs: Vec<_> = (10..14).map(|s| tokens(s, 27, 64)).collect();
    let bank = MemoryBank::new(&refs, BankLayers::All).unwrap();
    c.bench_function("few_shot_map k=4 27x27 -> 378x378", |b| {
        b.iter(|| few_shot_map(black_box(&t), &bank, 378, 378).unwrap())
    });
    let small = &maps(1, 64)[0];
    c.bench_function("bilinear 64x64 -> 512x512", |b| {
        b.iter(|| bilinear_resize(black_box(small), 512, 512))
    });
}

fn pseudo_labels(c: &mut Criterion) {
    let map = &maps(1, 256)[0];
    let mask = binarize(map, 0.5);
    c.bench_function("label_components 256x256", |b| {
        b.iter(|| label_components(black_box(&mask), Connectivity::Eight))
    });
    let cfg = ThresholdConfig::default();
    c.bench_function("boxes_for_map 256x256", |b| {
        b.iter(|| boxes_for_map(black_box(map), 0.6, &cfg))
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = SynthRng::new(3);
    let samples: Vec<ScoredSample> = (0..100_000)
        .map(|i| ScoredSample::new(rng.uniform(), i % 3 == 0))
        .collect();
    c.bench_function("auroc n=100k", |b| {
        b.iter(|| auroc(black_box(&samples)).unwrap())
    });
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let (d, g) = cases::detection_instance(&mut rng);
        dets.extend(d);
        gts.extend(g);
    }
    c.bench_function("mean_ap", |b| b.iter(|| mean_ap(black_box(&dets), &gts)));
}

fn tensors(c: &mut Criterion) {
    let t = maps(1, 512)[0].to_tensor();
    let bytes = encode_tensor(&t);
    c.bench_function("encode 512x512", |b| {
        b.iter(|| encode_tensor(black_box(&t)))
    });
    c.bench_function("decode 512x512", |b| {
        b.iter(|| decode_tensor(black_box(&bytes)).unwrap())
    });
}

criterion_group!(benches, scoring, pseudo_labels, metrics, tensors);
criterion_main!(benches);
