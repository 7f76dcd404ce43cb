use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use phq_core::corpus::generate_synthetic;
use phq_core::harness::{Model, RunConfig, SyntheticSpec};
use phq_core::metrics::{bleu, fleiss_kappa_iou, rouge_l, rouge_n, GenerationScores, HashedEmbedder};
use phq_core::parse_summary;

const REFERENCE: &str = "The participant primarily experiences a mild reduction of interest or pleasure, occasional feelings of depression or hopelessness, mild sleep issues, and severe appetite issues. These symptoms may be related to work stress. If symptoms persist or worsen, it is recommended that the participant seek further evaluation and treatment from a psychiatrist or psychologist.";
const HYPOTHESIS: &str = "The participant primarily experiences mild sleep issues and severe appetite issues. These symptoms may be related to work stress.";

fn metrics(c: &mut Criterion) {
    c.bench_function("rouge_1", |b| b.iter(|| rouge_n(black_box(REFERENCE), black_box(HYPOTHESIS), 1)));
    c.bench_function("rouge_l", |b| b.iter(|| rouge_l(black_box(REFERENCE), black_box(HYPOTHESIS))));
    c.bench_function("bleu", |b| b.iter(|| bleu(black_box(REFERENCE), black_box(HYPOTHESIS))));
    let backend = HashedEmbedder::default();
    c.bench_function("generation_scores", |b| b.iter(|| GenerationScores::score(black_box(REFERENCE), black_box(HYPOTHESIS), &backend).unwrap()));
    let annotations: Vec<Vec<&str>> = (0..50).map(|_| vec!["i barely sleep at night", "barely sleep", "i feel tired all day"]).collect();
    c.bench_function("fleiss_kappa_iou_50x3", |b| b.iter(|| fleiss_kappa_iou(black_box(&annotations), 0.5).unwrap()));
}

fn summaries(c: &mut Criterion) {
    c.bench_function("parse_summary", |b| b.iter(|| parse_summary(black_box(REFERENCE)).unwrap()));
}

fn model(c: &mut Criterion) {
    let config = RunConfig { synthetic: Some(SyntheticSpec { count: 12, seed: 1 }), ..Default::default() };
    let corpus = generate_synthetic(12, 1).unwrap();
    let model = Model::init(&config, &corpus.train).unwrap();
    let sample = corpus.train[0].clone();
    c.bench_function("loss_forward", |b| b.iter(|| model.loss(black_box(&sample)).unwrap()));
    c.bench_function("loss_and_grad", |b| b.iter(|| model.loss_and_grad(black_box(&sample)).unwrap()));
}

criterion_group!(benches, metrics, summaries, model);
criterion_main!(benches);
