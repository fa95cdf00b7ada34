use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use charnmt::eval::beam_config;
use charnmt::nn::Forward;
use charnmt::{beam_search, learn_bpe, Graph, VocabKind};
use charnmt_bench::{bpe_corpus, fixture, Variant};

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward-backward");
    group.sample_size(10);
    for variant in Variant::ALL {
        let f = fixture(variant, 64, 16, 30);
        group.throughput(Throughput::Elements(f.batch.src.iter().map(Vec::len).sum::<usize>() as u64));
        group.bench_function(BenchmarkId::from_parameter(variant.name()), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let mut fx = Forward::eval(&mut g, &f.store);
                let terms = f.model.loss(&mut fx, &f.batch, 1.0).unwrap();
                g.backward(terms.cross_entropy).unwrap();
            });
        });
    }
    group.finish();
}

fn beam(c: &mut Criterion) {
    let mut group = c.benchmark_group("beam-search");
    group.sample_size(10);
    let f = fixture(Variant::BiLstm, 64, 1, 30);
    let src = &f.batch.src[0];
    let (mem, _) = f.model.source_memory(&f.store, src, 1.0).unwrap();
    for width in [1, 4, 12] {
        let cfg = beam_config(&f.model.cfg, VocabKind::Char, src.len(), width);
        group.bench_with_input(BenchmarkId::from_parameter(width), &cfg, |b, cfg| {
            b.iter(|| beam_search(&f.model.decoder, &f.store, &mem, cfg).unwrap());
        });
    }
    group.finish();
}

fn bpe(c: &mut Criterion) {
    let lines = bpe_corpus(2000);
    let mut group = c.benchmark_group("learn-bpe");
    group.sample_size(10);
    group.throughput(Throughput::Bytes(lines.iter().map(|l| l.len() as u64).sum()));
    group.bench_function("200-merges", |b| {
        b.iter(|| learn_bpe(lines.iter().map(String::as_str), 220).unwrap());
    });
    group.finish();
}

criterion_group!(benches, train_step, beam, bpe);
criterion_main!(benches);
