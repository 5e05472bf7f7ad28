use std::hint::black_box;

use ariign_core::corpus::{Dialogue, Dims};
use ariign_core::metrics::MetricsReport;
use ariign_core::relgraph::{RelationSet, Topology};
use ariign_core::{generate_synthetic, Corpus, SyntheticSpec, TrainConfig, Trainer};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus() -> Corpus {
    generate_synthetic(&SyntheticSpec {
        dialogues: 8,
        utterances_per_dialogue: 20,
        dims: Dims {
            text: 100,
            audio: 100,
            visual: 512,
        },
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        d: 64,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let labels: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..7)).collect();
    let preds: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..7)).collect();
    c.bench_function("metrics_10k_c7", |b| {
        b.iter(|| MetricsReport::from_predictions(black_box(&preds), black_box(&labels), 7).unwrap())
    });
}

fn graph(c: &mut Criterion) {
    let corpus = corpus();
    let dialogue = &corpus.dialogues[0];
    c.bench_function("topology_t20_w10", |b| {
        b.iter(|| Topology::for_dialogue(black_box(dialogue), 10, RelationSet::Full))
    });

    let trainer = Trainer::new(&config(), &corpus.meta).unwrap();
    c.bench_function("eval_forward_8x20", |b| {
        b.iter(|| trainer.model.evaluate(black_box(&corpus.dialogues)).unwrap())
    });

    let batch: Vec<&Dialogue> = corpus.dialogues.iter().collect();
    c.bench_function("graph_step_8x20", |b| {
        b.iter_batched(
            || trainer.clone(),
            |mut t| t.graph_step(black_box(&batch)).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = metrics, graph
}
criterion_main!(benches);
