use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use tripsketch_core::cleora::{CleoraOptions, EmbeddingTable};
use tripsketch_core::codes::build_codes;
use tripsketch_core::dataset::{generate_synthetic, split, SyntheticConfig};
use tripsketch_core::model::{AdamW, AdamWConfig, InputEncoder, Mode, ModelOptions, Network};
use tripsketch_core::pipeline::{fit_sketches, PipelineConfig};
use tripsketch_core::sketch::log_scores;
use tripsketch_core::{CodesMatrix, TransitionGraph};

struct Fixture {
    graph: TransitionGraph,
    table: EmbeddingTable,
    codes: Vec<CodesMatrix>,
    split: tripsketch_core::dataset::Split,
}

fn fixture() -> Fixture {
    let config = PipelineConfig::desk_scale();
    let trips = generate_synthetic(&SyntheticConfig::default());
    let split = split(&trips, 0.1, 0).unwrap();
    let graph = TransitionGraph::build(&split.graph_trips(&trips)).unwrap();
    let tables =
        tripsketch_core::embed_cities(&graph, 64, &[1, 3], 0, CleoraOptions::default()).unwrap();
    let codes = fit_sketches(&tables, &config.sketch).unwrap();
    Fixture {
        graph,
        table: tables[0].clone(),
        codes,
        split,
    }
}

fn benches(c: &mut Criterion) {
    let f = fixture();

    let start = EmbeddingTable::init(f.graph.node_ids().to_vec(), 64, 0).unwrap();
    c.bench_function("cleora_iteration_2000_cities_dim64", |b| {
        b.iter(|| {
            start
                .iterate(black_box(&f.graph), 1, CleoraOptions::default())
                .unwrap()
        })
    });

    c.bench_function("dlsh_codes_depth8_width16", |b| {
        b.iter(|| build_codes(black_box(&f.table), 16, 8, 0).unwrap())
    });

    let refs: Vec<&CodesMatrix> = f.codes.iter().collect();
    let width: usize = refs.iter().map(|c| c.depth() * c.width()).sum();
    let cells: Vec<f64> = (0..width).map(|i| 1.0 / (1.0 + (i % 16) as f64)).collect();
    c.bench_function("decode_scores_2000_cities", |b| {
        b.iter(|| log_scores(black_box(&cells), &refs).unwrap())
    });

    let examples = &f.split.train[..512];
    let scaler = tripsketch_core::dataset::FeatureScaler::fit(examples);
    let vocab = tripsketch_core::dataset::CategoricalVocab::fit(examples);
    let encoder = InputEncoder::new(&refs, 0.9, &scaler, &vocab).unwrap();
    let encoded: Vec<_> = examples
        .iter()
        .map(|e| encoder.encode(e).unwrap())
        .collect();
    let batch_refs: Vec<_> = encoded.iter().take(128).collect();
    let options = ModelOptions {
        hidden: 256,
        ..ModelOptions::default()
    };
    let mut net =
        Network::new(options.to_config(encoder.segments().to_vec(), vocab.sizes(), 0)).unwrap();
    let batch = encoder.batch(&net.config, &batch_refs, true).unwrap();

    c.bench_function("forward_eval_batch128_hidden256", |b| {
        b.iter(|| net.forward(black_box(&batch), Mode::Eval).unwrap())
    });
    let mut opt = AdamW::new(AdamWConfig::default(), &net.weights);
    c.bench_function("train_step_batch128_hidden256", |b| {
        b.iter(|| {
            let (_, grads, stats) = net.loss_and_gradients(&batch).unwrap();
            opt.step(&mut net.weights, &grads, 1e-3);
            net.update_running_stats(&stats);
        })
    });
}

criterion_group! {
    name = stages;
    config = Criterion::default().sample_size(10);
    targets = benches
}
criterion_main!(stages);
