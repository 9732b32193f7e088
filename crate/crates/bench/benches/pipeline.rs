use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fcggnn::gnn::{infer, model_forward};
use fcggnn::synthetic::{random_tree, shape_corpus};
use fcggnn::tensor::AdamState;
use fcggnn::{
    apply_standardizer, batch_graphs, betweenness, build_feature_matrix, fit_standardizer,
    pagerank, DirectedGraph, LayerKind, Matrix, ModelConfig, ModelParams, Tape,
};

/// A tree with a handful of extra back edges so that shortest paths branch.
fn call_graph(n: usize, seed: u64) -> DirectedGraph {
    let tree = random_tree(n, seed);
    let extra = (0..n / 10).map(|i| ((i * 7919 + 13) % n, (i * 104_729 + 1) % n));
    DirectedGraph::from_edges(n, tree.edges().iter().copied().chain(extra)).unwrap()
}

fn centrality(c: &mut Criterion) {
    let mut group = c.benchmark_group("centrality");
    for n in [200, 1000] {
        let g = call_graph(n, 1);
        group.bench_with_input(BenchmarkId::new("betweenness", n), &g, |b, g| {
            b.iter(|| betweenness(black_box(g)))
        });
        group.bench_with_input(BenchmarkId::new("pagerank", n), &g, |b, g| {
            b.iter(|| pagerank(black_box(g), 0.85, 1e-9, 200))
        });
    }
    group.finish();
}

fn batch_inputs(graphs: &[DirectedGraph]) -> (fcggnn::GraphBatch, Matrix) {
    let raw: Vec<_> = graphs.iter().map(build_feature_matrix).collect();
    let stats = fit_standardizer(&raw).unwrap();
    let x = Matrix::vstack(
        &raw.iter()
            .map(|f| apply_standardizer(f, &stats))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let batch = batch_graphs(graphs.iter().map(|g| (g, 0))).unwrap();
    (batch, x)
}

fn model(c: &mut Criterion) {
    let graphs: Vec<DirectedGraph> = (0..64).map(|i| call_graph(60, i)).collect();
    let (batch, x) = batch_inputs(&graphs);
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for kind in LayerKind::ALL {
        let config = ModelConfig::new(kind, 5);
        let params = ModelParams::init(&config).unwrap();
        group.bench_function(BenchmarkId::new("forward_64x60", kind), |b| {
            b.iter(|| infer(&config, &params, &batch, x.clone()).unwrap())
        });

        let mut params = params.clone();
        let mut adam = AdamState::new(params.tensors());
        group.bench_function(BenchmarkId::new("train_step_64x60", kind), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = params.register(&mut tape, true);
                let xv = tape.constant(x.clone());
                let out = model_forward(&mut tape, &batch, xv, &vars, &config).unwrap();
                let loss = tape
                    .softmax_cross_entropy(out.logits, batch.labels())
                    .unwrap();
                let mut grads = tape.backward(loss).unwrap();
                let g: Vec<Matrix> = vars.iter().map(|&v| grads.take(v).unwrap()).collect();
                adam.step(params.tensors_mut(), &g, 1e-3).unwrap();
            })
        });
    }
    group.finish();
}

fn featurize(c: &mut Criterion) {
    let corpus = shape_corpus(3, 64, 0, 0, 20, 60);
    c.bench_function("featurize_corpus_64", |b| {
        b.iter(|| {
            corpus
                .train
                .iter()
                .map(|s| build_feature_matrix(&s.graph))
                .collect::<Vec<_>>()
        })
    });
}

criterion_group!(benches, centrality, model, featurize);
criterion_main!(benches);
