//! Malware-family classification of function-call graphs with graph neural
//! networks.
//!
//! Each node gets four centrality features (PageRank, in-degree, out-degree,
//! betweenness). A stack of GCN, GraphSAGE (max-pool) or GIN layers feeds a
//! jumping-knowledge concatenation, a global max readout and a small dense
//! head. Gradients come from the tape in [`tensor`]; [`train`] fits with Adam.
//!
//! ```
//! use fcggnn::{evaluate, fit, shape_corpus, LayerKind, ModelConfig, TrainConfig};
//!
//! let corpus = shape_corpus(1, 30, 6, 9, 5, 10);
//! let model_cfg = ModelConfig { hidden: 8, head_units: 8, num_layers: 2, ..ModelConfig::new(LayerKind::Sage, 3) };
//! let train_cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
//! let (model, history) = fit(&corpus, &model_cfg, &train_cfg).unwrap();
//! assert_eq!(history.epochs.len(), 2);
//! let report = evaluate(&model, &corpus.test).unwrap();
//! assert!(report.accuracy >= 0.0);
//! ```

pub mod dataio;
pub mod features;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use dataio::{
    export_embeddings, load_corpus, load_graph, load_model, open_dataset, read_manifest,
    save_model, scan_directory, CorpusManifest, DataError, ManifestEntry, Split,
};
pub use features::{
    apply_standardizer, betweenness, build_feature_matrix, degrees, fit_standardizer, pagerank,
    NodeFeatureMatrix, PageRank, StandardizationStats, FEATURE_DIM,
};
pub use gnn::{LayerKind, ModelConfig, ModelParams};
pub use graph::{batch_graphs, load_edge_list, DirectedGraph, GraphBatch, GraphError};
pub use metrics::{compute_metrics, MetricsReport};
pub use synthetic::shape_corpus;
pub use tensor::{Matrix, Tape, TensorError};
pub use train::{
    evaluate, fit, fit_with_progress, predict, Corpus, EpochRecord, Prediction, Sample,
    TrainConfig, TrainError, TrainHistory, TrainedModel,
};

/// Environment variable read by [`configure_workers`].
pub const WORKERS_ENV: &str = "FCG_NUM_WORKERS";

/// Sizes the global rayon pool from `requested`, falling back to
/// `FCG_NUM_WORKERS`, then to rayon's default. Returns the pool size.
/// Only the first successful call has an effect.
pub fn configure_workers(requested: Option<usize>) -> usize {
    let from_env = || {
        std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
    };
    if let Some(n) = requested.or_else(from_env).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    rayon::current_num_threads()
}
