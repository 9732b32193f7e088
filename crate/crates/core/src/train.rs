//! Supervised training with best-validation checkpointing, evaluation and
//! single-graph prediction.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{
    apply_standardizer, build_feature_matrix, fit_standardizer, FeatureError, NodeFeatureMatrix,
    StandardizationStats,
};
use crate::gnn::{argmax, infer, model_forward, ModelConfig, ModelError, ModelParams};
use crate::graph::{batch_graphs, DirectedGraph, GraphError};
use crate::metrics::{compute_metrics, MetricsError, MetricsReport};
use crate::tensor::{softmax, AdamState, Matrix, Tape, TensorError};

pub const DEFAULT_LR: f64 = 0.001;
pub const STANDARD_LEARNING_RATES: [f64; 2] = [0.001, 0.0001];
pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("{split} sample {id:?} has label {label}, which never occurs in the training split")]
    UnknownLabel {
        split: &'static str,
        id: String,
        label: usize,
    },
    #[error("training labels must cover 0..{classes}; class {missing} has no training samples")]
    MissingClass { classes: usize, missing: usize },
    #[error("non-finite value at epoch {epoch}, batch {batch}: {source}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        source: TensorError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub graph: DirectedGraph,
    pub label: usize,
}

/// Labeled graphs split three ways. `val` may be empty, in which case
/// [`fit`] carves a stratified validation set out of `train`.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    Accuracy,
    WeightedF1,
}

impl SelectionMetric {
    fn score(self, report: &MetricsReport) -> f64 {
        match self {
            SelectionMetric::Accuracy => report.accuracy,
            SelectionMetric::WeightedF1 => report.weighted.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            selection_metric: SelectionMetric::WeightedF1,
            val_fraction: DEFAULT_VAL_FRACTION,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        // lr = 0 is accepted: it freezes the parameters, which is handy for
        // checking the loop itself.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail("learning rate must be finite and non-negative");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Everything except the timings.
    pub fn trajectory(&self) -> (Vec<f64>, Vec<f64>, usize) {
        (
            self.epochs.iter().map(|e| e.train_loss).collect(),
            self.epochs.iter().map(|e| e.val_metric).collect(),
            self.best_epoch,
        )
    }
}

/// Everything needed to classify a raw graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub stats: StandardizationStats,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    pub probabilities: Vec<f64>,
    pub embedding: Vec<f32>,
}

/// Computes raw features for many graphs on the rayon pool, preserving order.
pub fn featurize_all(graphs: &[&DirectedGraph]) -> Vec<NodeFeatureMatrix> {
    graphs.par_iter().map(|g| build_feature_matrix(g)).collect()
}

struct Prepared<'a> {
    graphs: Vec<&'a DirectedGraph>,
    features: Vec<Matrix>,
    labels: Vec<usize>,
}

impl<'a> Prepared<'a> {
    fn new(
        samples: &[&'a Sample],
        stats: &StandardizationStats,
        raw: Vec<NodeFeatureMatrix>,
    ) -> Self {
        Prepared {
            graphs: samples.iter().map(|s| &s.graph).collect(),
            features: raw.iter().map(|f| apply_standardizer(f, stats)).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    fn len(&self) -> usize {
        self.graphs.len()
    }
}

/// Stratified, seeded hold-out of `fraction` of each class.
fn carve_validation(train: &[Sample], fraction: f64, seed: u64) -> (Vec<&Sample>, Vec<&Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11);
    let labels: BTreeSet<usize> = train.iter().map(|s| s.label).collect();
    let mut val_idx = BTreeSet::new();
    for label in labels {
        let mut idx: Vec<usize> = (0..train.len())
            .filter(|&i| train[i].label == label)
            .collect();
        idx.shuffle(&mut rng);
        let take = ((idx.len() as f64) * fraction).round() as usize;
        let take = take.min(idx.len().saturating_sub(1));
        val_idx.extend(idx.into_iter().take(take));
    }
    let (val, rest): (Vec<_>, Vec<_>) = train
        .iter()
        .enumerate()
        .partition(|(i, _)| val_idx.contains(i));
    (
        rest.into_iter().map(|(_, s)| s).collect(),
        val.into_iter().map(|(_, s)| s).collect(),
    )
}

fn check_labels(corpus: &Corpus, train: &[&Sample], classes: usize) -> Result<(), TrainError> {
    let seen: BTreeSet<usize> = train.iter().map(|s| s.label).collect();
    if let Some(missing) = (0..classes).find(|c| !seen.contains(c)) {
        return Err(TrainError::MissingClass { classes, missing });
    }
    for (split, samples) in [
        ("train", &corpus.train),
        ("val", &corpus.val),
        ("test", &corpus.test),
    ] {
        if let Some(s) = samples.iter().find(|s| !seen.contains(&s.label)) {
            return Err(TrainError::UnknownLabel {
                split,
                id: s.id.clone(),
                label: s.label,
            });
        }
    }
    Ok(())
}

pub fn fit(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainHistory), TrainError> {
    fit_with_progress(corpus, model_cfg, train_cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with_progress(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainedModel, TrainHistory), TrainError> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if model_cfg.num_classes != corpus.class_names.len() {
        return Err(TrainError::Config(format!(
            "model has {} classes but the corpus names {}",
            model_cfg.num_classes,
            corpus.class_names.len()
        )));
    }

    let (train, val): (Vec<&Sample>, Vec<&Sample>) = if corpus.val.is_empty() {
        carve_validation(&corpus.train, train_cfg.val_fraction, train_cfg.seed)
    } else {
        (corpus.train.iter().collect(), corpus.val.iter().collect())
    };
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    check_labels(corpus, &train, model_cfg.num_classes)?;

    let train_raw = featurize_all(&train.iter().map(|s| &s.graph).collect::<Vec<_>>());
    let val_raw = featurize_all(&val.iter().map(|s| &s.graph).collect::<Vec<_>>());
    let stats = fit_standardizer(&train_raw)?;
    let train_set = Prepared::new(&train, &stats, train_raw);
    let val_set = Prepared::new(&val, &stats, val_raw);

    let mut params = ModelParams::init(model_cfg)?;
    let mut adam = AdamState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 0..train_cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (batch_no, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let loss = train_step(
                &train_set,
                chunk,
                model_cfg,
                &mut params,
                &mut adam,
                train_cfg.lr,
            )
            .map_err(|e| match e {
                TrainError::Tensor(source) | TrainError::Model(ModelError::Tensor(source)) => {
                    TrainError::NonFinite {
                        epoch,
                        batch: batch_no,
                        source,
                    }
                }
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
        }
        let val_report = evaluate_prepared(model_cfg, &params, &val_set, train_cfg.batch_size)?;
        let val_metric = train_cfg.selection_metric.score(&val_report);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_metric,
            wall_clock: started.elapsed(),
        };
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(score, _)| val_metric > *score) {
            best = Some((val_metric, params.clone()));
            history.best_epoch = epoch;
        }
    }

    let (_, params) = best.expect("at least one epoch ran");
    Ok((
        TrainedModel {
            config: model_cfg.clone(),
            params,
            stats,
            class_names: corpus.class_names.clone(),
        },
        history,
    ))
}

fn train_step(
    data: &Prepared<'_>,
    chunk: &[usize],
    config: &ModelConfig,
    params: &mut ModelParams,
    adam: &mut AdamState,
    lr: f64,
) -> Result<f64, TrainError> {
    let batch = batch_graphs(chunk.iter().map(|&i| (data.graphs[i], data.labels[i])))?;
    let features = Matrix::vstack(chunk.iter().map(|&i| &data.features[i]))?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let x = tape.constant(features);
    let out = model_forward(&mut tape, &batch, x, &vars, config)?;
    let loss = tape.softmax_cross_entropy(out.logits, batch.labels())?;
    let loss_value = f64::from(tape.value(loss).get(0, 0));
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Matrix> = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| {
            grads
                .take(v)
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite("gradient").into());
    }
    adam.step(params.tensors_mut(), &grads, lr)?;
    Ok(loss_value)
}

/// Logits and graph embeddings for prepared graphs, batched and computed in
/// parallel with read-only parameters.
fn forward_prepared(
    config: &ModelConfig,
    params: &ModelParams,
    graphs: &[&DirectedGraph],
    features: &[Matrix],
    batch_size: usize,
) -> Result<(Matrix, Matrix), TrainError> {
    let idx: Vec<usize> = (0..graphs.len()).collect();
    let parts = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<(Matrix, Matrix), TrainError> {
            let batch = batch_graphs(chunk.iter().map(|&i| (graphs[i], 0)))?;
            let x = Matrix::vstack(chunk.iter().map(|&i| &features[i]))?;
            Ok(infer(config, params, &batch, x)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let logits = Matrix::vstack(parts.iter().map(|p| &p.0))?;
    let embeddings = Matrix::vstack(parts.iter().map(|p| &p.1))?;
    Ok((logits, embeddings))
}

fn evaluate_prepared(
    config: &ModelConfig,
    params: &ModelParams,
    data: &Prepared<'_>,
    batch_size: usize,
) -> Result<MetricsReport, TrainError> {
    let (logits, _) = forward_prepared(config, params, &data.graphs, &data.features, batch_size)?;
    let predicted: Vec<usize> = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
    Ok(compute_metrics(
        &data.labels,
        &predicted,
        config.num_classes,
    )?)
}

impl TrainedModel {
    fn standardized(&self, graphs: &[&DirectedGraph]) -> Vec<Matrix> {
        featurize_all(graphs)
            .iter()
            .map(|f| apply_standardizer(f, &self.stats))
            .collect()
    }

    /// `(logits, graph_embeddings)` with one row per input graph.
    pub fn forward(&self, graphs: &[&DirectedGraph]) -> Result<(Matrix, Matrix), TrainError> {
        if graphs.is_empty() {
            return Err(TrainError::EmptySplit("input"));
        }
        let features = self.standardized(graphs);
        forward_prepared(
            &self.config,
            &self.params,
            graphs,
            &features,
            DEFAULT_BATCH_SIZE,
        )
    }

    /// Arg-max class per graph, ties to the lowest class id.
    pub fn predict_labels(&self, graphs: &[&DirectedGraph]) -> Result<Vec<usize>, TrainError> {
        let (logits, _) = self.forward(graphs)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

pub fn evaluate(model: &TrainedModel, samples: &[Sample]) -> Result<MetricsReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let graphs: Vec<&DirectedGraph> = samples.iter().map(|s| &s.graph).collect();
    let predicted = model.predict_labels(&graphs)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(compute_metrics(
        &truth,
        &predicted,
        model.config.num_classes,
    )?)
}

pub fn predict(model: &TrainedModel, g: &DirectedGraph) -> Result<Prediction, TrainError> {
    let raw = build_feature_matrix(g);
    let batch = batch_graphs([(g, 0)])?;
    let (logits, embeddings) = infer(
        &model.config,
        &model.params,
        &batch,
        apply_standardizer(&raw, &model.stats),
    )?;
    let probabilities = softmax(logits.row(0));
    Ok(Prediction {
        class_id: argmax(logits.row(0)),
        probabilities,
        embedding: embeddings.row(0).to_vec(),
    })
}
