use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use fcggnn::dataio::{load_split, Split};
use fcggnn::gnn::{DEFAULT_HIDDEN, DEFAULT_LAYERS, HEAD_UNITS};
use fcggnn::train::{SelectionMetric, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, STANDARD_LEARNING_RATES};
use fcggnn::{
    build_feature_matrix, configure_workers, evaluate, export_embeddings, fit_with_progress,
    load_corpus, load_graph, load_model, open_dataset, predict, save_model, LayerKind, ModelConfig,
    TrainConfig, FEATURE_DIM,
};

#[derive(Parser)]
#[command(
    name = "fcggnn",
    version,
    about = "Classify function-call graphs with GNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    #[value(name = "gcn-jk")]
    Gcn,
    #[value(name = "sage-jk")]
    Sage,
    #[value(name = "gin-jk")]
    Gin,
}

impl From<ModelKind> for LayerKind {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Gcn => LayerKind::Gcn,
            ModelKind::Sage => LayerKind::Sage,
            ModelKind::Gin => LayerKind::Gin,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Selection {
    WeightedF1,
    Accuracy,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Print the raw per-node features of one edge list.
    Featurize {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Train a model and write its container.
    Train {
        /// Dataset directory (<split>/<class>/<file>.edgelist) or manifest CSV.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "sage-jk")]
        model: ModelKind,
        #[arg(long, default_value_t = DEFAULT_LAYERS)]
        layers: usize,
        #[arg(long, default_value_t = DEFAULT_HIDDEN)]
        hidden: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        /// Accept learning rates outside 0.001 and 0.0001.
        #[arg(long)]
        allow_any_lr: bool,
        #[arg(long, default_value_t = DEFAULT_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Validation metric used to pick the checkpoint.
        #[arg(long, value_enum, default_value = "weighted-f1")]
        select_by: Selection,
        #[arg(long, default_value = "model.bin")]
        out: PathBuf,
    },
    /// Score a trained model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Classify a single edge list.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: PathBuf,
    },
    /// Write whole-graph embeddings for every graph in a dataset as TSV.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Train {
        lr, allow_any_lr, ..
    } = cli.command
    {
        let valid = lr.is_finite() && lr >= 0.0;
        if !valid || (!allow_any_lr && !STANDARD_LEARNING_RATES.contains(&lr)) {
            Cli::command()
                .error(
                    ErrorKind::ValueValidation,
                    format!("--lr {lr}: must be 0.001 or 0.0001 (pass --allow-any-lr for other non-negative values)"),
                )
                .exit();
        }
    }
    configure_workers(None);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Featurize { graph } => featurize(&graph),
        Command::Train {
            data,
            model,
            layers,
            hidden,
            lr,
            epochs,
            batch_size,
            seed,
            select_by,
            out,
            ..
        } => {
            let manifest = open_dataset(&data)?;
            let corpus = load_corpus(&manifest)?;
            let model_cfg = ModelConfig {
                num_layers: layers,
                hidden,
                head_units: HEAD_UNITS,
                seed,
                ..ModelConfig::new(model.into(), corpus.class_names.len())
            };
            let train_cfg = TrainConfig {
                lr,
                epochs,
                batch_size,
                seed,
                selection_metric: match select_by {
                    Selection::WeightedF1 => SelectionMetric::WeightedF1,
                    Selection::Accuracy => SelectionMetric::Accuracy,
                },
                ..TrainConfig::default()
            };
            let metric = match select_by {
                Selection::WeightedF1 => "val_weighted_f1",
                Selection::Accuracy => "val_accuracy",
            };
            let started = Instant::now();
            let (trained, history) = fit_with_progress(&corpus, &model_cfg, &train_cfg, |rec| {
                println!(
                    "epoch {}\tloss {:.6}\t{metric} {:.6}",
                    rec.epoch, rec.train_loss, rec.val_metric
                );
            })?;
            println!("best epoch {}", history.best_epoch);
            save_model(&trained, &out)?;
            println!("wrote {}", out.display());
            eprintln!("trained in {:.2}s", started.elapsed().as_secs_f64());
            Ok(())
        }
        Command::Eval { model, data, split } => {
            let model = load_model(&model)?;
            let manifest = open_dataset(&data)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let samples = load_split(&manifest, split, &model.class_names)?;
            anyhow::ensure!(!samples.is_empty(), "the {} split is empty", split.as_str());
            let report = evaluate(&model, &samples)?;
            print!("{}", report.table(Some(&model.class_names)));
            print!("{}", report.machine_block());
            Ok(())
        }
        Command::Predict { model, graph } => {
            let model = load_model(&model)?;
            let g = load_graph(&graph)?;
            let p = predict(&model, &g)?;
            println!("{}", model.class_names[p.class_id]);
            for (name, prob) in model.class_names.iter().zip(&p.probabilities) {
                println!("{name}\t{prob:.6}");
            }
            Ok(())
        }
        Command::ExportEmbeddings { model, data, out } => {
            let model = load_model(&model)?;
            let manifest = open_dataset(&data)?;
            let rows = export_embeddings(&model, &manifest, &out)?;
            println!("wrote {rows} embeddings to {}", out.display());
            Ok(())
        }
    }
}

fn featurize(path: &Path) -> Result<()> {
    let g = load_graph(path)?;
    let f = build_feature_matrix(&g);
    let mut out = String::new();
    for v in 0..f.rows() {
        let row: Vec<String> = (0..FEATURE_DIM).map(|c| f.get(v, c).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}
