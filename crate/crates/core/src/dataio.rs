//! Corpus manifests, directory scanning, the binary model container and
//! embedding export.
//!
//! Manifest: a CSV file with header `path,label,split`, one edge-list file per
//! row, relative paths resolved against the manifest's directory.
//!
//! Model container, little-endian throughout:
//!
//! ```text
//! "FCGGNN" | version u8 (=1) | section* ; section = len u64 | payload
//!   config:  kind u8, layers u32, hidden u32, head u32, classes u32,
//!            input_dim u32, gin_epsilon f64, seed u64
//!   classes: count u32, (len u32, utf-8 bytes)*
//!   stats:   mean f64 x4, std f64 x4, epsilon_guard f64
//!   params:  count u32, (rows u32, cols u32, f32 x rows*cols)*
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;
use walkdir::WalkDir;

use crate::features::{StandardizationStats, FEATURE_DIM};
use crate::gnn::{LayerKind, ModelConfig, ModelError, ModelParams};
use crate::graph::{load_edge_list, DirectedGraph, GraphError};
use crate::tensor::Matrix;
use crate::train::{Corpus, Sample, TrainError, TrainedModel};

pub const MANIFEST_HEADER: &str = "path,label,split";
pub const EDGE_LIST_EXTENSION: &str = "edgelist";
pub const MODEL_MAGIC: &[u8; 6] = b"FCGGNN";
pub const MODEL_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest header must be {MANIFEST_HEADER:?}, found {0:?}")]
    ManifestHeader(String),
    #[error("manifest line {line}: expected path,label,split; got {content:?}")]
    ManifestRow { line: usize, content: String },
    #[error("manifest line {line}: unknown split {token:?} (expected train, val or test)")]
    UnknownSplit { line: usize, token: String },
    #[error("duplicate manifest path {0}")]
    DuplicatePath(String),
    #[error("edge-list file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("no .edgelist files under {0}")]
    NoEdgeLists(PathBuf),
    #[error("files outside the <split>/<class>/<file>.edgelist layout: {}", .0.join(", "))]
    MixedLayout(Vec<String>),
    #[error("{path}: {source}")]
    Graph { path: PathBuf, source: GraphError },
    #[error("class {0:?} is unknown to the model")]
    UnknownClass(String),
    #[error("bad magic: not a model container")]
    BadMagic,
    #[error("unsupported model container version {0}")]
    UnsupportedVersion(u8),
    #[error("model container truncated in {0}")]
    Truncated(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("malformed model container: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest (or relative to a scanned root).
    pub id: String,
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Sorted; a class's id is its index here.
    pub class_names: Vec<String>,
}

impl CorpusManifest {
    fn new(entries: Vec<ManifestEntry>) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.path.clone()) {
                return Err(DataError::DuplicatePath(e.id.clone()));
            }
        }
        for required in [Split::Train, Split::Test] {
            if !entries.iter().any(|e| e.split == required) {
                return Err(DataError::EmptySplit(required.as_str()));
            }
        }
        let class_names: BTreeSet<String> = entries.iter().map(|e| e.label.clone()).collect();
        Ok(CorpusManifest {
            entries,
            class_names: class_names.into_iter().collect(),
        })
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names
            .binary_search_by(|c| c.as_str().cmp(name))
            .ok()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Manifest text with resolved paths.
    pub fn to_csv(&self) -> String {
        let write = || -> Result<Vec<u8>, Box<dyn std::error::Error>> {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(MANIFEST_HEADER.split(','))?;
            for e in &self.entries {
                w.write_record([
                    e.path.to_string_lossy().as_ref(),
                    &e.label,
                    e.split.as_str(),
                ])?;
            }
            Ok(w.into_inner()?)
        };
        let bytes = write().expect("writing to memory cannot fail");
        String::from_utf8(bytes).expect("manifest fields are UTF-8")
    }
}

/// Parses manifest text without touching the file system.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<CorpusManifest, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map(|h| h.iter().collect::<Vec<_>>().join(","))
        .unwrap_or_default();
    if header != MANIFEST_HEADER {
        return Err(DataError::ManifestHeader(header));
    }
    let mut entries = Vec::new();
    for record in reader.records() {
        let bad_row = |line: usize, content: String| DataError::ManifestRow { line, content };
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            bad_row(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let fields: Vec<&str> = record.iter().collect();
        let [path, label, split] = fields[..] else {
            return Err(bad_row(line, fields.join(",")));
        };
        if path.is_empty() || label.is_empty() {
            return Err(bad_row(line, fields.join(",")));
        }
        let split = Split::parse(split).ok_or_else(|| DataError::UnknownSplit {
            line,
            token: split.to_string(),
        })?;
        entries.push(ManifestEntry {
            id: path.to_string(),
            path: base_dir.join(path),
            label: label.to_string(),
            split,
        });
    }
    CorpusManifest::new(entries)
}

/// Reads and validates a manifest; every listed file must exist.
pub fn read_manifest(path: &Path) -> Result<CorpusManifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(&text, base)?;
    if let Some(missing) = manifest.entries.iter().find(|e| !e.path.is_file()) {
        return Err(DataError::MissingFile(missing.path.clone()));
    }
    Ok(manifest)
}

/// Builds a manifest from `root/<split>/<class>/<file>.edgelist`.
pub fn scan_directory(root: &Path) -> Result<CorpusManifest, DataError> {
    let mut entries = Vec::new();
    let mut offending = Vec::new();
    for item in WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| DataError::Io {
            path: e.path().unwrap_or(root).to_path_buf(),
            source: e.into(),
        })?;
        let path = item.path();
        if !item.file_type().is_file()
            || path.extension().and_then(|e| e.to_str()) != Some(EDGE_LIST_EXTENSION)
        {
            continue;
        }
        let rel = path.strip_prefix(root).expect("walkdir stays under root");
        let parts: Vec<&str> = rel.iter().filter_map(|p| p.to_str()).collect();
        match parts[..] {
            [split, class, _file] if Split::parse(split).is_some() => entries.push(ManifestEntry {
                id: parts.join("/"),
                path: path.to_path_buf(),
                label: class.to_string(),
                split: Split::parse(split).expect("checked above"),
            }),
            _ => offending.push(rel.display().to_string()),
        }
    }
    if !offending.is_empty() {
        return Err(DataError::MixedLayout(offending));
    }
    if entries.is_empty() {
        return Err(DataError::NoEdgeLists(root.to_path_buf()));
    }
    CorpusManifest::new(entries)
}

/// A directory is scanned, anything else is read as a manifest file.
pub fn open_dataset(path: &Path) -> Result<CorpusManifest, DataError> {
    if path.is_dir() {
        scan_directory(path)
    } else {
        read_manifest(path)
    }
}

pub fn load_graph(path: &Path) -> Result<DirectedGraph, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    load_edge_list(&text).map_err(|source| DataError::Graph {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every graph of `split`, labelling by position in `class_names`.
pub fn load_split(
    manifest: &CorpusManifest,
    split: Split,
    class_names: &[String],
) -> Result<Vec<Sample>, DataError> {
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let label = class_names
                .iter()
                .position(|c| c == &e.label)
                .ok_or_else(|| DataError::UnknownClass(e.label.clone()))?;
            Ok(Sample {
                id: e.id.clone(),
                graph: load_graph(&e.path)?,
                label,
            })
        })
        .collect()
}

pub fn load_corpus(manifest: &CorpusManifest) -> Result<Corpus, DataError> {
    let names = &manifest.class_names;
    Ok(Corpus {
        class_names: names.clone(),
        train: load_split(manifest, Split::Train, names)?,
        val: load_split(manifest, Split::Val, names)?,
        test: load_split(manifest, Split::Test, names)?,
    })
}

fn put_section(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn encode_model(model: &TrainedModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);

    let mut config = vec![cfg.layer_kind.code()];
    for v in [
        cfg.num_layers,
        cfg.hidden,
        cfg.head_units,
        cfg.num_classes,
        cfg.input_dim,
    ] {
        config.extend_from_slice(&(v as u32).to_le_bytes());
    }
    config.extend_from_slice(&cfg.gin_epsilon.to_le_bytes());
    config.extend_from_slice(&cfg.seed.to_le_bytes());
    put_section(&mut out, &config);

    let mut names = (model.class_names.len() as u32).to_le_bytes().to_vec();
    for name in &model.class_names {
        names.extend_from_slice(&(name.len() as u32).to_le_bytes());
        names.extend_from_slice(name.as_bytes());
    }
    put_section(&mut out, &names);

    let stats = &model.stats;
    let stats_bytes: Vec<u8> = stats
        .mean
        .iter()
        .chain(&stats.std)
        .chain([&stats.epsilon_guard])
        .flat_map(|v| v.to_le_bytes())
        .collect();
    put_section(&mut out, &stats_bytes);

    let tensors = model.params.tensors();
    let mut params = (tensors.len() as u32).to_le_bytes().to_vec();
    for t in tensors {
        params.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        params.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.as_slice() {
            params.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_section(&mut out, &params);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    context: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.bytes.len() < n {
            return Err(DataError::Truncated(self.context));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// Next length-prefixed section. A section cut short by the end of the
    /// file is returned as far as it goes.
    fn section(&mut self, context: &'static str) -> Result<Reader<'a>, DataError> {
        self.context = context;
        let len = self.u64()? as usize;
        let available = len.min(self.bytes.len());
        let body = self.take(available)?;
        Ok(Reader {
            bytes: body,
            context,
        })
    }

    fn finish(&self) -> Result<(), DataError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(DataError::Malformed(format!(
                "{} trailing bytes in {}",
                self.bytes.len(),
                self.context
            )))
        }
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel, DataError> {
    if bytes.len() < MODEL_MAGIC.len() || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(DataError::BadMagic);
    }
    let mut r = Reader {
        bytes: &bytes[MODEL_MAGIC.len()..],
        context: "header",
    };
    let version = r.u8()?;
    if version != MODEL_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }

    let mut s = r.section("config")?;
    let kind = s.u8()?;
    let layer_kind = LayerKind::from_code(kind)
        .ok_or_else(|| DataError::Malformed(format!("layer kind code {kind}")))?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = s.u32()? as usize;
    }
    let config = ModelConfig {
        layer_kind,
        num_layers: dims[0],
        hidden: dims[1],
        head_units: dims[2],
        num_classes: dims[3],
        input_dim: dims[4],
        gin_epsilon: s.f64()?,
        seed: s.u64()?,
    };
    s.finish()?;
    config.validate()?;
    if config.input_dim != FEATURE_DIM {
        return Err(DataError::Dimension(format!(
            "input_dim {} (expected {FEATURE_DIM})",
            config.input_dim
        )));
    }

    let mut s = r.section("class names")?;
    let count = s.u32()? as usize;
    let mut class_names = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = s.u32()? as usize;
        let raw = s.take(len)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| DataError::Malformed("class name is not UTF-8".into()))?;
        class_names.push(name.to_string());
    }
    s.finish()?;
    if class_names.len() != config.num_classes {
        return Err(DataError::Dimension(format!(
            "{} class names for {} classes",
            class_names.len(),
            config.num_classes
        )));
    }

    let mut s = r.section("stats")?;
    let mut vals = [0.0f64; 2 * FEATURE_DIM + 1];
    for v in &mut vals {
        *v = s.f64()?;
    }
    s.finish()?;
    let stats = StandardizationStats {
        mean: vals[..FEATURE_DIM].try_into().expect("4 means"),
        std: vals[FEATURE_DIM..2 * FEATURE_DIM]
            .try_into()
            .expect("4 stds"),
        epsilon_guard: vals[2 * FEATURE_DIM],
    };

    let mut s = r.section("parameters")?;
    let expected = config.param_shapes();
    let count = s.u32()? as usize;
    if count != expected.len() {
        return Err(DataError::Dimension(format!(
            "{count} parameter tensors, expected {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (index, &(rows, cols)) in expected.iter().enumerate() {
        let declared = (s.u32()? as usize, s.u32()? as usize);
        if declared != (rows, cols) {
            return Err(DataError::Dimension(format!(
                "parameter {index} declared {declared:?}, config implies {:?}",
                (rows, cols)
            )));
        }
        let needed = rows * cols * 4;
        if s.bytes.len() < needed {
            return Err(DataError::Dimension(format!(
                "parameter {index} declares {rows}x{cols} values but only {} bytes remain",
                s.bytes.len()
            )));
        }
        let data = s
            .take(needed)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Matrix::from_vec(rows, cols, data));
    }
    s.finish()?;
    r.context = "file";
    r.finish()?;

    let params = ModelParams::from_tensors(&config, tensors)?;
    Ok(TrainedModel {
        config,
        params,
        stats,
        class_names,
    })
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<(), DataError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(&encode_model(model)).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_model(&bytes)
}

/// `%.9g`-style formatting: nine significant digits, '.' decimal separator.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-5..9).contains(&exp) {
        format!("{}e{exp}", trim(mantissa))
    } else {
        trim(&format!("{x:.prec$}", prec = (8 - exp) as usize))
    }
}

/// One TSV row per entry: id, class, split, then the graph embedding.
pub fn write_embeddings<W: Write>(
    model: &TrainedModel,
    entries: &[&ManifestEntry],
    graphs: &[&DirectedGraph],
    mut out: W,
) -> Result<(), DataError> {
    let hidden = model.config.hidden;
    let mut header = String::from("graph_id\tclass\tsplit");
    for i in 0..hidden {
        let _ = write!(header, "\temb_{i}");
    }
    let wrap = |e: io::Error| DataError::Io {
        path: PathBuf::from("<embeddings>"),
        source: e,
    };
    writeln!(out, "{header}").map_err(wrap)?;
    if graphs.is_empty() {
        return Ok(());
    }
    let (_, embeddings) = model.forward(graphs)?;
    for (i, e) in entries.iter().enumerate() {
        let mut line = format!("{}\t{}\t{}", e.id, e.label, e.split.as_str());
        for &v in embeddings.row(i) {
            line.push('\t');
            line.push_str(&format_sig9(f64::from(v)));
        }
        writeln!(out, "{line}").map_err(wrap)?;
    }
    Ok(())
}

pub fn export_embeddings(
    model: &TrainedModel,
    manifest: &CorpusManifest,
    out_path: &Path,
) -> Result<usize, DataError> {
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    let graphs = entries
        .par_iter()
        .map(|e| load_graph(&e.path))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&DirectedGraph> = graphs.iter().collect();
    let file = fs::File::create(out_path).map_err(io_err(out_path))?;
    let mut writer = io::BufWriter::new(file);
    write_embeddings(model, &entries, &refs, &mut writer)?;
    writer.flush().map_err(io_err(out_path))?;
    Ok(entries.len())
}
