//! Directed function-call graphs and mini-batches of them.
//!
//! A [`DirectedGraph`] stores its edges three ways: successor lists,
//! predecessor lists, and the symmetrized neighbor lists that message passing
//! runs on. Centralities are computed from the directed views.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("line {line}: expected two non-negative integers, got {content:?}")]
    Parse { line: usize, content: String },
    #[error("edge list contains no nodes")]
    Empty,
    #[error("edge ({src}, {dst}) references a node outside 0..{node_count}")]
    NodeOutOfRange {
        src: usize,
        dst: usize,
        node_count: usize,
    },
    #[error("cannot batch an empty list of graphs")]
    EmptyBatch,
}

/// Compressed sparse row adjacency: the neighbors of `v` are
/// `indices[offsets[v]..offsets[v + 1]]`, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Csr {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Csr {
    /// Builds from `(row, col)` pairs that are already sorted and deduplicated.
    fn from_sorted_pairs(rows: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut offsets = vec![0usize; rows + 1];
        let mut indices = Vec::new();
        for (r, c) in pairs {
            offsets[r + 1] += 1;
            indices.push(c);
        }
        for i in 0..rows {
            offsets[i + 1] += offsets[i];
        }
        Csr { offsets, indices }
    }

    /// Builds from arbitrary per-row lists, sorting and deduplicating each.
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for list in lists {
            let mut row = list.clone();
            row.sort_unstable();
            row.dedup();
            indices.extend(row);
            offsets.push(indices.len());
        }
        Csr { offsets, indices }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, v: usize) -> &[usize] {
        &self.indices[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Immutable directed graph over nodes `0..node_count` with no self-loops and
/// no parallel edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    csr_out: Csr,
    csr_in: Csr,
    sym: Csr,
}

impl DirectedGraph {
    /// Builds a graph from raw edges. Self-loops are dropped and duplicates
    /// collapsed; endpoints must lie in `0..node_count`.
    pub fn from_edges(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::Empty);
        }
        let mut set = BTreeSet::new();
        for (src, dst) in edges {
            if src >= node_count || dst >= node_count {
                return Err(GraphError::NodeOutOfRange {
                    src,
                    dst,
                    node_count,
                });
            }
            if src != dst {
                set.insert((src, dst));
            }
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();

        let csr_out = Csr::from_sorted_pairs(node_count, edges.iter().copied());
        let mut reversed: Vec<(usize, usize)> = edges.iter().map(|&(s, d)| (d, s)).collect();
        reversed.sort_unstable();
        let csr_in = Csr::from_sorted_pairs(node_count, reversed);
        let sym = symmetrize_parts(&csr_out, &csr_in);

        Ok(DirectedGraph {
            node_count,
            edges,
            csr_out,
            csr_in,
            sym,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges in lexicographic `(src, dst)` order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn successors(&self, v: usize) -> &[usize] {
        self.csr_out.row(v)
    }

    pub fn predecessors(&self, v: usize) -> &[usize] {
        self.csr_in.row(v)
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.csr_out.degree(v)
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.csr_in.degree(v)
    }

    pub fn csr_out(&self) -> &Csr {
        &self.csr_out
    }

    pub fn csr_in(&self) -> &Csr {
        &self.csr_in
    }

    /// Undirected neighbor lists used for message passing.
    pub fn sym_neighbors(&self) -> &Csr {
        &self.sym
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> DirectedGraph {
        assert_eq!(perm.len(), self.node_count, "permutation length");
        DirectedGraph::from_edges(
            self.node_count,
            self.edges.iter().map(|&(s, d)| (perm[s], perm[d])),
        )
        .expect("permutation of a valid graph is valid")
    }

    /// Serializes to edge-list text that [`load_edge_list`] reads back into an
    /// identical graph. Isolated nodes are written as self-loops, which the
    /// loader drops while still registering the node id.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        let mut touched = vec![false; self.node_count];
        for &(s, d) in &self.edges {
            touched[s] = true;
            touched[d] = true;
        }
        for (v, _) in touched.iter().enumerate().filter(|(_, t)| !**t) {
            let _ = writeln!(out, "{v} {v}");
        }
        for &(s, d) in &self.edges {
            let _ = writeln!(out, "{s} {d}");
        }
        out
    }
}

fn symmetrize_parts(out: &Csr, inc: &Csr) -> Csr {
    let n = out.rows();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(out.nnz() * 2);
    offsets.push(0);
    for v in 0..n {
        // merge of two sorted lists
        let (a, b) = (out.row(v), inc.row(v));
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let next = match (a.get(i), b.get(j)) {
                (Some(&x), Some(&y)) if x == y => {
                    i += 1;
                    j += 1;
                    x
                }
                (Some(&x), Some(&y)) if x < y => {
                    i += 1;
                    x
                }
                (Some(_), Some(&y)) => {
                    j += 1;
                    y
                }
                (Some(&x), None) => {
                    i += 1;
                    x
                }
                (None, Some(&y)) => {
                    j += 1;
                    y
                }
                (None, None) => unreachable!(),
            };
            indices.push(next);
        }
        offsets.push(indices.len());
    }
    Csr { offsets, indices }
}

/// Per-node sorted union of predecessors and successors.
pub fn symmetrize(g: &DirectedGraph) -> Csr {
    symmetrize_parts(g.csr_out(), g.csr_in())
}

/// Parses a whitespace-separated edge list. Lines starting with `#` and blank
/// lines are skipped. Node ids are compacted to `0..N` preserving their numeric
/// order; ids seen only in self-loops still count as nodes.
pub fn load_edge_list(text: &str) -> Result<DirectedGraph, GraphError> {
    let mut raw = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = || GraphError::Parse {
            line: idx + 1,
            content: line.to_string(),
        };
        let mut fields = trimmed.split_whitespace();
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err());
        };
        let src: u64 = a.parse().map_err(|_| parse_err())?;
        let dst: u64 = b.parse().map_err(|_| parse_err())?;
        raw.push((src, dst));
    }

    let mut ids: Vec<u64> = raw.iter().flat_map(|&(s, d)| [s, d]).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(GraphError::Empty);
    }
    let compact = |id: u64| ids.binary_search(&id).expect("id was collected");
    DirectedGraph::from_edges(
        ids.len(),
        raw.iter().map(|&(s, d)| (compact(s), compact(d))),
    )
}

/// Several graphs merged block-diagonally into one, with a node-to-graph map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphBatch {
    merged: DirectedGraph,
    segment_ids: Vec<usize>,
    node_offsets: Vec<usize>,
    labels: Vec<usize>,
}

impl GraphBatch {
    pub fn merged(&self) -> &DirectedGraph {
        &self.merged
    }

    pub fn segment_ids(&self) -> &[usize] {
        &self.segment_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn graph_count(&self) -> usize {
        self.labels.len()
    }

    /// Node range of graph `k` inside the merged graph.
    pub fn node_range(&self, k: usize) -> std::ops::Range<usize> {
        self.node_offsets[k]..self.node_offsets[k + 1]
    }

    /// Recovers graph `k` with its original (unshifted) node ids.
    pub fn extract(&self, k: usize) -> DirectedGraph {
        let range = self.node_range(k);
        let base = range.start;
        let edges = range
            .clone()
            .flat_map(|v| {
                self.merged
                    .successors(v)
                    .iter()
                    .map(move |&d| (v - base, d - base))
            })
            .collect::<Vec<_>>();
        DirectedGraph::from_edges(range.len(), edges).expect("segment of a valid batch")
    }
}

/// Merges graphs block-diagonally. Graph `k`'s node ids are shifted by the
/// total node count of the graphs before it.
pub fn batch_graphs<'a, I>(graphs: I) -> Result<GraphBatch, GraphError>
where
    I: IntoIterator<Item = (&'a DirectedGraph, usize)>,
{
    let mut edges = Vec::new();
    let mut segment_ids = Vec::new();
    let mut node_offsets = vec![0];
    let mut labels = Vec::new();
    for (k, (g, label)) in graphs.into_iter().enumerate() {
        let base = *node_offsets.last().unwrap();
        edges.extend(g.edges().iter().map(|&(s, d)| (s + base, d + base)));
        segment_ids.extend(std::iter::repeat_n(k, g.node_count()));
        node_offsets.push(base + g.node_count());
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(GraphError::EmptyBatch);
    }
    let merged = DirectedGraph::from_edges(*node_offsets.last().unwrap(), edges)?;
    Ok(GraphBatch {
        merged,
        segment_ids,
        node_offsets,
        labels,
    })
}
