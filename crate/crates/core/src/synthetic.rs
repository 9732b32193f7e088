//! Small seeded graph generators for tests, benchmarks and smoke runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::DirectedGraph;
use crate::train::{Corpus, Sample};

/// `0 -> 1 -> ... -> n-1 -> 0`.
pub fn directed_cycle(n: usize) -> DirectedGraph {
    assert!(n >= 2, "a cycle needs two nodes");
    DirectedGraph::from_edges(n, (0..n).map(|v| (v, (v + 1) % n))).expect("valid cycle")
}

/// Node 0 calls every other node.
pub fn out_star(n: usize) -> DirectedGraph {
    assert!(n >= 2, "a star needs two nodes");
    DirectedGraph::from_edges(n, (1..n).map(|v| (0, v))).expect("valid star")
}

/// Random recursive tree: node `i` hangs off a uniformly chosen earlier node,
/// edges point away from the root.
pub fn random_tree(n: usize, seed: u64) -> DirectedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DirectedGraph::from_edges(n, (1..n).map(|v| (rng.random_range(0..v), v))).expect("valid tree")
}

/// Each ordered pair `(u, v)` with `u != v` becomes an edge with probability `p`.
pub fn random_digraph<R: Rng>(n: usize, p: f64, rng: &mut R) -> DirectedGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    DirectedGraph::from_edges(n, edges).expect("valid random graph")
}

pub fn random_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

pub fn labeled(id: String, graph: DirectedGraph, label: usize) -> Sample {
    Sample { id, graph, label }
}

pub const SHAPE_CLASSES: [&str; 3] = ["cycle", "star", "tree"];

/// Three-class corpus of directed cycles, out-stars and random trees with
/// node counts in `min_nodes..=max_nodes`, node ids shuffled. Class counts
/// are balanced within each split.
pub fn shape_corpus(
    seed: u64,
    train: usize,
    val: usize,
    test: usize,
    min_nodes: usize,
    max_nodes: usize,
) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |split: &str, count: usize| -> Vec<Sample> {
        (0..count)
            .map(|i| {
                let label = i % 3;
                let n = rng.random_range(min_nodes..=max_nodes);
                let g = match label {
                    0 => directed_cycle(n),
                    1 => out_star(n),
                    _ => random_tree(n, rng.random()),
                };
                let perm = random_permutation(n, &mut rng);
                labeled(
                    format!("{split}/{}/{i}", SHAPE_CLASSES[label]),
                    g.permuted(&perm),
                    label,
                )
            })
            .collect()
    };
    let train = make("train", train);
    let val = make("val", val);
    let test = make("test", test);
    Corpus {
        class_names: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        train,
        val,
        test,
    }
}
