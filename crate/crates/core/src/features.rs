//! Structural node features: PageRank, in/out degree and betweenness.
//!
//! Call graphs carry no node attributes, so each node is described by four
//! centralities computed in 64-bit precision on the directed graph. The model
//! consumes them after standardization with statistics fitted on the training
//! split only.

use std::collections::VecDeque;

use thiserror::Error;

use crate::graph::DirectedGraph;
use crate::tensor::Matrix;

pub const FEATURE_DIM: usize = 4;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] =
    ["pagerank", "in_degree", "out_degree", "betweenness"];

pub const DEFAULT_DAMPING: f64 = 0.85;
pub const DEFAULT_PAGERANK_TOL: f64 = 1e-9;
// 0.85^k drops below 1e-9 only after ~130 steps on periodic graphs.
pub const DEFAULT_PAGERANK_MAX_ITER: usize = 200;
pub const STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("cannot fit standardization statistics on zero nodes")]
    EmptyTrainingPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageRank {
    pub scores: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iter` was hit before the L1 change fell below `tol`.
    pub converged: bool,
}

/// Power iteration from the uniform vector. Mass sitting on nodes without
/// successors is spread uniformly over all nodes each step.
pub fn pagerank(g: &DirectedGraph, alpha: f64, tol: f64, max_iter: usize) -> PageRank {
    assert!(alpha > 0.0 && alpha < 1.0, "damping must lie in (0, 1)");
    assert!(tol > 0.0, "tolerance must be positive");
    let n = g.node_count();
    let inv_n = 1.0 / n as f64;
    let mut rank = vec![inv_n; n];
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        let dangling: f64 = (0..n)
            .filter(|&v| g.out_degree(v) == 0)
            .map(|v| rank[v])
            .sum();
        let base = (1.0 - alpha) * inv_n + alpha * dangling * inv_n;
        for (v, slot) in next.iter_mut().enumerate() {
            let inflow: f64 = g
                .predecessors(v)
                .iter()
                .map(|&u| rank[u] / g.out_degree(u) as f64)
                .sum();
            *slot = base + alpha * inflow;
        }
        let change: f64 = rank.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        if change < tol {
            converged = true;
            break;
        }
    }

    let total: f64 = rank.iter().sum();
    rank.iter_mut().for_each(|r| *r /= total);
    PageRank {
        scores: rank,
        iterations,
        converged,
    }
}

/// `(in_degree, out_degree)` per node.
pub fn degrees(g: &DirectedGraph) -> (Vec<f64>, Vec<f64>) {
    (0..g.node_count())
        .map(|v| (g.in_degree(v) as f64, g.out_degree(v) as f64))
        .unzip()
}

/// Unnormalized directed betweenness via Brandes' accumulation with unit edge
/// lengths. Endpoints are excluded.
pub fn betweenness(g: &DirectedGraph) -> Vec<f64> {
    let n = g.node_count();
    let mut centrality = vec![0.0; n];
    let mut stack = Vec::with_capacity(n);
    let mut queue = VecDeque::with_capacity(n);
    let mut sigma = vec![0.0f64; n];
    let mut dist = vec![usize::MAX; n];
    let mut delta = vec![0.0f64; n];

    for s in 0..n {
        stack.clear();
        sigma.fill(0.0);
        dist.fill(usize::MAX);
        delta.fill(0.0);
        sigma[s] = 1.0;
        dist[s] = 0;
        queue.push_back(s);

        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &w in g.successors(v) {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                }
            }
        }

        // Predecessors on shortest paths are recovered from `dist` instead of
        // being stored per source.
        while let Some(w) = stack.pop() {
            for &v in g.predecessors(w) {
                if dist[v] != usize::MAX && dist[v] + 1 == dist[w] {
                    delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
                }
            }
            if w != s {
                centrality[w] += delta[w];
            }
        }
    }
    centrality
}

/// Raw `N x 4` feature matrix in 64-bit precision, columns ordered as
/// [`FEATURE_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureMatrix {
    rows: usize,
    values: Vec<f64>,
}

impl NodeFeatureMatrix {
    pub fn from_columns(columns: [&[f64]; FEATURE_DIM]) -> Self {
        let rows = columns[0].len();
        assert!(
            columns.iter().all(|c| c.len() == rows),
            "ragged feature columns"
        );
        let values = (0..rows)
            .flat_map(|v| columns.iter().map(move |c| c[v]))
            .collect();
        NodeFeatureMatrix { rows, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.values[v * FEATURE_DIM..(v + 1) * FEATURE_DIM]
    }

    pub fn get(&self, v: usize, c: usize) -> f64 {
        self.values[v * FEATURE_DIM + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|v| self.get(v, c)).collect()
    }
}

pub fn build_feature_matrix(g: &DirectedGraph) -> NodeFeatureMatrix {
    let pr = pagerank(
        g,
        DEFAULT_DAMPING,
        DEFAULT_PAGERANK_TOL,
        DEFAULT_PAGERANK_MAX_ITER,
    );
    let (indeg, outdeg) = degrees(g);
    let bc = betweenness(g);
    NodeFeatureMatrix::from_columns([&pr.scores, &indeg, &outdeg, &bc])
}

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardizationStats {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
    pub epsilon_guard: f64,
}

impl StandardizationStats {
    /// Stats that leave features unchanged.
    pub fn identity() -> Self {
        StandardizationStats {
            mean: [0.0; FEATURE_DIM],
            std: [1.0; FEATURE_DIM],
            epsilon_guard: STD_EPSILON,
        }
    }
}

/// Pools every node of every matrix and fits column statistics.
pub fn fit_standardizer<'a, I>(train: I) -> Result<StandardizationStats, FeatureError>
where
    I: IntoIterator<Item = &'a NodeFeatureMatrix>,
{
    let mut count = 0usize;
    let mut sum = [0.0f64; FEATURE_DIM];
    let mut sum_sq = [0.0f64; FEATURE_DIM];
    let train: Vec<&NodeFeatureMatrix> = train.into_iter().collect();
    for m in &train {
        for v in 0..m.rows() {
            for (c, x) in m.row(v).iter().enumerate() {
                sum[c] += x;
            }
        }
        count += m.rows();
    }
    if count == 0 {
        return Err(FeatureError::EmptyTrainingPool);
    }
    let mean = sum.map(|s| s / count as f64);
    // second pass keeps the variance free of cancellation
    for m in &train {
        for v in 0..m.rows() {
            for (c, x) in m.row(v).iter().enumerate() {
                sum_sq[c] += (x - mean[c]).powi(2);
            }
        }
    }
    let std = sum_sq.map(|s| (s / count as f64).sqrt());
    Ok(StandardizationStats {
        mean,
        std,
        epsilon_guard: STD_EPSILON,
    })
}

/// Standardizes and down-casts to the model's 32-bit input matrix.
pub fn apply_standardizer(f: &NodeFeatureMatrix, stats: &StandardizationStats) -> Matrix {
    let data = f
        .values
        .chunks_exact(FEATURE_DIM)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(c, x)| ((x - stats.mean[c]) / stats.std[c].max(stats.epsilon_guard)) as f32)
        })
        .collect();
    Matrix::from_vec(f.rows(), FEATURE_DIM, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(n: usize, edges: &[(usize, usize)]) -> DirectedGraph {
        DirectedGraph::from_edges(n, edges.iter().copied()).unwrap()
    }

    #[test]
    fn pagerank_single_node() {
        let pr = pagerank(&g(1, &[]), 0.85, 1e-9, 100);
        assert_eq!(pr.scores, vec![1.0]);
        assert!(pr.converged);
    }

    #[test]
    fn pagerank_two_cycle_is_uniform() {
        let pr = pagerank(&g(2, &[(0, 1), (1, 0)]), 0.85, 1e-9, 100);
        assert_eq!(pr.scores, vec![0.5, 0.5]);
    }

    #[test]
    fn pagerank_chain_matches_reference() {
        // dense power iteration on the Google matrix, run to 1e-15
        let expected = [0.18441678192715405, 0.34117104656524233, 0.4744121715076033];
        let pr = pagerank(&g(3, &[(0, 1), (1, 2)]), 0.85, 1e-12, 1000);
        for (a, b) in pr.scores.iter().zip(expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn pagerank_flags_non_convergence() {
        let pr = pagerank(&g(3, &[(0, 1), (1, 2), (2, 0), (0, 2)]), 0.85, 1e-15, 2);
        assert!(!pr.converged);
        assert_eq!(pr.iterations, 2);
        assert!((pr.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degree_examples() {
        assert_eq!(
            degrees(&g(3, &[(0, 1), (0, 2)])),
            (vec![0.0, 1.0, 1.0], vec![2.0, 0.0, 0.0])
        );
        assert_eq!(degrees(&g(1, &[])), (vec![0.0], vec![0.0]));
        assert_eq!(
            degrees(&g(2, &[(0, 1), (1, 0)])),
            (vec![1.0, 1.0], vec![1.0, 1.0])
        );
    }

    #[test]
    fn betweenness_examples() {
        assert_eq!(betweenness(&g(3, &[(0, 1), (1, 2)])), vec![0.0, 1.0, 0.0]);
        assert_eq!(betweenness(&g(4, &[(0, 1), (0, 2), (0, 3)])), vec![0.0; 4]);
        // two shortest 0->3 paths split the credit
        assert_eq!(
            betweenness(&g(4, &[(0, 1), (0, 2), (1, 3), (2, 3)])),
            vec![0.0, 0.5, 0.5, 0.0]
        );
    }

    #[test]
    fn feature_matrix_examples() {
        let single = build_feature_matrix(&g(1, &[]));
        assert_eq!(single.row(0), &[1.0, 0.0, 0.0, 0.0]);
        let cycle = build_feature_matrix(&g(2, &[(0, 1), (1, 0)]));
        assert_eq!(cycle.row(0), &[0.5, 1.0, 1.0, 0.0]);
        assert_eq!(cycle.row(1), &[0.5, 1.0, 1.0, 0.0]);

        let chain = g(3, &[(0, 1), (1, 2)]);
        let f = build_feature_matrix(&chain);
        let pr = pagerank(&chain, 0.85, 1e-9, 100).scores;
        assert_eq!(f.column(0), pr);
        assert_eq!(f.column(1), vec![0.0, 1.0, 1.0]);
        assert_eq!(f.column(2), vec![1.0, 1.0, 0.0]);
        assert_eq!(f.column(3), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn standardizer_examples() {
        let one = NodeFeatureMatrix::from_columns([&[1.0], &[0.0], &[0.0], &[0.0]]);
        let s = fit_standardizer([&one]).unwrap();
        assert_eq!(s.mean, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.std, [0.0; 4]);
        // std 0 falls back to the guard, so constant columns become zero
        let z = apply_standardizer(&one, &s);
        assert_eq!(z.as_slice(), &[0.0; 4]);

        let two =
            NodeFeatureMatrix::from_columns([&[0.25, 0.75], &[1.0, 1.0], &[0.0, 2.0], &[0.0, 0.0]]);
        let s = fit_standardizer([&two]).unwrap();
        assert_eq!(s.mean[0], 0.5);
        assert_eq!(s.std[0], 0.25);

        let stats = StandardizationStats {
            mean: [1.0; 4],
            std: [0.5; 4],
            epsilon_guard: STD_EPSILON,
        };
        let f = NodeFeatureMatrix::from_columns([&[2.0], &[1.0], &[1.0], &[1.0]]);
        assert_eq!(
            apply_standardizer(&f, &stats).as_slice(),
            &[2.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn empty_pool_is_an_error() {
        let none: Vec<&NodeFeatureMatrix> = Vec::new();
        assert_eq!(fit_standardizer(none), Err(FeatureError::EmptyTrainingPool));
    }

    #[test]
    fn pooled_stats_equal_concatenated_stats() {
        let gs = [
            g(3, &[(0, 1), (1, 2)]),
            g(4, &[(0, 1), (0, 2), (0, 3), (3, 1)]),
            g(2, &[(1, 0)]),
        ];
        let feats: Vec<_> = gs.iter().map(build_feature_matrix).collect();
        let pooled = fit_standardizer(&feats).unwrap();

        // oracle: stack rows and use textbook formulas per column
        for c in 0..FEATURE_DIM {
            let col: Vec<f64> = feats.iter().flat_map(|f| f.column(c)).collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            assert!((pooled.mean[c] - mean).abs() < 1e-12);
            assert!((pooled.std[c] - var.sqrt()).abs() < 1e-12);
        }
    }

    fn arb_graph() -> impl Strategy<Value = DirectedGraph> {
        (1usize..10).prop_flat_map(|n| {
            proptest::collection::vec((0..n, 0..n), 0..30)
                .prop_map(move |e| DirectedGraph::from_edges(n, e).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pagerank_is_a_distribution(g in arb_graph()) {
            let pr = pagerank(&g, 0.85, 1e-9, 100);
            prop_assert!((pr.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(pr.scores.iter().all(|&x| x > 0.0 && x <= 1.0));
        }

        #[test]
        fn features_are_permutation_equivariant(
            (g, perm) in arb_graph().prop_flat_map(|g| {
                let n = g.node_count();
                (Just(g), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
            })
        ) {
            let f = build_feature_matrix(&g);
            let fp = build_feature_matrix(&g.permuted(&perm));
            for v in 0..g.node_count() {
                for c in 0..FEATURE_DIM {
                    prop_assert!((f.get(v, c) - fp.get(perm[v], c)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn standardized_pool_has_zero_mean_unit_std(gs in proptest::collection::vec(arb_graph(), 1..6)) {
            let feats: Vec<_> = gs.iter().map(build_feature_matrix).collect();
            let stats = fit_standardizer(&feats).unwrap();
            let z: Vec<Matrix> = feats.iter().map(|f| apply_standardizer(f, &stats)).collect();
            for c in 0..FEATURE_DIM {
                if stats.std[c] < 1e-6 {
                    continue;
                }
                let col: Vec<f64> = z
                    .iter()
                    .flat_map(|m| (0..m.rows()).map(move |v| f64::from(m.get(v, c))))
                    .collect();
                let n = col.len() as f64;
                let mean = col.iter().sum::<f64>() / n;
                let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-6, "mean {mean}");
                prop_assert!((std - 1.0).abs() < 1e-6, "std {std}");
            }
        }
    }
}
