//! Per-node structural features used for the embedding.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::IndexedGraph;
use crate::metrics::local_clustering;

pub const FEATURE_NAMES: [&str; 6] = [
    "degree_centrality",
    "betweenness_centrality",
    "eigenvector_centrality",
    "pagerank",
    "local_clustering",
    "tvl",
];

const PAGERANK_DAMPING: f64 = 0.85;
const POWER_TOLERANCE: f64 = 1e-8;
const POWER_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub ids: Vec<String>,
    /// One row per node, columns in `FEATURE_NAMES` order.
    pub raw: Vec<[f64; 6]>,
    /// Column-wise z-scores; TVL is log1p-transformed first.
    pub standardized: Vec<Vec<f64>>,
}

pub fn node_features(g: &IndexedGraph) -> Result<NodeFeatures> {
    let n = g.n();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let degree: Vec<f64> = (0..n)
        .map(|i| {
            if n > 1 {
                g.total_degree(i) as f64 / (n - 1) as f64
            } else {
                0.0
            }
        })
        .collect();
    let betweenness = betweenness(g);
    let eigen = eigenvector_centrality(g);
    let pr = pagerank(g);
    let clustering = local_clustering(g);

    let raw: Vec<[f64; 6]> = (0..n)
        .map(|i| {
            [
                degree[i],
                betweenness[i],
                eigen[i],
                pr[i],
                clustering[i],
                g.node_weights[i],
            ]
        })
        .collect();

    let mut columns: Vec<Vec<f64>> = (0..6).map(|c| raw.iter().map(|r| r[c]).collect()).collect();
    for v in columns[5].iter_mut() {
        *v = v.max(0.0).ln_1p();
    }
    for col in &mut columns {
        zscore(col);
    }
    let standardized = (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    Ok(NodeFeatures {
        ids: g.ids.clone(),
        raw,
        standardized,
    })
}

/// Population z-score in place; a constant column becomes all zeros.
pub fn zscore(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Directed shortest-path betweenness (Brandes), normalised by
/// `(n-1)(n-2)`.
pub fn betweenness(g: &IndexedGraph) -> Vec<f64> {
    let n = g.n();
    let mut cb = vec![0.0; n];
    for s in 0..n {
        let mut stack = Vec::with_capacity(n);
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sigma = vec![0.0f64; n];
        let mut dist = vec![usize::MAX; n];
        sigma[s] = 1.0;
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &w in &g.out_adj[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        let mut delta = vec![0.0; n];
        while let Some(w) = stack.pop() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                cb[w] += delta[w];
            }
        }
    }
    if n > 2 {
        let scale = ((n - 1) * (n - 2)) as f64;
        for v in &mut cb {
            *v /= scale;
        }
    }
    cb
}

/// Principal eigenvector of `A + I` on the largest undirected component,
/// unit Euclidean norm; nodes outside that component get zero. The shift
/// keeps the iteration from oscillating on bipartite components.
pub fn eigenvector_centrality(g: &IndexedGraph) -> Vec<f64> {
    let n = g.n();
    let comp = g.components();
    let mut sizes = vec![0usize; n];
    for &c in &comp {
        sizes[c] += 1;
    }
    // Ties go to the component with the smallest member.
    let largest = (0..n).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap_or(0);
    let members: Vec<usize> = (0..n).filter(|&i| comp[i] == largest).collect();
    let mut x = vec![0.0; n];
    let init = 1.0 / (members.len() as f64).sqrt();
    for &i in &members {
        x[i] = init;
    }
    for _ in 0..POWER_MAX_ITER {
        let mut next = vec![0.0; n];
        for &i in &members {
            next[i] = x[i] + g.undirected[i].iter().map(|&j| x[j]).sum::<f64>();
        }
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        for v in &mut next {
            *v /= norm;
        }
        let diff: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if diff < POWER_TOLERANCE * n as f64 {
            break;
        }
    }
    x
}

/// PageRank on out-links with damping 0.85; dangling mass is spread
/// uniformly. Iterates until the L1 change drops below 1e-8.
pub fn pagerank(g: &IndexedGraph) -> Vec<f64> {
    let n = g.n();
    if n == 0 {
        return Vec::new();
    }
    let nf = n as f64;
    let mut x = vec![1.0 / nf; n];
    for _ in 0..POWER_MAX_ITER {
        let dangling: f64 = (0..n).filter(|&i| g.out_adj[i].is_empty()).map(|i| x[i]).sum();
        let base = (1.0 - PAGERANK_DAMPING) / nf + PAGERANK_DAMPING * dangling / nf;
        let mut next = vec![base; n];
        for i in 0..n {
            let out = &g.out_adj[i];
            if out.is_empty() {
                continue;
            }
            let share = PAGERANK_DAMPING * x[i] / out.len() as f64;
            for &j in out {
                next[j] += share;
            }
        }
        let total: f64 = next.iter().sum();
        for v in &mut next {
            *v /= total;
        }
        let diff: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if diff < POWER_TOLERANCE {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_has_uniform_pagerank() {
        let n = 7;
        let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let g = IndexedGraph::from_edges(n, &edges);
        for p in pagerank(&g) {
            assert!((p - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn pagerank_matches_dense_solve() {
        // Dangling node 3; oracle is the linear system (I - dM) x = (1-d)/n.
        let g = IndexedGraph::from_edges(4, &[(0, 1), (1, 2), (2, 0), (0, 3), (1, 3)]);
        let n = 4;
        let d = 0.85;
        let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            if g.out_adj[i].is_empty() {
                for j in 0..n {
                    m[(j, i)] = 1.0 / n as f64;
                }
            } else {
                for &j in &g.out_adj[i] {
                    m[(j, i)] = 1.0 / g.out_adj[i].len() as f64;
                }
            }
        }
        let a = nalgebra::DMatrix::identity(n, n) - m * d;
        let b = nalgebra::DVector::from_element(n, (1.0 - d) / n as f64);
        let x = a.lu().solve(&b).unwrap();
        let pr = pagerank(&g);
        for i in 0..n {
            assert!((pr[i] - x[i]).abs() < 1e-8, "{pr:?} vs {x}");
        }
    }

    #[test]
    fn star_centre_has_highest_betweenness() {
        let g = IndexedGraph::from_edges(5, &[(1, 0), (2, 0), (0, 3), (0, 4)]);
        let b = betweenness(&g);
        // Paths 1->3, 1->4, 2->3, 2->4 all pass the centre.
        assert!((b[0] - 4.0 / 12.0).abs() < 1e-15);
        assert!(b[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn betweenness_splits_over_equal_paths() {
        // Two shortest paths 0->3, through 1 and through 2.
        let g = IndexedGraph::from_edges(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        let b = betweenness(&g);
        assert!((b[1] - 0.5 / 6.0).abs() < 1e-15);
        assert!((b[2] - 0.5 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn two_nodes_share_eigenvector_centrality() {
        let g = IndexedGraph::from_edges(2, &[(0, 1)]);
        let e = eigenvector_centrality(&g);
        assert!((e[0] - e[1]).abs() < 1e-12);
        assert!((e[0] - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn nodes_outside_largest_component_score_zero() {
        let g = IndexedGraph::from_edges(5, &[(0, 1), (1, 2), (3, 4)]);
        let e = eigenvector_centrality(&g);
        assert_eq!(e[3], 0.0);
        assert_eq!(e[4], 0.0);
        assert!(e[1] > e[0]);
    }

    #[test]
    fn standardized_columns_are_centred() {
        let g = IndexedGraph::from_edges(6, &[(0, 1), (1, 2), (2, 0), (3, 0), (4, 3), (5, 1)]);
        let f = node_features(&g).unwrap();
        let pr_sum: f64 = f.raw.iter().map(|r| r[3]).sum();
        assert!((pr_sum - 1.0).abs() < 1e-9);
        for c in 0..6 {
            let mean = f.standardized.iter().map(|r| r[c]).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn empty_graph_is_an_error() {
        let g = IndexedGraph::from_edges(0, &[]);
        assert!(matches!(node_features(&g), Err(Error::EmptyGraph)));
    }
}
