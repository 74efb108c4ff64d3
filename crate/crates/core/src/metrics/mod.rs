//! Global network metrics of a snapshot.
//!
//! Degree-based metrics use the total degree (in-degree plus out-degree).
//! Clustering and curvature use the undirected projection; closeness follows
//! directed shortest paths.

pub mod curvature;
pub mod transport;

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::IndexedGraph;
use crate::netbuild::NetworkSnapshot;

pub use curvature::{edge_curvature, neighbor_measure, ollivier_ricci, CurvatureReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub date: NaiveDate,
    pub n_nodes: usize,
    pub n_edges: usize,
    /// Absent below three nodes.
    pub degree_centralization: Option<f64>,
    /// Absent when the mean degree is zero.
    pub degree_cv: Option<f64>,
    /// Nats.
    pub degree_entropy: f64,
    pub top_decile_concentration: f64,
    /// Absent below three nodes or when endpoint degrees do not vary.
    pub assortativity: Option<f64>,
    pub avg_closeness: f64,
    pub density: f64,
    pub clustering_coefficient: f64,
    /// Nats.
    pub network_entropy: f64,
    pub ollivier_ricci_mean: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsOptions {
    /// Idleness of the random walk used for curvature.
    pub idleness: f64,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions { idleness: 0.0 }
    }
}

pub fn compute_metrics(snapshot: &NetworkSnapshot, options: &MetricsOptions) -> Result<MetricsReport> {
    let g = IndexedGraph::from_snapshot(snapshot);
    graph_metrics(&g, snapshot.date, options)
}

pub fn graph_metrics(g: &IndexedGraph, date: NaiveDate, options: &MetricsOptions) -> Result<MetricsReport> {
    let deg = g.total_degrees();
    let curvature = ollivier_ricci(g, options.idleness)?;
    Ok(MetricsReport {
        date,
        n_nodes: g.n(),
        n_edges: g.edges.len(),
        degree_centralization: degree_centralization(&deg),
        degree_cv: degree_cv(&deg),
        degree_entropy: degree_entropy(&deg),
        top_decile_concentration: top_decile_concentration(&deg),
        assortativity: assortativity(g),
        avg_closeness: average_closeness(g),
        density: density(g),
        clustering_coefficient: average_clustering(g),
        network_entropy: network_entropy(g),
        ollivier_ricci_mean: curvature.mean,
    })
}

/// `Σ (d_max - d_i) / ((n - 1)(n - 2))`.
pub fn degree_centralization(degrees: &[usize]) -> Option<f64> {
    let n = degrees.len();
    if n < 3 {
        return None;
    }
    let max = *degrees.iter().max()?;
    let spread: usize = degrees.iter().map(|d| max - d).sum();
    Some(spread as f64 / ((n - 1) * (n - 2)) as f64)
}

/// Population standard deviation over mean.
pub fn degree_cv(degrees: &[usize]) -> Option<f64> {
    let n = degrees.len() as f64;
    if degrees.is_empty() {
        return None;
    }
    let mean = degrees.iter().sum::<usize>() as f64 / n;
    if mean == 0.0 {
        return None;
    }
    let var = degrees
        .iter()
        .map(|&d| (d as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Some(var.sqrt() / mean)
}

/// Shannon entropy of the degree distribution.
pub fn degree_entropy(degrees: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &d in degrees {
        *counts.entry(d).or_insert(0) += 1;
    }
    entropy(counts.values().map(|&c| c as f64))
}

fn entropy(weights: impl Iterator<Item = f64> + Clone) -> f64 {
    let total: f64 = weights.clone().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = weights
        .filter(|&w| w > 0.0)
        .map(|w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}

/// Share of all degree held by the top `⌈n/10⌉` nodes.
pub fn top_decile_concentration(degrees: &[usize]) -> f64 {
    let total: usize = degrees.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let k = degrees.len().div_ceil(10);
    let mut sorted = degrees.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted[..k].iter().sum::<usize>() as f64 / total as f64
}

/// Pearson correlation of total degrees at the two ends of an edge, each
/// edge counted in both orientations.
pub fn assortativity(g: &IndexedGraph) -> Option<f64> {
    if g.n() < 3 || g.edges.is_empty() {
        return None;
    }
    let deg = g.total_degrees();
    let (mut sx, mut sxx, mut sxy, mut m) = (0.0, 0.0, 0.0, 0.0);
    for &(a, b, _) in &g.edges {
        let (x, y) = (deg[a] as f64, deg[b] as f64);
        sx += x + y;
        sxx += x * x + y * y;
        sxy += 2.0 * x * y;
        m += 2.0;
    }
    let mean = sx / m;
    let var = sxx / m - mean * mean;
    if var <= 1e-12 * mean.max(1.0).powi(2) {
        return None;
    }
    Some(((sxy / m - mean * mean) / var).clamp(-1.0, 1.0))
}

/// Per-node closeness over directed shortest paths. Nodes reaching only
/// part of the graph are scaled by the reachable fraction; nodes reaching
/// nothing score zero.
pub fn closeness(g: &IndexedGraph) -> Vec<f64> {
    let n = g.n();
    (0..n)
        .map(|i| {
            let dist = g.bfs_directed(i);
            let (mut reach, mut total) = (0usize, 0usize);
            for (j, d) in dist.iter().enumerate() {
                if let (true, Some(d)) = (j != i, d) {
                    reach += 1;
                    total += d;
                }
            }
            if reach == 0 {
                0.0
            } else {
                (reach as f64 / (n - 1) as f64) * (reach as f64 / total as f64)
            }
        })
        .collect()
}

pub fn average_closeness(g: &IndexedGraph) -> f64 {
    if g.n() < 2 {
        return 0.0;
    }
    closeness(g).iter().sum::<f64>() / g.n() as f64
}

/// Directed edge density `m / (n (n - 1))`.
pub fn density(g: &IndexedGraph) -> f64 {
    let n = g.n();
    if n < 2 {
        return 0.0;
    }
    g.edges.len() as f64 / (n * (n - 1)) as f64
}

/// Local clustering on the undirected projection; nodes with fewer than two
/// neighbours score zero.
pub fn local_clustering(g: &IndexedGraph) -> Vec<f64> {
    (0..g.n())
        .map(|u| {
            let nbrs = &g.undirected[u];
            let k = nbrs.len();
            if k < 2 {
                return 0.0;
            }
            let mut links = 0usize;
            for (i, &a) in nbrs.iter().enumerate() {
                for &b in &nbrs[i + 1..] {
                    if g.undirected[a].binary_search(&b).is_ok() {
                        links += 1;
                    }
                }
            }
            2.0 * links as f64 / (k * (k - 1)) as f64
        })
        .collect()
}

pub fn average_clustering(g: &IndexedGraph) -> f64 {
    if g.n() == 0 {
        return 0.0;
    }
    local_clustering(g).iter().sum::<f64>() / g.n() as f64
}

/// Shannon entropy of the normalised edge-weight distribution.
pub fn network_entropy(g: &IndexedGraph) -> f64 {
    entropy(g.edges.iter().map(|e| e.2))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionLength {
    pub source: String,
    pub target: String,
    pub length: usize,
}

/// The `k` links with the most distinct tokens; ties by `(source, target)`.
pub fn composition_length(snapshot: &NetworkSnapshot, k: usize) -> Vec<CompositionLength> {
    let mut out: Vec<CompositionLength> = snapshot
        .links
        .iter()
        .map(|l| CompositionLength {
            source: l.source.clone(),
            target: l.target.clone(),
            length: l.composition.len(),
        })
        .collect();
    out.sort_by(|a, b| {
        b.length
            .cmp(&a.length)
            .then_with(|| (&a.source, &a.target).cmp(&(&b.source, &b.target)))
    });
    out.truncate(k);
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per report, absent values as empty cells.
pub fn write_metrics_csv<W: Write>(reports: &[MetricsReport], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "date",
        "n_nodes",
        "n_edges",
        "degree_centralization",
        "degree_cv",
        "degree_entropy",
        "top_decile_concentration",
        "assortativity",
        "avg_closeness",
        "density",
        "clustering_coefficient",
        "network_entropy",
        "ollivier_ricci_mean",
    ])?;
    for r in reports {
        w.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            r.n_nodes.to_string(),
            r.n_edges.to_string(),
            opt(r.degree_centralization),
            opt(r.degree_cv),
            r.degree_entropy.to_string(),
            r.top_decile_concentration.to_string(),
            opt(r.assortativity),
            r.avg_closeness.to_string(),
            r.density.to_string(),
            r.clustering_coefficient.to_string(),
            r.network_entropy.to_string(),
            opt(r.ollivier_ricci_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}
