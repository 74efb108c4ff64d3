//! Node features, t-SNE embedding and DBSCAN with a silhouette-driven
//! parameter sweep.

pub mod dbscan;
pub mod features;
pub mod tsne;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::IndexedGraph;
use crate::netbuild::NetworkSnapshot;

pub use dbscan::{dbscan, euclidean_matrix, n_clusters, silhouette, NOISE};
pub use features::{betweenness, eigenvector_centrality, node_features, pagerank, NodeFeatures, FEATURE_NAMES};
pub use tsne::{kl_divergence, kl_gradient, tsne, TsneOptions, TsneResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub eps: Vec<f64>,
    pub min_samples: Vec<usize>,
    /// Inclusive range of acceptable cluster counts.
    pub target_clusters: (usize, usize),
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            eps: (1..=50).map(|k| k as f64 / 10.0).collect(),
            min_samples: (3..=30).collect(),
            target_clusters: (5, 20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub eps: f64,
    pub min_samples: usize,
    pub n_clusters: usize,
    pub n_noise: usize,
    pub silhouette: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub labels: Vec<i64>,
    pub eps: f64,
    pub min_samples: usize,
    pub silhouette: Option<f64>,
    pub n_clusters: usize,
    /// No grid cell landed in the target band; the best cell overall was
    /// returned instead.
    pub target_missed: bool,
}

/// Every grid cell, in eps-major order.
pub fn sweep_cells(points: &[Vec<f64>], grid: &SweepGrid) -> Vec<(SweepCell, Vec<i64>)> {
    let dist = euclidean_matrix(points);
    let cells: Vec<(f64, usize)> = grid
        .eps
        .iter()
        .flat_map(|&e| grid.min_samples.iter().map(move |&m| (e, m)))
        .collect();
    cells
        .par_iter()
        .map(|&(eps, min_samples)| {
            let labels = dbscan::dbscan_with_distances(&dist, eps, min_samples);
            let cell = SweepCell {
                eps,
                min_samples,
                n_clusters: n_clusters(&labels),
                n_noise: labels.iter().filter(|&&l| l == NOISE).count(),
                silhouette: silhouette(&dist, &labels),
            };
            (cell, labels)
        })
        .collect()
}

/// Highest silhouette among cells inside the target band, else highest
/// overall with `target_missed` set. Ties keep the earlier grid cell; cells
/// without a silhouette rank below every scored cell.
pub fn sweep(points: &[Vec<f64>], grid: &SweepGrid) -> Result<(ClusteringResult, Vec<SweepCell>)> {
    if points.len() < 2 {
        return Err(Error::Parameter("sweep needs at least two points".into()));
    }
    if grid.eps.is_empty() || grid.min_samples.is_empty() {
        return Err(Error::Parameter("sweep grid is empty".into()));
    }
    let cells = sweep_cells(points, grid);
    let (lo, hi) = grid.target_clusters;
    let pick = |filter: &dyn Fn(&SweepCell) -> bool| -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, (c, _)) in cells.iter().enumerate() {
            if !filter(c) {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => match (c.silhouette, cells[b].0.silhouette) {
                    (Some(x), Some(y)) => x > y,
                    (Some(_), None) => true,
                    _ => false,
                },
            };
            if better {
                best = Some(i);
            }
        }
        best
    };
    let in_band = pick(&|c| (lo..=hi).contains(&c.n_clusters));
    let (idx, missed) = match in_band {
        Some(i) => (i, false),
        None => (pick(&|_| true).expect("grid is non-empty"), true),
    };
    let (cell, labels) = &cells[idx];
    let result = ClusteringResult {
        labels: labels.clone(),
        eps: cell.eps,
        min_samples: cell.min_samples,
        silhouette: cell.silhouette,
        n_clusters: cell.n_clusters,
        target_missed: missed,
    };
    Ok((result, cells.into_iter().map(|(c, _)| c).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterOptions {
    pub tsne: TsneOptions,
    pub grid: SweepGrid,
    /// Lower the perplexity to fit small graphs instead of failing.
    pub clamp_perplexity: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            tsne: TsneOptions::default(),
            grid: SweepGrid::default(),
            clamp_perplexity: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub date: chrono::NaiveDate,
    pub ids: Vec<String>,
    pub perplexity: f64,
    pub embedding: Vec<Vec<f64>>,
    pub kl_divergence: f64,
    pub best: ClusteringResult,
    pub sweep: Vec<SweepCell>,
}

pub fn cluster_snapshot(snapshot: &NetworkSnapshot, options: &ClusterOptions, seed: u64) -> Result<ClusterReport> {
    let g = IndexedGraph::from_snapshot(snapshot);
    let features = node_features(&g)?;
    let n = g.n();
    let mut tsne_opts = options.tsne;
    if options.clamp_perplexity && n as f64 <= 3.0 * tsne_opts.perplexity {
        // Largest value with n > 3 * perplexity, kept at or above one.
        tsne_opts.perplexity = ((n as f64 - 1.0) / 3.0).max(1.0);
    }
    let embedded = tsne(&features.standardized, &tsne_opts, seed)?;
    let (best, sweep) = sweep(&embedded.embedding, &options.grid)?;
    Ok(ClusterReport {
        date: snapshot.date,
        ids: features.ids,
        perplexity: tsne_opts.perplexity,
        embedding: embedded.embedding,
        kl_divergence: embedded.kl_final,
        best,
        sweep,
    })
}
