//! DBSCAN over a precomputed distance matrix, and the silhouette score.

pub const NOISE: i64 = -1;

pub fn euclidean_matrix(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|a| {
            points
                .iter()
                .map(|b| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

pub fn dbscan(points: &[Vec<f64>], eps: f64, min_samples: usize) -> Vec<i64> {
    dbscan_with_distances(&euclidean_matrix(points), eps, min_samples)
}

/// Core points have at least `min_samples` points (themselves included)
/// within `eps`. Cores within `eps` of each other share a cluster; border
/// points join the cluster of their nearest core. Clusters are numbered in
/// order of their smallest member.
pub fn dbscan_with_distances(dist: &[Vec<f64>], eps: f64, min_samples: usize) -> Vec<i64> {
    let n = dist.len();
    let core: Vec<bool> = (0..n)
        .map(|i| dist[i].iter().filter(|&&d| d <= eps).count() >= min_samples.max(1))
        .collect();

    let mut comp = vec![usize::MAX; n];
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        comp[s] = s;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if core[v] && comp[v] == usize::MAX && dist[u][v] <= eps {
                    comp[v] = s;
                    stack.push(v);
                }
            }
        }
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let nearest = (0..n)
            .filter(|&c| core[c] && dist[i][c] <= eps)
            .min_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(comp[a].cmp(&comp[b])));
        if let Some(c) = nearest {
            comp[i] = comp[c];
        }
    }
    canonicalize(&comp)
}

/// Renumbers raw component ids so cluster `k` is the one whose smallest
/// member comes `k`-th; `usize::MAX` becomes noise.
fn canonicalize(comp: &[usize]) -> Vec<i64> {
    let mut mapping = std::collections::HashMap::new();
    comp.iter()
        .map(|&c| {
            if c == usize::MAX {
                NOISE
            } else {
                let next = mapping.len() as i64;
                *mapping.entry(c).or_insert(next)
            }
        })
        .collect()
}

pub fn n_clusters(labels: &[i64]) -> usize {
    labels.iter().filter(|&&l| l >= 0).max().map_or(0, |&m| m as usize + 1)
}

/// Mean silhouette over non-noise points, or `None` with fewer than two
/// clusters. Points alone in their cluster score zero.
pub fn silhouette(dist: &[Vec<f64>], labels: &[i64]) -> Option<f64> {
    let k = n_clusters(labels);
    if k < 2 {
        return None;
    }
    let mut sizes = vec![0usize; k];
    for &l in labels.iter().filter(|&&l| l >= 0) {
        sizes[l as usize] += 1;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if li < 0 {
            continue;
        }
        count += 1;
        let li = li as usize;
        if sizes[li] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for (j, &lj) in labels.iter().enumerate() {
            if lj >= 0 && j != i {
                sums[lj as usize] += dist[i][j];
            }
        }
        let a = sums[li] / (sizes[li] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != li)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / count as f64)
}
