//! Index-based view of a snapshot used by the analyses.

use std::collections::{HashMap, VecDeque};

use rust_decimal::prelude::ToPrimitive;

use crate::netbuild::NetworkSnapshot;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedGraph {
    pub ids: Vec<String>,
    pub index: HashMap<String, usize>,
    /// Directed edges `(source, target, weight)`, at most one per ordered pair.
    pub edges: Vec<(usize, usize, f64)>,
    pub out_adj: Vec<Vec<usize>>,
    pub in_adj: Vec<Vec<usize>>,
    /// Neighbours in the undirected projection, sorted, no self-loops.
    pub undirected: Vec<Vec<usize>>,
    pub node_weights: Vec<f64>,
}

impl IndexedGraph {
    pub fn from_snapshot(snapshot: &NetworkSnapshot) -> Self {
        let mut ids: Vec<String> = snapshot.nodes.iter().map(|n| n.id.clone()).collect();
        for l in &snapshot.links {
            ids.push(l.source.clone());
            ids.push(l.target.clone());
        }
        ids.sort();
        ids.dedup();
        let index: HashMap<String, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut weights = vec![0.0; ids.len()];
        for n in &snapshot.nodes {
            weights[index[&n.id]] = n.size.to_f64().unwrap_or(0.0);
        }
        let edges = snapshot
            .links
            .iter()
            .map(|l| {
                (
                    index[&l.source],
                    index[&l.target],
                    l.size.to_f64().unwrap_or(0.0),
                )
            })
            .collect();
        Self::assemble(ids, index, edges, weights)
    }

    /// Graph on nodes `0..n` named by their index. Duplicate ordered pairs
    /// and self-loops are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut e: Vec<(usize, usize, f64)> = edges
            .iter()
            .filter(|(a, b)| a != b)
            .map(|&(a, b)| (a, b, 1.0))
            .collect();
        e.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        e.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);
        Self::assemble(ids, index, e, vec![0.0; n])
    }

    fn assemble(
        ids: Vec<String>,
        index: HashMap<String, usize>,
        edges: Vec<(usize, usize, f64)>,
        node_weights: Vec<f64>,
    ) -> Self {
        let n = ids.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        let mut undirected = vec![Vec::new(); n];
        for &(a, b, _) in &edges {
            out_adj[a].push(b);
            in_adj[b].push(a);
            if a != b {
                undirected[a].push(b);
                undirected[b].push(a);
            }
        }
        for list in out_adj.iter_mut().chain(&mut in_adj).chain(&mut undirected) {
            list.sort_unstable();
            list.dedup();
        }
        IndexedGraph {
            ids,
            index,
            edges,
            out_adj,
            in_adj,
            undirected,
            node_weights,
        }
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// In-degree plus out-degree.
    pub fn total_degree(&self, i: usize) -> usize {
        self.out_adj[i].len() + self.in_adj[i].len()
    }

    pub fn total_degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.total_degree(i)).collect()
    }

    /// Undirected projection edges `(a, b)` with `a < b`.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, nbrs) in self.undirected.iter().enumerate() {
            for &b in nbrs {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Hop distances from `src` following out-edges.
    pub fn bfs_directed(&self, src: usize) -> Vec<Option<usize>> {
        bfs(&self.out_adj, src, usize::MAX)
    }

    /// Hop distances from `src` in the undirected projection, explored up
    /// to `max_depth`.
    pub fn bfs_undirected(&self, src: usize, max_depth: usize) -> Vec<Option<usize>> {
        bfs(&self.undirected, src, max_depth)
    }

    /// Connected components of the undirected projection as a label per
    /// node; labels are numbered in order of their smallest node.
    pub fn components(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.n()];
        let mut next = 0;
        for s in 0..self.n() {
            if label[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            label[s] = next;
            while let Some(u) = stack.pop() {
                for &v in &self.undirected[u] {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    /// Bridges of the undirected projection as `(a, b)` with `a < b`,
    /// sorted. Iterative low-link search, linear in the graph size.
    pub fn bridges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0; n];
        let mut timer = 0;
        let mut out = Vec::new();
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            // (node, parent, next neighbour position)
            let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
            disc[root] = timer;
            low[root] = timer;
            timer += 1;
            while let Some(&mut (u, parent, ref mut pos)) = stack.last_mut() {
                if let Some(&v) = self.undirected[u].get(*pos) {
                    *pos += 1;
                    if v == parent {
                        continue;
                    }
                    if disc[v] == usize::MAX {
                        disc[v] = timer;
                        low[v] = timer;
                        timer += 1;
                        stack.push((v, u, 0));
                    } else {
                        low[u] = low[u].min(disc[v]);
                    }
                } else {
                    stack.pop();
                    if parent != usize::MAX {
                        low[parent] = low[parent].min(low[u]);
                        if low[u] > disc[parent] {
                            out.push((parent.min(u), parent.max(u)));
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn bfs(adj: &[Vec<usize>], src: usize, max_depth: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].expect("queued nodes have a distance");
        if d >= max_depth {
            continue;
        }
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_edges_are_all_bridges() {
        let g = IndexedGraph::from_edges(5, &[(0, 1), (1, 2), (1, 3), (3, 4)]);
        assert_eq!(g.bridges(), vec![(0, 1), (1, 2), (1, 3), (3, 4)]);
    }

    #[test]
    fn cycle_has_no_bridges() {
        let g = IndexedGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        assert!(g.bridges().is_empty());
    }

    #[test]
    fn reciprocal_links_are_one_undirected_edge() {
        let g = IndexedGraph::from_edges(3, &[(0, 1), (1, 0), (1, 2)]);
        assert_eq!(g.bridges(), vec![(0, 1), (1, 2)]);
        assert_eq!(g.total_degree(1), 3);
        assert_eq!(g.undirected[1], vec![0, 2]);
    }

    #[test]
    fn components_are_labelled_in_node_order() {
        let g = IndexedGraph::from_edges(5, &[(3, 4), (0, 2)]);
        assert_eq!(g.components(), vec![0, 1, 0, 2, 2]);
    }
}
