//! Exact balanced transportation problems by the transportation simplex
//! (northwest-corner start, MODI potentials, stepping-stone pivots).

use std::collections::VecDeque;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub cost: f64,
    /// `flow[i][j]` moved from source `i` to sink `j`.
    pub flow: Vec<Vec<f64>>,
}

/// Minimises `Σ cost[i][j] · flow[i][j]` subject to row sums `supply` and
/// column sums `demand`. Totals must agree.
pub fn solve(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> TransportPlan {
    let m = supply.len();
    let n = demand.len();
    assert!(m > 0 && n > 0, "transport problem needs sources and sinks");
    assert_eq!(cost.len(), m);
    assert!(cost.iter().all(|row| row.len() == n));
    let total_s: f64 = supply.iter().sum();
    let total_d: f64 = demand.iter().sum();
    assert!(
        (total_s - total_d).abs() <= 1e-9 * total_s.abs().max(1.0),
        "unbalanced transport problem: {total_s} vs {total_d}"
    );

    let mut flow = vec![vec![0.0; n]; m];
    let mut basic = vec![vec![false; n]; m];

    // Northwest corner: exactly m + n - 1 basic cells, some possibly zero.
    let mut s = supply.to_vec();
    let mut d = demand.to_vec();
    let (mut i, mut j) = (0, 0);
    while i < m && j < n {
        let q = s[i].min(d[j]).max(0.0);
        flow[i][j] = q;
        basic[i][j] = true;
        s[i] -= q;
        d[j] -= q;
        if i + 1 < m && (s[i] <= EPS || j + 1 == n) {
            i += 1;
        } else {
            j += 1;
        }
    }

    let max_iter = 50 * (m + n) * (m + n) + 100;
    for _ in 0..max_iter {
        let (u, v) = potentials(cost, &basic);
        let mut entering = None;
        let mut best = -1e-12;
        for (r, row) in cost.iter().enumerate() {
            for (c, &cij) in row.iter().enumerate() {
                if basic[r][c] {
                    continue;
                }
                let reduced = cij - u[r] - v[c];
                if reduced < best {
                    best = reduced;
                    entering = Some((r, c));
                }
            }
        }
        let Some((er, ec)) = entering else {
            break;
        };

        // Cells on the basis-tree path from column `ec` back to row `er`.
        let path = tree_path(&basic, er, ec);
        let mut theta = f64::INFINITY;
        let mut leaving = None;
        for (k, &(r, c)) in path.iter().enumerate() {
            if k % 2 == 0 && flow[r][c] < theta {
                theta = flow[r][c];
                leaving = Some((r, c));
            }
        }
        let (lr, lc) = leaving.expect("cycle has a decreasing cell");
        flow[er][ec] += theta;
        for (k, &(r, c)) in path.iter().enumerate() {
            if k % 2 == 0 {
                flow[r][c] -= theta;
            } else {
                flow[r][c] += theta;
            }
        }
        basic[er][ec] = true;
        basic[lr][lc] = false;
        flow[lr][lc] = 0.0;
    }

    let cost_total = flow
        .iter()
        .zip(cost)
        .flat_map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| f * c))
        .sum();
    TransportPlan {
        cost: cost_total,
        flow,
    }
}

/// Row and column potentials with `u[0] = 0` and `u[i] + v[j] = c[i][j]`
/// on every basic cell.
fn potentials(cost: &[Vec<f64>], basic: &[Vec<bool>]) -> (Vec<f64>, Vec<f64>) {
    let m = basic.len();
    let n = basic[0].len();
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    u[0] = 0.0;
    // Nodes 0..m are rows, m..m+n are columns.
    let mut queue = VecDeque::from([0usize]);
    while let Some(node) = queue.pop_front() {
        if node < m {
            for c in 0..n {
                if basic[node][c] && v[c].is_nan() {
                    v[c] = cost[node][c] - u[node];
                    queue.push_back(m + c);
                }
            }
        } else {
            let c = node - m;
            for r in 0..m {
                if basic[r][c] && u[r].is_nan() {
                    u[r] = cost[r][c] - v[c];
                    queue.push_back(r);
                }
            }
        }
    }
    debug_assert!(u.iter().chain(&v).all(|x| !x.is_nan()), "basis is not spanning");
    (u, v)
}

/// Basic cells on the tree path from column `col` to row `row`, in order.
/// The first cell is adjacent to `col`.
fn tree_path(basic: &[Vec<bool>], row: usize, col: usize) -> Vec<(usize, usize)> {
    let m = basic.len();
    let n = basic[0].len();
    let start = m + col;
    let goal = row;
    let mut parent = vec![usize::MAX; m + n];
    parent[start] = start;
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == goal {
            break;
        }
        let neighbours: Vec<usize> = if node < m {
            (0..n).filter(|&c| basic[node][c]).map(|c| m + c).collect()
        } else {
            (0..m).filter(|&r| basic[r][node - m]).collect()
        };
        for next in neighbours {
            if parent[next] == usize::MAX {
                parent[next] = node;
                queue.push_back(next);
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = goal;
    while node != start {
        let p = parent[node];
        let cell = if node < m { (node, p - m) } else { (p, node - m) };
        cells.push(cell);
        node = p;
    }
    cells.reverse();
    cells
}
