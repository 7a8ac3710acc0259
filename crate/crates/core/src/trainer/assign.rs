//! Match costs, the Hungarian solver and the one-to-many target assignment.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var, PROB_FLOOR};
use crate::predictor::{HeadOutput, ProposalDistributions};
use crate::proposer::pair_index;

/// A gold entity `(start, end, type id)`.
pub type Target = (usize, usize, usize);

/// `-ln p_c(t) - ln p_n(s, e)` for an entity; `-ln p_c(None)` for padding.
/// Probabilities are floored at `PROB_FLOOR` before the log.
pub fn match_cost(target: Option<Target>, d: &ProposalDistributions, none_id: usize) -> f64 {
    let nl = |p: f64| -p.max(PROB_FLOOR).ln();
    match target {
        None => nl(d.p_c[none_id]),
        Some((s, e, t)) => {
            let len = len_of_pairs(d.pairs.len());
            nl(d.p_c[t]) + nl(d.p_n[pair_index(len, s, e)])
        }
    }
}

fn len_of_pairs(n: usize) -> usize {
    // n = L (L + 1) / 2
    let l = (((8 * n + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    debug_assert_eq!(l * (l + 1) / 2, n);
    l
}

/// `L x (N + 1)` costs; the last column is padding.
pub fn cost_matrix(targets: &[Target], dists: &[ProposalDistributions], none_id: usize) -> Vec<Vec<f64>> {
    dists
        .iter()
        .map(|d| {
            targets
                .iter()
                .map(|&t| match_cost(Some(t), d, none_id))
                .chain(std::iter::once(match_cost(None, d, none_id)))
                .collect()
        })
        .collect()
}

/// Minimum-cost one-to-one matching of size `min(rows, cols)`. Returns
/// `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(vec![]);
    }
    let cols = cost[0].len();
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::Data("hungarian: ragged cost matrix".into()));
    }
    if let Some((i, j)) = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .find(|&(i, j)| !cost[i][j].is_finite())
    {
        return Err(Error::NonFinite(format!("hungarian: cost[{i}][{j}] = {}", cost[i][j])));
    }
    if cols == 0 {
        return Ok(vec![]);
    }
    let mut pairs = if rows <= cols {
        solve(cost).into_iter().enumerate().collect::<Vec<_>>()
    } else {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        solve(&t).into_iter().enumerate().map(|(j, i)| (i, j)).collect()
    };
    pairs.sort_unstable();
    Ok(pairs)
}

/// Shortest augmenting path with potentials; `rows <= cols`. Returns the
/// column of every row.
fn solve(a: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    let m = a[0].len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    /// Target index of every proposal; `padding` marks the padding target.
    pub target_of: Vec<usize>,
    /// Pairs fixed by the one-to-one matching.
    pub core: Vec<(usize, usize)>,
    pub padding: usize,
}

impl Assignment {
    /// Total cost, summed in proposal order.
    pub fn cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.target_of.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    }
}

/// Assignment from an `L x (N + 1)` cost matrix (last column padding).
///
/// With `L <= N` every proposal takes a distinct entity (one-to-one
/// matching on the entity columns). With `L > N` every entity gets a
/// distinct proposal from the matching and every other proposal takes the
/// cheapest entry of its full row, ties to the lowest index. The matching
/// runs on costs reduced by each row's minimum, which makes the combined
/// result optimal among all mappings that cover every entity.
pub fn assign_costs(cost: &[Vec<f64>]) -> Result<Assignment> {
    let l = cost.len();
    if l == 0 {
        return Err(Error::EmptyInput("assign"));
    }
    let n = cost[0].len() - 1;
    if n == 0 {
        return Ok(Assignment {
            target_of: vec![0; l],
            core: vec![],
            padding: 0,
        });
    }
    let row_min = |r: &[f64]| r.iter().copied().fold(f64::INFINITY, f64::min);
    let entity: Vec<Vec<f64>> = if l > n {
        cost.iter().map(|r| r[..n].iter().map(|c| c - row_min(r)).collect()).collect()
    } else {
        cost.iter().map(|r| r[..n].to_vec()).collect()
    };
    let core = hungarian(&entity)?;
    let mut target_of = vec![usize::MAX; l];
    for &(i, j) in &core {
        target_of[i] = j;
    }
    for (i, t) in target_of.iter_mut().enumerate() {
        if *t == usize::MAX {
            let row = &cost[i];
            let mut best = 0;
            for (j, &c) in row.iter().enumerate() {
                if c < row[best] {
                    best = j;
                }
            }
            *t = best;
        }
    }
    Ok(Assignment {
        target_of,
        core,
        padding: n,
    })
}

pub fn assign(targets: &[Target], dists: &[ProposalDistributions], none_id: usize) -> Result<Assignment> {
    assign_costs(&cost_matrix(targets, dists, none_id))
}

/// Sum of match costs of the assigned pairs, as a graph node. The
/// assignment is a constant.
pub fn bipartite_loss(g: &mut Graph, head: &HeadOutput, a: &Assignment, targets: &[Target], none_id: usize) -> Var {
    let len = g.value(head.p_c).rows();
    let types = a
        .target_of
        .iter()
        .map(|&j| Some(if j == a.padding { none_id } else { targets[j].2 }))
        .collect();
    let spans = a
        .target_of
        .iter()
        .map(|&j| (j != a.padding).then(|| pair_index(len, targets[j].0, targets[j].1)))
        .collect();
    let lc = g.pick_neg_log(head.p_c, types);
    let ln = g.pick_neg_log(head.p_n, spans);
    g.add(lc, ln)
}
