//! Minimum-cost injective assignment of ground truths to predictions.

use crate::{Error, Result};

/// `assignment[n]` is the prediction matched to ground truth `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub assignment: Vec<usize>,
    /// Sum of the matched costs, accumulated in ground-truth order.
    pub total_cost: f64,
}

/// Shortest-augmenting-path Hungarian algorithm with potentials, `O(n^2 m)`.
/// `cost` is `n x m` with `n <= m`; returns the column of every row.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
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
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

fn assignment_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    rows.iter().zip(cols).map(|(&r, &c)| cost[r][c]).sum()
}

/// Optimal assignment for an `N x M` cost matrix (`N <= M`).
///
/// Among assignments within a relative `1e-9` of the optimum, the
/// lexicographically smallest `(assignment[0], assignment[1], ...)` is
/// returned, so ties resolve deterministically.
pub fn hungarian_match_costs(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n = cost.len();
    if n == 0 {
        return Ok(MatchResult { assignment: Vec::new(), total_cost: 0.0 });
    }
    let m = cost[0].len();
    if n > m {
        return Err(Error::TooManyGroundTruths { n_gt: n, n_pred: m });
    }
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::DimMismatch { what: "cost matrix row".into(), expected: m, got: 0 });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("matching cost"));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = solve(cost, &all_rows, &all_cols);
    let optimum = assignment_cost(cost, &all_rows, &best);
    let tol = 1e-9 * optimum.abs().max(1.0);

    // Fix rows one at a time to the smallest column that still admits an optimum.
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for j in 0..m {
            if fixed.contains(&j) {
                continue;
            }
            let free: Vec<usize> = (0..m).filter(|c| *c != j && !fixed.contains(c)).collect();
            let rest = if rest_rows.is_empty() {
                0.0
            } else {
                let sol = solve(cost, &rest_rows, &free);
                assignment_cost(cost, &rest_rows, &sol)
            };
            if fixed_cost + cost[i][j] + rest <= optimum + tol {
                chosen = Some(j);
                break;
            }
        }
        // The solver's own column always qualifies; the fallback only guards rounding.
        let j = chosen.unwrap_or(best[i]);
        fixed_cost += cost[i][j];
        fixed.push(j);
    }
    let total_cost = assignment_cost(cost, &all_rows, &fixed);
    Ok(MatchResult { assignment: fixed, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
        fn rec(cost: &[Vec<f64>], i: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
            if i == cost.len() {
                let s: f64 = cur.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
                if s < best.0 {
                    *best = (s, cur.clone());
                }
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(cost, i + 1, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, Vec::new());
        rec(cost, 0, &mut vec![false; cost[0].len()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn single_pair() {
        let r = hungarian_match_costs(&[vec![3.5]]).unwrap();
        assert_eq!(r.assignment, vec![0]);
        assert_eq!(r.total_cost, 3.5);
    }

    #[test]
    fn too_many_ground_truths() {
        assert!(matches!(
            hungarian_match_costs(&[vec![1.0], vec![2.0]]),
            Err(Error::TooManyGroundTruths { n_gt: 2, n_pred: 1 })
        ));
    }

    #[test]
    fn ties_resolve_lexicographically() {
        // duplicated rows: both orders are optimal
        let c = vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        let r = hungarian_match_costs(&c).unwrap();
        assert_eq!(r.assignment, vec![1, 2]);
        let c = vec![vec![0.0; 4]; 3];
        assert_eq!(hungarian_match_costs(&c).unwrap().assignment, vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(n in 1usize..4, extra in 0usize..3, seed in prop::collection::vec(0.0f64..10.0, 36)) {
            let m = n + extra;
            let cost: Vec<Vec<f64>> = (0..n).map(|i| seed[i * 6..i * 6 + m].to_vec()).collect();
            let r = hungarian_match_costs(&cost).unwrap();
            let (b, _) = brute(&cost);
            prop_assert!((r.total_cost - b).abs() < 1e-12);
            let mut seen = r.assignment.clone();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
        }

        #[test]
        fn scale_invariant(n in 1usize..4, seed in prop::collection::vec(0.0f64..10.0, 36), k in 0.1f64..10.0) {
            let cost: Vec<Vec<f64>> = (0..n).map(|i| seed[i * 6..i * 6 + 5].to_vec()).collect();
            let scaled: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|x| x * k).collect()).collect();
            prop_assert_eq!(
                hungarian_match_costs(&cost).unwrap().assignment,
                hungarian_match_costs(&scaled).unwrap().assignment
            );
        }
    }
}
