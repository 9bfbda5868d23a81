//! Minimum-cost rectangular assignment (Kuhn–Munkres with potentials).

/// Assigns every row of a `rows × cols` cost matrix to a distinct column,
/// or every column to a distinct row when there are more rows than columns.
/// Returns `(row, col)` pairs sorted by row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows <= cols {
        solve(rows, cols, |i, j| cost[i][j])
            .into_iter()
            .enumerate()
            .collect()
    } else {
        let mut pairs: Vec<(usize, usize)> = solve(cols, rows, |i, j| cost[j][i])
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        pairs
    }
}

/// Optimal total cost of a `rows ≤ cols` problem.
pub fn min_cost(cost: &[Vec<f64>]) -> f64 {
    min_cost_assignment(cost).iter().map(|&(i, j)| cost[i][j]).sum()
}

/// Every assignment of a `rows ≤ cols` problem whose cost is within `1e-11`
/// relative of the optimum, in lexicographic order of the column sequence.
/// Stops after `limit` assignments; the first one is always returned.
pub fn near_optimal_assignments(cost: &[Vec<f64>], limit: usize) -> Vec<Vec<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return vec![Vec::new()];
    }
    let cols = cost[0].len();
    assert!(rows <= cols, "more rows than columns");
    let opt = min_cost(cost);
    let mut search = Search {
        cost,
        bound: opt + 1e-11 * opt.abs().max(1.0),
        limit: limit.max(1),
        used: vec![false; cols],
        chosen: Vec::with_capacity(rows),
        found: Vec::new(),
    };
    search.descend(0.0);
    if search.found.is_empty() {
        // Rounding rejected every branch; the solver's answer is optimal.
        let mut pairs = min_cost_assignment(cost);
        pairs.sort_unstable();
        search.found.push(pairs.into_iter().map(|(_, j)| j).collect());
    }
    search.found
}

/// Among all optimal assignments of a `rows ≤ cols` problem, the one whose
/// column sequence is lexicographically smallest. Costs within `1e-11`
/// relative of the optimum count as ties.
pub fn lexicographic_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    near_optimal_assignments(cost, 1).swap_remove(0)
}

struct Search<'a> {
    cost: &'a [Vec<f64>],
    bound: f64,
    limit: usize,
    used: Vec<bool>,
    chosen: Vec<usize>,
    found: Vec<Vec<usize>>,
}

impl Search<'_> {
    fn descend(&mut self, prefix: f64) {
        let i = self.chosen.len();
        if i == self.cost.len() {
            self.found.push(self.chosen.clone());
            return;
        }
        for j in 0..self.used.len() {
            if self.found.len() >= self.limit {
                return;
            }
            if self.used[j] {
                continue;
            }
            self.used[j] = true;
            let here = prefix + self.cost[i][j];
            if here + self.rest(i + 1) <= self.bound {
                self.chosen.push(j);
                self.descend(here);
                self.chosen.pop();
            }
            self.used[j] = false;
        }
    }

    /// Optimal cost of rows `from..` over the unused columns.
    fn rest(&self, from: usize) -> f64 {
        if from == self.cost.len() {
            return 0.0;
        }
        let free: Vec<usize> = (0..self.used.len()).filter(|&c| !self.used[c]).collect();
        let sub: Vec<Vec<f64>> = self.cost[from..]
            .iter()
            .map(|row| free.iter().map(|&c| row[c]).collect())
            .collect();
        min_cost(&sub)
    }
}

fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; p[0] is the row being added.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn injections(rows: usize, cols: usize) -> Vec<Vec<usize>> {
        fn rec(i: usize, rows: usize, cols: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if i == rows {
                out.push(cur.clone());
                return;
            }
            for j in 0..cols {
                if !cur.contains(&j) {
                    cur.push(j);
                    rec(i + 1, rows, cols, cur, out);
                    cur.pop();
                }
            }
        }
        let mut out = Vec::new();
        rec(0, rows, cols, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let rows = rng.gen_range(1..5);
            let cols = rng.gen_range(rows..7);
            let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(0.0..3.0)).collect()).collect();
            let best = injections(rows, cols)
                .into_iter()
                .map(|b| b.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!((min_cost(&cost) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn tall_matrices_are_transposed() {
        let cost = vec![vec![5.0, 1.0], vec![1.0, 5.0], vec![0.5, 0.5]];
        let pairs = min_cost_assignment(&cost);
        assert_eq!(pairs.len(), 2);
        let total: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        assert!((total - 1.5).abs() < 1e-12);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let cost = vec![vec![1.0; 4]; 3];
        assert_eq!(lexicographic_assignment(&cost), vec![0, 1, 2]);
        let cost = vec![vec![2.0, 1.0, 1.0], vec![1.0, 1.0, 2.0]];
        assert_eq!(lexicographic_assignment(&cost), vec![1, 0]);
        assert!(min_cost_assignment(&[]).is_empty());
    }

    #[test]
    fn near_optimal_lists_ties_in_order() {
        let cost = vec![vec![1.0; 3]; 2];
        let all = near_optimal_assignments(&cost, 100);
        assert_eq!(all, injections(2, 3));
        assert_eq!(near_optimal_assignments(&cost, 2), vec![vec![0, 1], vec![0, 2]]);
        let cost = vec![vec![0.0, 5.0], vec![5.0, 0.0]];
        assert_eq!(near_optimal_assignments(&cost, 100), vec![vec![0, 1]]);
    }
}
