//! Minimum-cost bipartite assignment (Jonker-Volgenant style shortest
//! augmenting paths on a zero-padded square matrix) with a deterministic
//! lexicographic tie-break over the (row, col) pair sequence.

use crate::error::{Error, Result};

/// Solve a padded square assignment. Returns col -> row matching (1-based
/// internally, converted to 0-based) over an n x n matrix given through
/// `at(i, j)`.
fn solve_square(n: usize, at: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to col j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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
            for j in 0..=n {
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
    (1..=n).map(|j| p[j] - 1).collect()
}

/// Minimum total cost over assignments between `rows` of `row_ids` and
/// `cols` of `col_ids` (both index into the original cost matrix); the
/// assignment has size min(rows, cols). Padding costs are zero.
fn min_cost(cost: &[f64], m: usize, row_ids: &[usize], col_ids: &[usize]) -> f64 {
    let n = row_ids.len().max(col_ids.len());
    if n == 0 {
        return 0.0;
    }
    let at = |i: usize, j: usize| -> f64 {
        if i < row_ids.len() && j < col_ids.len() {
            cost[row_ids[i] * m + col_ids[j]]
        } else {
            0.0
        }
    };
    let col_to_row = solve_square(n, &at);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (j, &i) in col_to_row.iter().enumerate() {
        if i < row_ids.len() && j < col_ids.len() {
            pairs.push((row_ids[i], col_ids[j]));
        }
    }
    pairs.sort_unstable();
    pairs.iter().map(|&(r, c)| cost[r * m + c]).sum()
}

fn base_assignment(cost: &[f64], n: usize, m: usize) -> Vec<(usize, usize)> {
    let size = n.max(m);
    let at = |i: usize, j: usize| -> f64 {
        if i < n && j < m {
            cost[i * m + j]
        } else {
            0.0
        }
    };
    let col_to_row = solve_square(size, &at);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (j, &i) in col_to_row.iter().enumerate() {
        if i < n && j < m {
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn total_of(cost: &[f64], m: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * m + c]).sum()
}

/// Assignment minimizing total cost over an n x m matrix (row-major slice).
/// Returns min(n, m) pairs sorted by row; among all minimum-cost assignments
/// the lexicographically smallest (row, col) sequence is chosen.
pub fn hungarian_match(cost: &[f64], n: usize, m: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != n * m {
        return Err(Error::shape(format!("cost matrix {n}x{m} needs {} entries", n * m)));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite cost entry"));
    }
    if n == 0 || m == 0 {
        return Ok(vec![]);
    }
    let base = base_assignment(cost, n, m);
    let target = total_of(cost, m, &base);
    let size = n.min(m);

    // Lexicographic refinement: walk rows in order, fixing for each one the
    // smallest column (or no column) that still completes to the optimal
    // total. Completion totals of the same pair set are bit-identical sums,
    // so exact equality is the right test; if numeric noise ever breaks it,
    // fall back to the (optimal) base assignment. Feasibility guards keep
    // every sub-assignment exactly min-sized, so `min_cost` applies directly.
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(size);
    let mut used = vec![false; m];
    'rows: for r in 0..n {
        let remaining = size - fixed.len();
        if remaining == 0 {
            break;
        }
        let rows_left: Vec<usize> = (r + 1..n).collect();
        if rows_left.len() + 1 >= remaining {
            for c in 0..m {
                if used[c] {
                    continue;
                }
                let cols_left: Vec<usize> = (0..m).filter(|&j| !used[j] && j != c).collect();
                let mut sub = fixed.clone();
                sub.push((r, c));
                let cand = total_of(cost, m, &sub) + min_cost(cost, m, &rows_left, &cols_left);
                if cand == target {
                    fixed.push((r, c));
                    used[c] = true;
                    continue 'rows;
                }
            }
        }
        // leaving row r unmatched must still reach the optimum
        if rows_left.len() < remaining {
            return Ok(base); // numeric corner: keep the optimal base answer
        }
        let cols_left: Vec<usize> = (0..m).filter(|&j| !used[j]).collect();
        let skip = total_of(cost, m, &fixed) + min_cost(cost, m, &rows_left, &cols_left);
        if skip != target {
            return Ok(base);
        }
    }
    if fixed.len() == size {
        Ok(fixed)
    } else {
        Ok(base)
    }
}

/// Total cost of an assignment, summed in row order (the canonical order
/// used everywhere for exact comparisons).
pub fn assignment_cost(cost: &[f64], m: usize, pairs: &[(usize, usize)]) -> f64 {
    total_of(cost, m, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injections of min(n,m) rows/cols.
    fn brute_force(cost: &[f64], n: usize, m: usize) -> (f64, Vec<(usize, usize)>) {
        fn rec(
            cost: &[f64],
            n: usize,
            m: usize,
            r: usize,
            left: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<(usize, usize)>,
            best: &mut (f64, Vec<(usize, usize)>),
        ) {
            if left == 0 || r == n {
                if left == 0 {
                    let total: f64 = cur.iter().map(|&(i, j)| cost[i * m + j]).sum();
                    let better = total < best.0 || (total == best.0 && cur.as_slice() < best.1.as_slice());
                    if better {
                        *best = (total, cur.clone());
                    }
                }
                return;
            }
            if n - r > left {
                // option: leave row r unmatched
                rec(cost, n, m, r + 1, left, used, cur, best);
            }
            for c in 0..m {
                if !used[c] {
                    used[c] = true;
                    cur.push((r, c));
                    rec(cost, n, m, r + 1, left - 1, used, cur, best);
                    cur.pop();
                    used[c] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, vec![]);
        rec(cost, n, m, 0, n.min(m), &mut vec![false; m], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn spec_examples() {
        let pairs = hungarian_match(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&[1.0, 2.0, 2.0, 1.0], 2, &pairs), 2.0);

        assert_eq!(hungarian_match(&[7.0], 1, 1).unwrap(), vec![(0, 0)]);

        // all-zero ties break to the lexicographically smallest sequence
        assert_eq!(hungarian_match(&[0.0; 4], 2, 2).unwrap(), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(hungarian_match(&[f64::NAN, 0.0], 1, 2).is_err());
        assert!(hungarian_match(&[f64::INFINITY], 1, 1).is_err());
    }

    #[test]
    fn empty_dimensions() {
        assert_eq!(hungarian_match(&[], 0, 3).unwrap(), vec![]);
        assert_eq!(hungarian_match(&[], 2, 0).unwrap(), vec![]);
    }

    #[test]
    fn matches_exhaustive_enumeration_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(20240811);
        for trial in 0..1000 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(1..=6);
            let cost: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let got = hungarian_match(&cost, n, m).unwrap();
            let (best_total, best_pairs) = brute_force(&cost, n, m);
            let got_total = assignment_cost(&cost, m, &got);
            assert_eq!(got_total, best_total, "trial {trial}: {n}x{m}");
            assert_eq!(got, best_pairs, "trial {trial}: tie-break mismatch");
        }
    }

    #[test]
    fn integer_ties_all_lexicographic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=5);
            let cost: Vec<f64> = (0..n * m).map(|_| rng.gen_range(0..3) as f64).collect();
            let got = hungarian_match(&cost, n, m).unwrap();
            let (best_total, best_pairs) = brute_force(&cost, n, m);
            assert_eq!(assignment_cost(&cost, m, &got), best_total);
            assert_eq!(got, best_pairs);
        }
    }
}
