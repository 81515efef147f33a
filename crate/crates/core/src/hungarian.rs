//! Max-weight bipartite matching with forbidden pairs.
//!
//! One solver backs three call sites: skeleton-to-track assignment,
//! elbow-wrist association, and the hand-to-item assignment program. All of
//! them need partial matchings (leaving a vertex unmatched is always
//! allowed), so the square matrix handed to the O(n^3) Hungarian core is the
//! input padded with zero-weight dummy rows and columns: any partial matching
//! of the real graph extends to a perfect matching of the padded one at equal
//! objective, and vice versa.

/// A solved matching. Pairs are (row, col), sorted by row, and contain only
/// pairs that carry strictly positive weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub objective: f64,
}

impl Matching {
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|(_, c)| *c)
    }

    pub fn row_of(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, c)| *c == col).map(|(r, _)| *r)
    }
}

/// Maximizes total weight over partial matchings. `weights[i][j]` is `None`
/// for a forbidden pair. Negative-weight pairs are feasible but can never be
/// part of an optimum, so they are equivalent to forbidden.
///
/// Weights must be finite. Rows may have differing lengths only if the
/// matrix is empty; otherwise all rows must share the column count.
pub fn solve_max_weight(weights: &[Vec<Option<f64>>]) -> Matching {
    let n = weights.len();
    let m = weights.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return Matching { pairs: Vec::new(), objective: 0.0 };
    }
    debug_assert!(weights.iter().all(|r| r.len() == m));
    debug_assert!(weights.iter().flatten().flatten().all(|w| w.is_finite()));

    // Padded square matrix: real rows then m dummy rows, real cols then n
    // dummy cols. Dummy cells and forbidden/negative cells cost 0.
    let size = n + m;
    let mut cost = vec![vec![0.0f64; size]; m + n];
    for (i, row) in weights.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            if let Some(w) = w {
                if *w > 0.0 {
                    cost[i][j] = -w;
                }
            }
        }
    }

    let assignment = min_cost_perfect(&cost);
    let mut pairs: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < n && j < m)
        .filter(|&(i, &j)| matches!(weights[i][j], Some(w) if w > 0.0))
        .map(|(i, &j)| (i, j))
        .collect();
    pairs.sort_unstable();
    let objective = pairs.iter().map(|&(i, j)| weights[i][j].unwrap()).sum();
    Matching { pairs, objective }
}

/// Maximum-cardinality matching over the feasible pairs, breaking ties by
/// minimum total cost. Costs must be finite and non-negative.
pub fn solve_min_cost(costs: &[Vec<Option<f64>>]) -> Matching {
    let n = costs.len();
    let m = costs.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return Matching { pairs: Vec::new(), objective: 0.0 };
    }
    debug_assert!(costs.iter().flatten().flatten().all(|c| c.is_finite() && *c >= 0.0));
    let max_cost = costs.iter().flatten().flatten().fold(0.0f64, |a, &c| a.max(c));
    // Large enough that one extra pair always beats any cost saving, making
    // the max-weight solution cardinality-first.
    let big = (n.min(m) as f64 + 1.0) * max_cost + 1.0;
    let weights: Vec<Vec<Option<f64>>> = costs
        .iter()
        .map(|row| row.iter().map(|c| c.map(|c| big - c)).collect())
        .collect();
    let matching = solve_max_weight(&weights);
    let objective = matching.pairs.iter().map(|&(i, j)| costs[i][j].unwrap()).sum();
    Matching { pairs: matching.pairs, objective }
}

/// Jonker-Volgenant style Hungarian core: minimum-cost perfect matching on a
/// square matrix, returning the column assigned to each row.
fn min_cost_perfect(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials; p[j] = row matched to column j, 0 = free.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
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
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive maximum over all partial matchings, recursing row by row.
    fn brute_force(weights: &[Vec<Option<f64>>]) -> f64 {
        fn rec(weights: &[Vec<Option<f64>>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == weights.len() {
                return 0.0;
            }
            let mut best = rec(weights, row + 1, used);
            for j in 0..used.len() {
                if used[j] {
                    continue;
                }
                if let Some(w) = weights[row][j] {
                    used[j] = true;
                    let cand = w + rec(weights, row + 1, used);
                    used[j] = false;
                    best = best.max(cand);
                }
            }
            best
        }
        let m = weights.first().map_or(0, |r| r.len());
        rec(weights, 0, &mut vec![false; m])
    }

    fn assert_valid(weights: &[Vec<Option<f64>>], m: &Matching) {
        let mut rows = std::collections::BTreeSet::new();
        let mut cols = std::collections::BTreeSet::new();
        for &(i, j) in &m.pairs {
            assert!(rows.insert(i), "row {i} used twice");
            assert!(cols.insert(j), "col {j} used twice");
            assert!(weights[i][j].is_some(), "forbidden pair ({i},{j}) selected");
        }
    }

    #[test]
    fn empty_matrix() {
        let m = solve_max_weight(&[]);
        assert!(m.pairs.is_empty());
        assert_eq!(m.objective, 0.0);
    }

    #[test]
    fn single_pair() {
        let m = solve_max_weight(&[vec![Some(0.9)]]);
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert!((m.objective - 0.9).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_prefers_diagonal() {
        let w = vec![vec![Some(0.9), Some(0.4)], vec![Some(0.5), Some(0.8)]];
        let m = solve_max_weight(&w);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert!((m.objective - 1.7).abs() < 1e-12);
    }

    #[test]
    fn forbidden_pairs_never_selected() {
        let w = vec![vec![None, Some(0.1)], vec![None, Some(0.9)]];
        let m = solve_max_weight(&w);
        assert_valid(&w, &m);
        assert!((m.objective - 0.9).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_left_unmatched() {
        let w = vec![vec![Some(-1.0), Some(-0.5)]];
        let m = solve_max_weight(&w);
        assert!(m.pairs.is_empty());
        assert_eq!(m.objective, 0.0);
    }

    #[test]
    fn rectangular_shapes() {
        let wide = vec![vec![Some(1.0), Some(2.0), Some(3.0)]];
        assert_eq!(solve_max_weight(&wide).pairs, vec![(0, 2)]);
        let tall = vec![vec![Some(1.0)], vec![Some(2.0)], vec![Some(3.0)]];
        assert_eq!(solve_max_weight(&tall).pairs, vec![(2, 0)]);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=5);
            let w: Vec<Vec<Option<f64>>> = (0..n)
                .map(|_| {
                    (0..m)
                        .map(|_| {
                            if rng.gen_bool(0.2) {
                                None
                            } else {
                                Some(rng.gen_range(-0.2f64..1.0))
                            }
                        })
                        .collect()
                })
                .collect();
            let got = solve_max_weight(&w);
            assert_valid(&w, &got);
            let want = brute_force(&w);
            assert!(
                (got.objective - want).abs() < 1e-9,
                "objective {} vs brute force {} on {w:?}",
                got.objective,
                want
            );
        }
    }

    #[test]
    fn min_cost_is_cardinality_first() {
        // Diagonal costs 0 exist, but only an off-diagonal choice matches
        // both rows; cardinality must win over cost.
        let c = vec![vec![Some(0.0), Some(5.0)], vec![None, Some(4.0)]];
        let m = solve_min_cost(&c);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert!((m.objective - 4.0).abs() < 1e-12);
    }

    #[test]
    fn min_cost_picks_cheapest_among_full_matchings() {
        let c = vec![vec![Some(1.0), Some(10.0)], vec![Some(10.0), Some(2.0)]];
        let m = solve_min_cost(&c);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert!((m.objective - 3.0).abs() < 1e-12);
    }

    #[test]
    fn min_cost_zero_cost_pairs_are_reported() {
        let c = vec![vec![Some(0.0)]];
        let m = solve_min_cost(&c);
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.objective, 0.0);
    }

    #[test]
    fn min_cost_matches_exhaustive_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(1..=4);
            let c: Vec<Vec<Option<f64>>> = (0..n)
                .map(|_| {
                    (0..m)
                        .map(|_| if rng.gen_bool(0.3) { None } else { Some(rng.gen_range(0.0f64..10.0)) })
                        .collect()
                })
                .collect();
            let got = solve_min_cost(&c);

            // Exhaustive search: maximize cardinality, then minimize cost.
            fn rec(
                c: &[Vec<Option<f64>>],
                row: usize,
                used: &mut Vec<bool>,
                count: usize,
                cost: f64,
                best: &mut (usize, f64),
            ) {
                if row == c.len() {
                    if count > best.0 || (count == best.0 && cost < best.1) {
                        *best = (count, cost);
                    }
                    return;
                }
                rec(c, row + 1, used, count, cost, best);
                for j in 0..used.len() {
                    if !used[j] {
                        if let Some(w) = c[row][j] {
                            used[j] = true;
                            rec(c, row + 1, used, count + 1, cost + w, best);
                            used[j] = false;
                        }
                    }
                }
            }
            let mut best = (0usize, f64::INFINITY);
            rec(&c, 0, &mut vec![false; m], 0, 0.0, &mut best);
            if best.0 == 0 {
                best.1 = 0.0;
            }
            assert_eq!(got.pairs.len(), best.0, "cardinality on {c:?}");
            assert!((got.objective - best.1).abs() < 1e-9, "cost {} vs {} on {c:?}", got.objective, best.1);
        }
    }
}
