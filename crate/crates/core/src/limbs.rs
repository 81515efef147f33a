//! Elbow-wrist association with color-constrained matching.
//!
//! Wrist keypoints blur into hand pixels, so each candidate carries its raw
//! pixel cluster and positions are re-estimated after medoid outlier
//! filtering. Association maximizes total alignment score subject to the
//! degree constraints and a body-coherence constraint: candidates cluster
//! into bodies by forearm color (single linkage, Euclidean histogram
//! distance below a threshold), and an elbow may only take a wrist from its
//! own body. When the color constraints rule out every pair, the
//! unconstrained matching is returned with each matched pair treated as its
//! own body, and the result is flagged.

use crate::hungarian::solve_max_weight;
use crate::trace::{ColorHistogram, LimbRecord};

/// Multiple of the percentile distance beyond which a point is an outlier.
/// The slack keeps the filter from nibbling at the cluster core, which is
/// what makes repeated filtering a no-op.
const OUTLIER_FACTOR: f64 = 2.0;

/// One elbow or wrist candidate: refined position, raw pixel cluster, and
/// the forearm-side color histogram used for body clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct LimbEndpoint {
    pub x: f64,
    pub y: f64,
    pub cluster: Vec<[f64; 2]>,
    pub hist: ColorHistogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimbCandidateSet {
    pub elbows: Vec<LimbEndpoint>,
    pub wrists: Vec<LimbEndpoint>,
    /// `align[i][j]`: alignment score between elbow i and wrist j.
    pub align: Vec<Vec<f64>>,
    /// Color distance below which two candidates may share a body.
    pub thresh: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimbAssignment {
    /// Selected (elbow, wrist) index pairs, sorted by elbow.
    pub pairs: Vec<(usize, usize)>,
    pub objective: f64,
    /// Set when the color constraints were structurally infeasible and the
    /// unconstrained matching was returned instead.
    pub fallback: bool,
}

impl LimbCandidateSet {
    pub fn from_record(record: &LimbRecord, thresh: f64) -> Self {
        let endpoint = |x: f64, y: f64, cluster: &[[f64; 2]], hist: &ColorHistogram| LimbEndpoint {
            x,
            y,
            cluster: cluster.to_vec(),
            hist: hist.clone(),
        };
        LimbCandidateSet {
            elbows: record.elbows.iter().map(|e| endpoint(e.x, e.y, &e.cluster, &e.hist)).collect(),
            wrists: record.wrists.iter().map(|w| endpoint(w.x, w.y, &w.cluster, &w.hist)).collect(),
            align: record.align.clone(),
            thresh,
        }
    }

    /// Forearm histogram of the (elbow i, wrist j) pairing: the normalized
    /// mean of the two endpoint histograms.
    pub fn pair_hist(&self, i: usize, j: usize) -> ColorHistogram {
        let counts: Vec<f64> = self.elbows[i]
            .hist
            .bins
            .iter()
            .zip(&self.wrists[j].hist.bins)
            .map(|(a, b)| a + b)
            .collect();
        ColorHistogram::from_counts(&counts)
    }
}

fn medoid_index(points: &[[f64; 2]]) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for (i, p) in points.iter().enumerate() {
        let sum: f64 = points
            .iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
            .sum();
        if sum < best.0 {
            best = (sum, i);
        }
    }
    best.1
}

/// Nearest-rank percentile of an unsorted sample.
fn nearest_rank(values: &mut [f64], percentile: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((percentile / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

/// Removes points implausibly far from the medoid of the cluster.
///
/// One pass drops points farther than `OUTLIER_FACTOR` times the given
/// percentile of the medoid-distance distribution; passes repeat until
/// nothing moves, which makes the whole operation idempotent. The medoid
/// itself always survives, so the result is never empty.
pub fn medoid_filter(points: &[[f64; 2]], percentile: f64) -> Vec<[f64; 2]> {
    assert!(!points.is_empty(), "medoid filter needs at least one point");
    let mut current = points.to_vec();
    loop {
        let m = current[medoid_index(&current)];
        let dists: Vec<f64> = current
            .iter()
            .map(|p| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt())
            .collect();
        let cutoff = OUTLIER_FACTOR * nearest_rank(&mut dists.clone(), percentile);
        let kept: Vec<[f64; 2]> = current
            .iter()
            .zip(&dists)
            .filter(|(_, d)| **d <= cutoff)
            .map(|(p, _)| *p)
            .collect();
        if kept.len() == current.len() {
            return current;
        }
        current = kept;
    }
}

/// Position of an endpoint after outlier filtering: the mean of the
/// surviving cluster pixels, or the raw keypoint when there is no cluster.
pub fn refined_position(endpoint: &LimbEndpoint, percentile: f64) -> (f64, f64) {
    if endpoint.cluster.is_empty() {
        return (endpoint.x, endpoint.y);
    }
    let kept = medoid_filter(&endpoint.cluster, percentile);
    let n = kept.len() as f64;
    (kept.iter().map(|p| p[0]).sum::<f64>() / n, kept.iter().map(|p| p[1]).sum::<f64>() / n)
}

/// Connected components over all candidates under the color-proximity
/// relation. Indices 0..E are elbows, E..E+W are wrists.
fn body_components(cands: &LimbCandidateSet) -> Vec<usize> {
    let hists: Vec<&ColorHistogram> = cands
        .elbows
        .iter()
        .map(|e| &e.hist)
        .chain(cands.wrists.iter().map(|w| &w.hist))
        .collect();
    let n = hists.len();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0usize;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut queue = vec![start];
        comp[start] = next;
        while let Some(u) = queue.pop() {
            for v in 0..n {
                if comp[v] == usize::MAX && hists[u].distance(hists[v]) < cands.thresh {
                    comp[v] = next;
                    queue.push(v);
                }
            }
        }
        next += 1;
    }
    comp
}

/// Solves the constrained elbow-wrist assignment.
pub fn associate_limbs(cands: &LimbCandidateSet) -> LimbAssignment {
    let (ne, nw) = (cands.elbows.len(), cands.wrists.len());
    debug_assert_eq!(cands.align.len(), ne);
    debug_assert!(cands.align.iter().all(|r| r.len() == nw));
    if ne == 0 || nw == 0 {
        return LimbAssignment { pairs: Vec::new(), objective: 0.0, fallback: false };
    }

    let comp = body_components(cands);
    let same_body = |i: usize, j: usize| comp[i] == comp[ne + j];

    let constrained: Vec<Vec<Option<f64>>> = (0..ne)
        .map(|i| (0..nw).map(|j| same_body(i, j).then(|| cands.align[i][j])).collect())
        .collect();

    let any_feasible = constrained.iter().flatten().any(|w| w.is_some());
    if any_feasible {
        let m = solve_max_weight(&constrained);
        return LimbAssignment { pairs: m.pairs, objective: m.objective, fallback: false };
    }

    // No pair survives the color constraint: fall back to the unconstrained
    // matching and treat each selected pair as its own body.
    let unconstrained: Vec<Vec<Option<f64>>> =
        cands.align.iter().map(|row| row.iter().map(|&a| Some(a)).collect()).collect();
    let m = solve_max_weight(&unconstrained);
    let fallback = !m.pairs.is_empty();
    LimbAssignment { pairs: m.pairs, objective: m.objective, fallback }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::HIST_BINS;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hist_peaked_at(bin: usize) -> ColorHistogram {
        let mut counts = vec![0.0; HIST_BINS];
        counts[bin] = 1.0;
        ColorHistogram::from_counts(&counts)
    }

    fn endpoint(x: f64, y: f64, color_bin: usize) -> LimbEndpoint {
        LimbEndpoint { x, y, cluster: Vec::new(), hist: hist_peaked_at(color_bin) }
    }

    #[test]
    fn identical_points_all_retained() {
        let points = vec![[5.0, 5.0]; 20];
        assert_eq!(medoid_filter(&points, 85.0), points);
    }

    #[test]
    fn single_point_retained() {
        assert_eq!(medoid_filter(&[[1.0, 2.0]], 85.0), vec![[1.0, 2.0]]);
    }

    #[test]
    fn far_outlier_removed_cluster_kept() {
        // 19 grid points within ~11 px of center, one outlier 1000 px away.
        let mut points = Vec::new();
        for gx in 0..5 {
            for gy in 0..4 {
                if points.len() < 19 {
                    points.push([100.0 + 5.0 * gx as f64, 100.0 + 5.0 * gy as f64]);
                }
            }
        }
        let outlier = [1100.0, 100.0];
        points.push(outlier);
        let kept = medoid_filter(&points, 85.0);
        assert!(!kept.contains(&outlier));
        assert_eq!(kept.len(), 19, "cluster should survive intact");
    }

    proptest! {
        #[test]
        fn medoid_filter_is_idempotent(
            points in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..40)
        ) {
            let points: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
            let once = medoid_filter(&points, 85.0);
            let twice = medoid_filter(&once, 85.0);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn medoid_filter_output_never_empty(
            points in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..40),
            percentile in 1.0f64..100.0
        ) {
            let points: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
            prop_assert!(!medoid_filter(&points, percentile).is_empty());
        }
    }

    #[test]
    fn single_compatible_pair_matches() {
        let cands = LimbCandidateSet {
            elbows: vec![endpoint(0.0, 0.0, 0)],
            wrists: vec![endpoint(10.0, 10.0, 0)],
            align: vec![vec![0.9]],
            thresh: 0.25,
        };
        let a = associate_limbs(&cands);
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert!((a.objective - 0.9).abs() < 1e-12);
        assert!(!a.fallback);
    }

    #[test]
    fn two_by_two_matches_enumeration() {
        let cands = LimbCandidateSet {
            elbows: vec![endpoint(0.0, 0.0, 0), endpoint(50.0, 0.0, 0)],
            wrists: vec![endpoint(0.0, 30.0, 0), endpoint(50.0, 30.0, 0)],
            align: vec![vec![0.9, 0.8], vec![0.7, 0.95]],
            thresh: 0.25,
        };
        let a = associate_limbs(&cands);
        // Matchings: {}, {(0,0)}, {(0,1)}, {(1,0)}, {(1,1)},
        // {(0,0),(1,1)} = 1.85, {(0,1),(1,0)} = 1.5. Best is 1.85.
        assert!((a.objective - 1.85).abs() < 1e-12);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn cross_body_pair_excluded_despite_high_alignment() {
        // Person red (bin 0), person blue (bin 9). The cross pairing
        // (elbow 0, wrist 1) has the best alignment but spans bodies.
        let cands = LimbCandidateSet {
            elbows: vec![endpoint(0.0, 0.0, 0), endpoint(200.0, 0.0, 9)],
            wrists: vec![endpoint(0.0, 30.0, 0), endpoint(200.0, 30.0, 9)],
            align: vec![vec![0.2, 0.99], vec![0.15, 0.9]],
            thresh: 0.25,
        };
        let a = associate_limbs(&cands);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert!((a.objective - 1.1).abs() < 1e-12);
        assert!(!a.fallback);
    }

    #[test]
    fn infeasible_colors_fall_back_unconstrained() {
        let cands = LimbCandidateSet {
            elbows: vec![endpoint(0.0, 0.0, 0)],
            wrists: vec![endpoint(10.0, 10.0, 9)],
            align: vec![vec![0.9]],
            thresh: 0.25,
        };
        let a = associate_limbs(&cands);
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert!((a.objective - 0.9).abs() < 1e-12);
        assert!(a.fallback);
    }

    #[test]
    fn empty_sides_yield_empty_assignment() {
        let cands = LimbCandidateSet {
            elbows: vec![endpoint(0.0, 0.0, 0)],
            wrists: Vec::new(),
            align: vec![Vec::new()],
            thresh: 0.25,
        };
        let a = associate_limbs(&cands);
        assert!(a.pairs.is_empty());
        assert_eq!(a.objective, 0.0);
    }

    /// Brute force over constraint-respecting matchings. Component labels
    /// are recomputed here by transitive closure, independently of the
    /// implementation's BFS.
    fn brute_force_constrained(cands: &LimbCandidateSet) -> f64 {
        let (ne, nw) = (cands.elbows.len(), cands.wrists.len());
        let n = ne + nw;
        let hists: Vec<&ColorHistogram> = cands
            .elbows
            .iter()
            .map(|e| &e.hist)
            .chain(cands.wrists.iter().map(|w| &w.hist))
            .collect();
        let mut adj = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                adj[i][j] = i == j || hists[i].distance(hists[j]) < cands.thresh;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    adj[i][j] |= adj[i][k] && adj[k][j];
                }
            }
        }
        fn rec(
            cands: &LimbCandidateSet,
            adj: &[Vec<bool>],
            i: usize,
            used: &mut Vec<bool>,
        ) -> f64 {
            if i == cands.elbows.len() {
                return 0.0;
            }
            let mut best = rec(cands, adj, i + 1, used);
            for j in 0..used.len() {
                if !used[j] && adj[i][cands.elbows.len() + j] {
                    used[j] = true;
                    best = best.max(cands.align[i][j] + rec(cands, adj, i + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cands, &adj, 0, &mut vec![false; nw])
    }

    fn brute_force_unconstrained(cands: &LimbCandidateSet) -> f64 {
        fn rec(align: &[Vec<f64>], i: usize, used: &mut Vec<bool>) -> f64 {
            if i == align.len() {
                return 0.0;
            }
            let mut best = rec(align, i + 1, used);
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(align[i][j] + rec(align, i + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        let nw = cands.wrists.len();
        rec(&cands.align, 0, &mut vec![false; nw])
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> LimbCandidateSet {
        let ne = rng.gen_range(1..=5);
        let nw = rng.gen_range(1..=5);
        let palette = [0usize, 3, 6, 9];
        let pick = |rng: &mut ChaCha8Rng| palette[rng.gen_range(0..palette.len())];
        LimbCandidateSet {
            elbows: (0..ne).map(|i| endpoint(i as f64 * 40.0, 0.0, pick(rng))).collect(),
            wrists: (0..nw).map(|j| endpoint(j as f64 * 40.0, 30.0, pick(rng))).collect(),
            align: (0..ne).map(|_| (0..nw).map(|_| rng.gen_range(0.0..1.0)).collect()).collect(),
            thresh: 0.25,
        }
    }

    #[test]
    fn objective_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let cands = random_instance(&mut rng);
            let got = associate_limbs(&cands);

            // Degree constraints always hold.
            let mut es = std::collections::BTreeSet::new();
            let mut ws = std::collections::BTreeSet::new();
            for &(i, j) in &got.pairs {
                assert!(es.insert(i) && ws.insert(j), "degree constraint violated");
            }

            let want = if got.fallback {
                brute_force_unconstrained(&cands)
            } else {
                brute_force_constrained(&cands)
            };
            assert!(
                (got.objective - want).abs() < 1e-9,
                "objective {} vs oracle {}",
                got.objective,
                want
            );
        }
    }

    #[test]
    fn adding_a_wrist_never_decreases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..300 {
            let mut cands = random_instance(&mut rng);
            // Guarantee an intra-body pair so neither run takes the
            // fallback path, whose semantics are deliberately different.
            let bin = { cands.elbows[0].hist.bins.iter().position(|&b| b > 0.0).unwrap() };
            cands.wrists[0] = endpoint(0.0, 30.0, bin);
            let before = associate_limbs(&cands);
            assert!(!before.fallback);

            let palette = [0usize, 3, 6, 9];
            let extra = endpoint(200.0, 30.0, palette[rng.gen_range(0..palette.len())]);
            cands.wrists.push(extra);
            for row in &mut cands.align {
                row.push(rng.gen_range(0.0..1.0));
            }
            let after = associate_limbs(&cands);
            assert!(!after.fallback);
            assert!(
                after.objective >= before.objective - 1e-12,
                "objective dropped from {} to {}",
                before.objective,
                after.objective
            );
        }
    }

    #[test]
    fn refined_position_uses_filtered_cluster() {
        let mut cluster: Vec<[f64; 2]> = (0..19)
            .map(|i| [100.0 + (i % 5) as f64, 200.0 + (i / 5) as f64])
            .collect();
        cluster.push([900.0, 200.0]);
        let ep = LimbEndpoint { x: 0.0, y: 0.0, cluster, hist: hist_peaked_at(0) };
        let (x, y) = refined_position(&ep, 85.0);
        assert!((100.0..106.0).contains(&x), "outlier should not drag x: {x}");
        assert!((200.0..204.0).contains(&y));
    }

    #[test]
    fn pair_hist_is_normalized_mean() {
        let cands = LimbCandidateSet {
            elbows: vec![endpoint(0.0, 0.0, 0)],
            wrists: vec![endpoint(0.0, 0.0, 2)],
            align: vec![vec![1.0]],
            thresh: 0.25,
        };
        let h = cands.pair_hist(0, 0);
        assert!((h.bins[0] - 0.5).abs() < 1e-12);
        assert!((h.bins[2] - 0.5).abs() < 1e-12);
        assert!((h.bins.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
