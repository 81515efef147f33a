//! Dynamic time warping for RFID-to-hand association.
//!
//! An RFID tag's signal strength falls as the tag moves away from the shelf
//! antenna, so the negated RSSI series of a departing item should warp onto
//! the hand-to-shelf distance series of whichever hand carried it. Both
//! series are resampled to a common support, z-normalized (making the
//! comparison invariant to each sensor's scale and offset), and compared
//! with a Sakoe-Chiba banded DTW; the association probability is
//! exp(-distance / sigma).

/// Points both series are resampled to before warping.
const RESAMPLE_POINTS: usize = 50;
/// Standard deviation floor guarding z-normalization of constant series.
const STD_FLOOR: f64 = 1e-9;

/// Banded DTW distance between two series.
///
/// Step cost is |a_i - b_j| with the three unit moves; a cell (i, j) is
/// reachable only if |i - j| stays within the band, whose half-width is
/// ceil(band_frac * max(n, m)) widened to at least |n - m| so the end cell
/// is always reachable. The accumulated cost is normalized by (n + m).
pub fn dtw_distance(a: &[f64], b: &[f64], band_frac: f64) -> f64 {
    let (n, m) = (a.len(), b.len());
    assert!(n >= 1 && m >= 1, "dtw needs non-empty series");
    let band = ((band_frac * n.max(m) as f64).ceil() as i64).max((n as i64 - m as i64).abs());

    let mut prev = vec![f64::INFINITY; m];
    let mut curr = vec![f64::INFINITY; m];
    for i in 0..n {
        curr.fill(f64::INFINITY);
        let lo = (i as i64 - band).max(0) as usize;
        let hi = ((i as i64 + band) as usize).min(m - 1);
        for j in lo..=hi {
            let cost = (a[i] - b[j]).abs();
            let best_prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 {
                    best = best.min(prev[j]);
                }
                if j > 0 {
                    best = best.min(curr[j - 1]);
                }
                if i > 0 && j > 0 {
                    best = best.min(prev[j - 1]);
                }
                best
            };
            curr[j] = cost + best_prev;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m - 1] / (n + m) as f64
}

/// Subtracts the mean and divides by the standard deviation, floored so a
/// constant series maps to all zeros instead of dividing by zero.
pub fn z_normalize(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    series.iter().map(|x| (x - mean) / std).collect()
}

/// Linear interpolation of a time series at `k` evenly spaced instants
/// spanning [t0, t1]. Samples must be time-sorted.
fn resample(series: &[(f64, f64)], t0: f64, t1: f64, k: usize) -> Vec<f64> {
    debug_assert!(series.len() >= 2);
    let mut out = Vec::with_capacity(k);
    let mut idx = 0usize;
    for step in 0..k {
        let t = t0 + (t1 - t0) * step as f64 / (k - 1) as f64;
        while idx + 2 < series.len() && series[idx + 1].0 <= t {
            idx += 1;
        }
        let (ta, va) = series[idx];
        let (tb, vb) = series[idx + 1];
        let v = if tb > ta {
            let frac = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
            va + frac * (vb - va)
        } else {
            va
        };
        out.push(v);
    }
    out
}

/// Probability that the hand whose shelf-distance series is `hand_dist`
/// moved the tag whose RSSI series is `rssi`. Returns None when either
/// series has fewer than two points or their time supports do not overlap.
pub fn rfid_association(
    rssi: &[(f64, f64)],
    hand_dist: &[(f64, f64)],
    sigma: f64,
    band_frac: f64,
) -> Option<f64> {
    if rssi.len() < 2 || hand_dist.len() < 2 {
        return None;
    }
    let t0 = rssi[0].0.max(hand_dist[0].0);
    let t1 = rssi[rssi.len() - 1].0.min(hand_dist[hand_dist.len() - 1].0);
    if t1 <= t0 {
        return None;
    }
    // Negate RSSI so both series grow as the item recedes from the shelf.
    let r: Vec<f64> = resample(rssi, t0, t1, RESAMPLE_POINTS).iter().map(|v| -v).collect();
    let h = resample(hand_dist, t0, t1, RESAMPLE_POINTS);
    let d = dtw_distance(&z_normalize(&r), &z_normalize(&h), band_frac);
    Some((-d / sigma).exp())
}
