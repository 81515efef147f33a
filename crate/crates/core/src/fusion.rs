//! Sensor fusion: weight-scale event detection, per-sensor association
//! probabilities, composite fusion, and the capacity-constrained
//! hand-to-item assignment.
//!
//! Each sensor contributes a probability in [0, 1] that a hand took a
//! candidate item. The composite is a weighted sum renormalized over the
//! sensors that actually produced evidence, so an untagged item is judged
//! by vision and weight alone instead of being penalized for silence on
//! the RFID channel.

use crate::config::FusionConfig;
use crate::dtw;
use crate::hungarian;
use crate::proximity::ProximityEvent;
use crate::trace::{ColorHistogram, Hand, ItemType, RfidSample, HIST_BINS};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightEventKind {
    /// Trough: grams decreased, an item left the shelf.
    Removal,
    /// Peak: grams increased, an item was put back.
    Deposit,
}

/// One plateau-to-plateau transition on a scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEvent {
    pub scale_id: String,
    pub kind: WeightEventKind,
    pub t_s: f64,
    pub t_e: f64,
    /// Plateau grams immediately before the transition.
    pub w_s: f64,
    /// Plateau grams immediately after the transition.
    pub w_e: f64,
    pub magnitude: f64,
    /// High-frequency oscillation inside the transition: a press-and-release
    /// attack rather than a real pick or put.
    pub tampered: bool,
}

impl WeightEvent {
    pub fn interval(&self) -> (f64, f64) {
        (self.t_s, self.t_e)
    }
}

/// Centered median filter; the window shrinks symmetrically at the edges.
pub fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1);
    let half = window / 2;
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            let mut w: Vec<f64> = values[lo..hi].to_vec();
            w.sort_by(f64::total_cmp);
            w[w.len() / 2]
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Segments a scale series into stable plateaus separated by transitions
/// and turns each transition into a weight event.
///
/// A sample boundary is in transition when the medians of the trailing and
/// leading plateau windows differ by more than the plateau step. Tampered
/// transitions (zero-crossing rate above the bound) are emitted flagged;
/// clean transitions below the minimum magnitude are dropped as noise.
pub fn detect_weight_events(
    scale_id: &str,
    samples: &[(f64, f64)],
    cfg: &FusionConfig,
) -> Vec<WeightEvent> {
    if samples.len() < 2 {
        return Vec::new();
    }
    let times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let raw: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let filtered = median_filter(&raw, cfg.median_window);
    let n = samples.len();

    let window_before = |i: usize| -> Vec<f64> {
        let t = times[i];
        (0..=i)
            .rev()
            .take_while(|&j| times[j] > t - cfg.plateau_window_s)
            .map(|j| filtered[j])
            .collect()
    };
    let window_after = |i: usize| -> Vec<f64> {
        let t = times[i];
        (i + 1..n).take_while(|&j| times[j] <= t + cfg.plateau_window_s).map(|j| filtered[j]).collect()
    };

    let in_transition: Vec<bool> = (0..n)
        .map(|i| {
            let before = window_before(i);
            let after = window_after(i);
            if before.is_empty() || after.is_empty() {
                return false;
            }
            (median(&before) - median(&after)).abs() > cfg.plateau_step_g
        })
        .collect();

    // Maximal runs of transition boundaries; runs separated by less than a
    // plateau window never saw a stable plateau between them (the bounce's
    // recovery leg), so they merge into one transition.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if !in_transition[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && in_transition[i] {
            i += 1;
        }
        let end = i - 1;
        match runs.last_mut() {
            Some(last) if times[start] - times[last.1] < cfg.plateau_window_s => last.1 = end,
            _ => runs.push((start, end)),
        }
    }

    let mut events = Vec::new();
    for (start, end) in runs {
        let t_s = times[start];
        let t_e = if times[end] > t_s {
            times[end]
        } else if end + 1 < n {
            times[end + 1]
        } else {
            continue;
        };

        let before = window_before(start);
        let after = window_after(end);
        if before.is_empty() || after.is_empty() {
            continue;
        }
        let w_s = median(&before);
        let w_e = median(&after);
        let magnitude = (w_s - w_e).abs();

        // Zero-crossing rate of the raw signal around the transition's
        // range midline; a press-and-release attack oscillates, a real
        // pick or put crosses roughly once.
        let seg = &raw[start..=end];
        let (lo, hi) = seg.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let mid = (lo + hi) / 2.0;
        let mut crossings = 0u32;
        let mut prev_sign = 0i8;
        for &v in seg {
            let sign = if v > mid {
                1
            } else if v < mid {
                -1
            } else {
                prev_sign
            };
            if sign != 0 && prev_sign != 0 && sign != prev_sign {
                crossings += 1;
            }
            if sign != 0 {
                prev_sign = sign;
            }
        }
        let zcr = crossings as f64 / (t_e - t_s);
        let tampered = zcr > cfg.tamper_zcr_hz;

        if !tampered && magnitude < cfg.min_magnitude_g {
            continue;
        }
        events.push(WeightEvent {
            scale_id: scale_id.to_string(),
            kind: if w_e < w_s { WeightEventKind::Removal } else { WeightEventKind::Deposit },
            t_s,
            t_e,
            w_s,
            w_e,
            magnitude,
            tampered,
        });
    }
    events
}

/// Duration intersection-over-union of two intervals.
pub fn interval_association(d: (f64, f64), d_prime: (f64, f64)) -> f64 {
    let inter = (d.1.min(d_prime.1) - d.0.max(d_prime.0)).max(0.0);
    let union = (d.1.max(d_prime.1) - d.0.min(d_prime.0)).max(0.0);
    if union == 0.0 {
        // Two identical zero-length intervals.
        if d == d_prime {
            1.0
        } else {
            0.0
        }
    } else {
        inter / union
    }
}

/// Inverse-delta probability of each catalog type given an observed
/// magnitude; deltas are floored to keep an exact match finite.
pub fn weight_item_probability(magnitude: f64, catalog: &[ItemType], cfg: &FusionConfig) -> Vec<f64> {
    assert!(!catalog.is_empty(), "catalog must be non-empty");
    let inv: Vec<f64> = catalog
        .iter()
        .map(|it| 1.0 / (magnitude - it.weight_g).abs().max(cfg.delta_floor_g))
        .collect();
    let sum: f64 = inv.iter().sum();
    inv.into_iter().map(|v| v / sum).collect()
}

/// Per (proximity event, weight event, catalog type) probability: the
/// product of duration IoU and the inverse-delta item probability.
/// Tampered events contribute zeros.
pub fn weight_association(
    events: &[WeightEvent],
    proximity: &[ProximityEvent],
    catalog: &[ItemType],
    cfg: &FusionConfig,
) -> Vec<Vec<Vec<f64>>> {
    proximity
        .iter()
        .map(|p| {
            events
                .iter()
                .map(|e| {
                    if e.tampered {
                        return vec![0.0; catalog.len()];
                    }
                    let iou = interval_association(e.interval(), (p.start, p.finish));
                    weight_item_probability(e.magnitude, catalog, cfg)
                        .into_iter()
                        .map(|q| iou * q)
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RfidDirection {
    Departing,
    Returning,
}

/// A contiguous burst of RSSI readings for one tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfidEpisode {
    pub tag_id: String,
    /// (t, dBm), time-sorted.
    pub samples: Vec<(f64, f64)>,
    pub direction: RfidDirection,
}

impl RfidEpisode {
    pub fn interval(&self) -> (f64, f64) {
        (self.samples[0].0, self.samples[self.samples.len() - 1].0)
    }
}

/// Splits an antenna stream into per-tag episodes at gaps longer than
/// `gap_s`. Direction comes from the sign of the RSSI trend: weakening
/// signal means the tag is departing.
pub fn extract_episodes(samples: &[RfidSample], gap_s: f64) -> Vec<RfidEpisode> {
    let mut by_tag: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for s in samples {
        by_tag.entry(&s.tag_id).or_default().push((s.t, s.rssi_dbm));
    }
    let mut episodes = Vec::new();
    for (tag, mut series) in by_tag {
        series.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut run: Vec<(f64, f64)> = Vec::new();
        for point in series {
            if let Some(&(last_t, _)) = run.last() {
                if point.0 - last_t > gap_s {
                    push_episode(&mut episodes, tag, std::mem::take(&mut run));
                }
            }
            run.push(point);
        }
        push_episode(&mut episodes, tag, run);
    }
    episodes.sort_by(|a, b| {
        a.samples[0].0.total_cmp(&b.samples[0].0).then_with(|| a.tag_id.cmp(&b.tag_id))
    });
    episodes
}

fn push_episode(out: &mut Vec<RfidEpisode>, tag: &str, run: Vec<(f64, f64)>) {
    if run.len() < 2 {
        return;
    }
    // Least-squares slope of dBm over time.
    let n = run.len() as f64;
    let mean_t = run.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_v = run.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = run.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_v)).sum();
    let den: f64 = run.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let slope = if den == 0.0 { 0.0 } else { num / den };
    out.push(RfidEpisode {
        tag_id: tag.to_string(),
        samples: run,
        direction: if slope < 0.0 { RfidDirection::Departing } else { RfidDirection::Returning },
    });
}

/// Probability that this hand's motion generated the episode's RSSI trace.
pub fn rfid_hand_probability(
    episode: &RfidEpisode,
    hand_dist: &[(f64, f64)],
    cfg: &FusionConfig,
) -> Option<f64> {
    dtw::rfid_association(&episode.samples, hand_dist, cfg.dtw_sigma, cfg.dtw_band_frac)
}

/// Conventional RGB skin-color rule; the hand itself must not vote on the
/// item's identity.
pub fn is_skin_pixel(px: [u8; 3]) -> bool {
    let [r, g, b] = px;
    let (rf, gf, bf) = (r as i32, g as i32, b as i32);
    r > 95 && g > 40 && b > 20 && rf > gf && rf > bf && rf - gf.min(bf) > 15
}

/// Distance-weighted kNN over the shelf catalog's reference histograms.
#[derive(Debug, Clone)]
pub struct ShelfVisionClassifier {
    item_ids: Vec<String>,
    references: Vec<ColorHistogram>,
    k: usize,
}

impl ShelfVisionClassifier {
    pub fn from_catalog(catalog: &[ItemType], k: usize) -> Self {
        assert!(k >= 1 && !catalog.is_empty());
        ShelfVisionClassifier {
            item_ids: catalog.iter().map(|it| it.item_id.clone()).collect(),
            references: catalog.iter().map(|it| it.reference_hist.clone()).collect(),
            k,
        }
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Probability vector over catalog types for a hand-held item region.
    /// Skin pixels are filtered first; an empty remainder is uninformative
    /// and yields the uniform vector.
    pub fn classify_pixels(&self, pixels: &[[u8; 3]]) -> Vec<f64> {
        let object: Vec<[u8; 3]> =
            pixels.iter().copied().filter(|&p| !is_skin_pixel(p)).collect();
        if object.is_empty() {
            return vec![1.0 / self.references.len() as f64; self.references.len()];
        }
        self.classify_histogram(&ColorHistogram::from_pixels(&object))
    }

    /// Distance-weighted vote of the k nearest references, normalized to a
    /// probability vector over all catalog types.
    pub fn classify_histogram(&self, hist: &ColorHistogram) -> Vec<f64> {
        let n = self.references.len();
        let mut order: Vec<(f64, usize)> = self
            .references
            .iter()
            .enumerate()
            .map(|(i, r)| (hist.distance(r), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let k = self.k.min(n);
        let mut votes = vec![0.0; n];
        for &(d, i) in order.iter().take(k) {
            votes[i] += 1.0 / d.max(1e-9);
        }
        let sum: f64 = votes.iter().sum();
        votes.into_iter().map(|v| v / sum).collect()
    }
}

/// Identifies the proximity event a matrix row stands for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandKey {
    pub track_id: u64,
    pub hand: Hand,
    pub shopper_id: Option<String>,
}

/// One hypothesized unit of one catalog type moving in the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemInstance {
    pub item_id: String,
    pub capacity_per_hand: u32,
    pub kind: WeightEventKind,
    /// Time support of the evidence that spawned the instance.
    pub interval: (f64, f64),
}

/// Per-sensor association evidence for one fusion window. Absent entries
/// mean the sensor produced no evidence for that pair, which is different
/// from evidence of improbability.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssociationMatrix {
    pub hands: Vec<HandKey>,
    pub items: Vec<ItemInstance>,
    pub camera: Vec<Vec<Option<f64>>>,
    pub weight: Vec<Vec<Option<f64>>>,
    pub rfid: Vec<Vec<Option<f64>>>,
}

impl AssociationMatrix {
    pub fn empty() -> Self {
        AssociationMatrix {
            hands: Vec::new(),
            items: Vec::new(),
            camera: Vec::new(),
            weight: Vec::new(),
            rfid: Vec::new(),
        }
    }

    pub fn with_size(hands: Vec<HandKey>, items: Vec<ItemInstance>) -> Self {
        let rows = hands.len();
        let cols = items.len();
        AssociationMatrix {
            hands,
            items,
            camera: vec![vec![None; cols]; rows],
            weight: vec![vec![None; cols]; rows],
            rfid: vec![vec![None; cols]; rows],
        }
    }

    /// Checks every present probability lies in [0, 1].
    pub fn validate(&self) -> bool {
        [&self.camera, &self.weight, &self.rfid].iter().all(|m| {
            m.iter().flatten().flatten().all(|p| (0.0..=1.0).contains(p))
        })
    }

    /// Composite probabilities: weighted sum over present sensors with the
    /// weights renormalized to the present subset. A pair with no evidence
    /// at all has composite 0.
    pub fn fuse(&self, weights: [f64; 3]) -> Vec<Vec<f64>> {
        let rows = self.hands.len();
        let cols = self.items.len();
        let mut out = vec![vec![0.0; cols]; rows];
        for r in 0..rows {
            for c in 0..cols {
                let comps = [
                    (weights[0], self.camera[r][c]),
                    (weights[1], self.weight[r][c]),
                    (weights[2], self.rfid[r][c]),
                ];
                let total: f64 = comps.iter().filter(|(_, p)| p.is_some()).map(|(w, _)| w).sum();
                if total > 0.0 {
                    out[r][c] = comps
                        .iter()
                        .filter_map(|&(w, p)| p.map(|p| w * p))
                        .sum::<f64>()
                        / total;
                }
            }
        }
        out
    }
}

/// One selected (hand, item) pair with its evidence breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentPair {
    pub hand: usize,
    pub item: usize,
    pub p: f64,
    pub camera: Option<f64>,
    pub weight: Option<f64>,
    pub rfid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentResult {
    pub pairs: Vec<AssignmentPair>,
    pub objective: f64,
}

/// Maximizes the summed composite probability subject to each item going
/// to at most one hand and each hand taking at most `capacity_per_hand`
/// units of any one type. Hands expand into per-type capacity slots so the
/// program stays a plain max-weight bipartite matching.
pub fn solve_assignment(matrix: &AssociationMatrix, weights: [f64; 3]) -> AssignmentResult {
    let composite = matrix.fuse(weights);
    let rows = matrix.hands.len();
    let cols = matrix.items.len();
    if rows == 0 || cols == 0 {
        return AssignmentResult { pairs: Vec::new(), objective: 0.0 };
    }

    // Types present in the window, in first-appearance order.
    let mut type_ids: Vec<&str> = Vec::new();
    for it in &matrix.items {
        if !type_ids.contains(&it.item_id.as_str()) {
            type_ids.push(&it.item_id);
        }
    }
    let capacity_of = |type_id: &str| -> u32 {
        matrix
            .items
            .iter()
            .find(|it| it.item_id == type_id)
            .map(|it| it.capacity_per_hand.max(1))
            .unwrap_or(1)
    };

    // Slot r = (hand, type, copy); a slot accepts only items of its type.
    let mut slots: Vec<(usize, &str)> = Vec::new();
    for hand in 0..rows {
        for &tid in &type_ids {
            for _ in 0..capacity_of(tid) {
                slots.push((hand, tid));
            }
        }
    }
    let mut expanded = vec![vec![None; cols]; slots.len()];
    for (s, &(hand, tid)) in slots.iter().enumerate() {
        for (c, item) in matrix.items.iter().enumerate() {
            if item.item_id == tid {
                expanded[s][c] = Some(composite[hand][c]);
            }
        }
    }

    let matching = hungarian::solve_max_weight(&expanded);
    let mut pairs: Vec<AssignmentPair> = matching
        .pairs
        .iter()
        .map(|&(s, c)| {
            let hand = slots[s].0;
            AssignmentPair {
                hand,
                item: c,
                p: composite[hand][c],
                camera: matrix.camera[hand][c],
                weight: matrix.weight[hand][c],
                rfid: matrix.rfid[hand][c],
            }
        })
        .collect();
    pairs.sort_by(|a, b| a.hand.cmp(&b.hand).then(a.item.cmp(&b.item)));
    let objective = pairs.iter().map(|p| p.p).sum();
    AssignmentResult { pairs, objective }
}

/// A maximal set of temporally overlapping proximity events at one shelf.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionWindow {
    pub shelf_id: String,
    pub start: f64,
    pub finish: f64,
    pub events: Vec<ProximityEvent>,
}

/// Groups proximity events into fusion windows per shelf: events chain
/// into one window while each starts before the window's running finish.
pub fn form_windows(events: &[ProximityEvent]) -> Vec<FusionWindow> {
    let mut by_shelf: BTreeMap<&str, Vec<&ProximityEvent>> = BTreeMap::new();
    for e in events {
        by_shelf.entry(&e.shelf_id).or_default().push(e);
    }
    let mut windows = Vec::new();
    for (shelf, mut evs) in by_shelf {
        evs.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.finish.total_cmp(&b.finish)));
        let mut current: Vec<&ProximityEvent> = Vec::new();
        let mut finish = f64::NEG_INFINITY;
        for e in evs {
            if !current.is_empty() && e.start >= finish {
                windows.push(FusionWindow {
                    shelf_id: shelf.to_string(),
                    start: current[0].start,
                    finish,
                    events: current.drain(..).cloned().collect(),
                });
            }
            finish = finish.max(e.finish);
            current.push(e);
        }
        if !current.is_empty() {
            windows.push(FusionWindow {
                shelf_id: shelf.to_string(),
                start: current[0].start,
                finish,
                events: current.into_iter().cloned().collect(),
            });
        }
    }
    windows.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.shelf_id.cmp(&b.shelf_id)));
    windows
}
