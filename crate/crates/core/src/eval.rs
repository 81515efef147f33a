//! Scoring purchase assignments against ground truth.
//!
//! The unit of account is one (shopper, item type, pickup/dropoff) count
//! unit. Detected units match truth units with the same key, nearest in
//! time first; the leftovers become false positives and false negatives.
//! Billing-style aggregates (inventory loss, overcharge) work on net
//! per-type counts instead, because an item billed to the wrong shopper is
//! an overcharge, not a loss.

use crate::trace::{ActionKind, AdversarialKind, GroundTruthAction};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// One billing line produced by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurchaseRecord {
    pub shopper_id: String,
    pub shelf_id: String,
    pub item_id: String,
    pub kind: ActionKind,
    pub count: u32,
    /// Event time used for nearest-in-time matching.
    pub t: f64,
    /// Composite probability the assignment was made at.
    pub p: f64,
}

/// Run-level statistics the pipeline observed while producing the records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub tracks_created: u64,
    pub identity_switches: u64,
    /// Mean seconds from track creation to identity binding.
    pub identification_delay_s: Option<f64>,
    pub frames_processed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    /// Precision was reported as 1.0 because nothing was detected.
    pub zero_detection: bool,
}

impl ClassMetrics {
    fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let zero_detection = tp + fp == 0;
        ClassMetrics {
            tp,
            fp,
            fn_,
            precision: if zero_detection { 1.0 } else { tp as f64 / (tp + fp) as f64 },
            recall: if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 },
            zero_detection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trace_id: String,
    pub aggregate: ClassMetrics,
    pub non_adversarial: ClassMetrics,
    pub per_shopper: BTreeMap<String, ClassMetrics>,
    /// Keyed by adversarial class name, plus "none".
    pub per_adversarial: BTreeMap<String, ClassMetrics>,
    /// Identity switches per created track.
    pub identity_switch_rate: f64,
    pub identification_delay_s: Option<f64>,
    pub inventory_loss_ratio: f64,
    pub overcharge_rate: f64,
    /// Effective configuration echoed by the caller; null when not set.
    #[serde(default)]
    pub config_echo: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trace id mismatch: assignments from {assignments}, ground truth from {truth}")]
    TraceMismatch { assignments: String, truth: String },
}

fn class_name(kind: AdversarialKind) -> &'static str {
    match kind {
        AdversarialKind::None => "none",
        AdversarialKind::ItemSwitching => "item_switching",
        AdversarialKind::HandHiding => "hand_hiding",
        AdversarialKind::SensorTampering => "sensor_tampering",
    }
}

#[derive(Debug, Clone)]
struct Unit {
    shopper: String,
    item: String,
    kind: ActionKind,
    shelf: String,
    t: f64,
    class: AdversarialKind,
}

/// Scores purchase records against ground truth.
pub fn evaluate(
    trace_id: &str,
    records: &[PurchaseRecord],
    truth_trace_id: &str,
    truth: &[GroundTruthAction],
    stats: Option<&RunStats>,
) -> Result<EvalReport, EvalError> {
    if trace_id != truth_trace_id {
        return Err(EvalError::TraceMismatch {
            assignments: trace_id.to_string(),
            truth: truth_trace_id.to_string(),
        });
    }

    // Expand both sides into count units.
    let truth_units: Vec<Unit> = truth
        .iter()
        .flat_map(|a| {
            (0..a.count.max(1)).map(move |_| Unit {
                shopper: a.shopper_id.clone(),
                item: a.item_type.clone(),
                kind: a.kind,
                shelf: a.shelf_id.clone(),
                t: a.t,
                class: a.adversarial,
            })
        })
        .collect();
    let detected_units: Vec<Unit> = records
        .iter()
        .flat_map(|r| {
            (0..r.count.max(1)).map(move |_| Unit {
                shopper: r.shopper_id.clone(),
                item: r.item_id.clone(),
                kind: r.kind,
                shelf: r.shelf_id.clone(),
                t: r.t,
                class: AdversarialKind::None,
            })
        })
        .collect();

    // Nearest-in-time matching within each (shopper, item, kind) key.
    let mut truth_taken = vec![false; truth_units.len()];
    let mut det_order: Vec<usize> = (0..detected_units.len()).collect();
    det_order.sort_by(|&a, &b| detected_units[a].t.total_cmp(&detected_units[b].t).then(a.cmp(&b)));
    // matched[d] = Some(truth index)
    let mut matched: Vec<Option<usize>> = vec![None; detected_units.len()];
    for d in det_order {
        let du = &detected_units[d];
        let mut best: Option<(f64, usize)> = None;
        for (ti, tu) in truth_units.iter().enumerate() {
            if truth_taken[ti]
                || tu.shopper != du.shopper
                || tu.item != du.item
                || tu.kind != du.kind
            {
                continue;
            }
            let dist = (tu.t - du.t).abs();
            if best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, ti));
            }
        }
        if let Some((_, ti)) = best {
            truth_taken[ti] = true;
            matched[d] = Some(ti);
        }
    }

    // Attribute each unit to an adversarial class. Matched detections and
    // all truth units carry their own class; an unmatched detection
    // inherits the nearest-in-time truth action on its shelf.
    let attribute_fp = |du: &Unit| -> AdversarialKind {
        truth
            .iter()
            .filter(|a| a.shelf_id == du.shelf)
            .min_by(|a, b| (a.t - du.t).abs().total_cmp(&(b.t - du.t).abs()))
            .map(|a| a.adversarial)
            .unwrap_or(AdversarialKind::None)
    };

    #[derive(Default, Clone)]
    struct Counts {
        tp: u64,
        fp: u64,
        fn_: u64,
    }
    let mut total = Counts::default();
    let mut by_class: BTreeMap<&'static str, Counts> = BTreeMap::new();
    let mut by_shopper: BTreeMap<String, Counts> = BTreeMap::new();

    for (d, du) in detected_units.iter().enumerate() {
        match matched[d] {
            Some(ti) => {
                total.tp += 1;
                by_class.entry(class_name(truth_units[ti].class)).or_default().tp += 1;
                by_shopper.entry(du.shopper.clone()).or_default().tp += 1;
            }
            None => {
                total.fp += 1;
                by_class.entry(class_name(attribute_fp(du))).or_default().fp += 1;
                by_shopper.entry(du.shopper.clone()).or_default().fp += 1;
            }
        }
    }
    for (ti, tu) in truth_units.iter().enumerate() {
        if !truth_taken[ti] {
            total.fn_ += 1;
            by_class.entry(class_name(tu.class)).or_default().fn_ += 1;
            by_shopper.entry(tu.shopper.clone()).or_default().fn_ += 1;
        }
    }

    let aggregate = ClassMetrics::from_counts(total.tp, total.fp, total.fn_);
    let non_adv = by_class.get("none").cloned().unwrap_or_default();
    let non_adversarial = ClassMetrics::from_counts(non_adv.tp, non_adv.fp, non_adv.fn_);
    let per_adversarial: BTreeMap<String, ClassMetrics> = by_class
        .iter()
        .map(|(k, c)| (k.to_string(), ClassMetrics::from_counts(c.tp, c.fp, c.fn_)))
        .collect();
    let per_shopper: BTreeMap<String, ClassMetrics> = by_shopper
        .iter()
        .map(|(k, c)| (k.clone(), ClassMetrics::from_counts(c.tp, c.fp, c.fn_)))
        .collect();

    // Net billing aggregates. Inventory loss: net units that left shelves
    // per truth but were billed to nobody. Overcharge: net units billed to
    // a shopper beyond what that shopper actually took.
    let net = |kind: ActionKind| if kind == ActionKind::Pickup { 1i64 } else { -1i64 };
    let mut truth_net_by_type: BTreeMap<&str, i64> = BTreeMap::new();
    let mut truth_net_by_shopper_type: BTreeMap<(&str, &str), i64> = BTreeMap::new();
    for a in truth {
        let delta = net(a.kind) * a.count.max(1) as i64;
        *truth_net_by_type.entry(&a.item_type).or_insert(0) += delta;
        *truth_net_by_shopper_type.entry((&a.shopper_id, &a.item_type)).or_insert(0) += delta;
    }
    let mut billed_net_by_type: BTreeMap<&str, i64> = BTreeMap::new();
    let mut billed_net_by_shopper_type: BTreeMap<(&str, &str), i64> = BTreeMap::new();
    for r in records {
        let delta = net(r.kind) * r.count.max(1) as i64;
        *billed_net_by_type.entry(&r.item_id).or_insert(0) += delta;
        *billed_net_by_shopper_type.entry((&r.shopper_id, &r.item_id)).or_insert(0) += delta;
    }

    let taken_total: i64 = truth_net_by_type.values().map(|&v| v.max(0)).sum();
    let unbilled: i64 = truth_net_by_type
        .iter()
        .map(|(ty, &t_net)| {
            let billed = billed_net_by_type.get(ty).copied().unwrap_or(0).max(0);
            (t_net.max(0) - billed).max(0)
        })
        .sum();
    let inventory_loss_ratio =
        if taken_total == 0 { 0.0 } else { unbilled as f64 / taken_total as f64 };

    let billed_total: i64 = billed_net_by_shopper_type.values().map(|&v| v.max(0)).sum();
    let overbilled: i64 = billed_net_by_shopper_type
        .iter()
        .map(|(key, &b_net)| {
            let took = truth_net_by_shopper_type.get(key).copied().unwrap_or(0).max(0);
            (b_net.max(0) - took).max(0)
        })
        .sum();
    let overcharge_rate =
        if billed_total == 0 { 0.0 } else { overbilled as f64 / billed_total as f64 };

    let (identity_switch_rate, identification_delay_s) = match stats {
        Some(s) if s.tracks_created > 0 => {
            (s.identity_switches as f64 / s.tracks_created as f64, s.identification_delay_s)
        }
        Some(s) => (0.0, s.identification_delay_s),
        None => (0.0, None),
    };

    Ok(EvalReport {
        trace_id: trace_id.to_string(),
        aggregate,
        non_adversarial,
        per_shopper,
        per_adversarial,
        identity_switch_rate,
        identification_delay_s,
        inventory_loss_ratio,
        overcharge_rate,
        config_echo: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth_action(shopper: &str, item: &str, t: f64) -> GroundTruthAction {
        GroundTruthAction {
            shopper_id: shopper.to_string(),
            shelf_id: "shelf0".to_string(),
            item_type: item.to_string(),
            count: 1,
            kind: ActionKind::Pickup,
            adversarial: AdversarialKind::None,
            t,
        }
    }

    fn record(shopper: &str, item: &str, t: f64) -> PurchaseRecord {
        PurchaseRecord {
            shopper_id: shopper.to_string(),
            shelf_id: "shelf0".to_string(),
            item_id: item.to_string(),
            kind: ActionKind::Pickup,
            count: 1,
            t,
            p: 0.9,
        }
    }

    #[test]
    fn worked_example_recall_two_thirds_precision_half() {
        let truth =
            vec![truth_action("s1", "a", 1.0), truth_action("s1", "b", 2.0), truth_action("s1", "c", 3.0)];
        let detected = vec![
            record("s1", "a", 1.1),
            record("s1", "b", 2.1),
            record("s1", "d", 4.0),
            record("s1", "e", 5.0),
        ];
        let r = evaluate("t", &detected, "t", &truth, None).unwrap();
        assert_eq!((r.aggregate.tp, r.aggregate.fp, r.aggregate.fn_), (2, 2, 1));
        assert!((r.aggregate.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.aggregate.precision - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_detection_scores_one() {
        let truth = vec![truth_action("s1", "a", 1.0), truth_action("s2", "b", 2.0)];
        let detected = vec![record("s1", "a", 1.0), record("s2", "b", 2.0)];
        let r = evaluate("t", &detected, "t", &truth, None).unwrap();
        assert_eq!(r.aggregate.precision, 1.0);
        assert_eq!(r.aggregate.recall, 1.0);
        assert_eq!(r.inventory_loss_ratio, 0.0);
        assert_eq!(r.overcharge_rate, 0.0);
    }

    #[test]
    fn zero_detection_reports_flagged_precision_one() {
        let truth = vec![truth_action("s1", "a", 1.0)];
        let r = evaluate("t", &[], "t", &truth, None).unwrap();
        assert_eq!(r.aggregate.precision, 1.0);
        assert!(r.aggregate.zero_detection);
        assert_eq!(r.aggregate.recall, 0.0);
        assert!((r.inventory_loss_ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trace_mismatch_is_an_error() {
        assert!(evaluate("t1", &[], "t2", &[], None).is_err());
    }

    #[test]
    fn relabeling_shoppers_consistently_preserves_metrics() {
        let truth = vec![
            truth_action("s1", "a", 1.0),
            truth_action("s2", "b", 2.0),
            truth_action("s2", "c", 3.0),
        ];
        let detected =
            vec![record("s1", "a", 1.0), record("s2", "b", 2.0), record("s2", "d", 3.0)];
        let base = evaluate("t", &detected, "t", &truth, None).unwrap();

        let relabel = |s: &str| -> String {
            match s {
                "s1" => "zz9".to_string(),
                "s2" => "aa0".to_string(),
                other => other.to_string(),
            }
        };
        let truth2: Vec<GroundTruthAction> = truth
            .iter()
            .map(|a| GroundTruthAction { shopper_id: relabel(&a.shopper_id), ..a.clone() })
            .collect();
        let detected2: Vec<PurchaseRecord> = detected
            .iter()
            .map(|r| PurchaseRecord { shopper_id: relabel(&r.shopper_id), ..r.clone() })
            .collect();
        let renamed = evaluate("t", &detected2, "t", &truth2, None).unwrap();
        assert_eq!(base.aggregate, renamed.aggregate);
        assert_eq!(base.inventory_loss_ratio, renamed.inventory_loss_ratio);
        assert_eq!(base.overcharge_rate, renamed.overcharge_rate);
        assert_eq!(
            base.per_shopper.get("s1"),
            renamed.per_shopper.get("zz9"),
        );
    }

    #[test]
    fn wrong_shopper_is_overcharge_not_inventory_loss() {
        // s1 took the item; the system billed s2. The store gets paid
        // (no loss) but s2 is overcharged.
        let truth = vec![truth_action("s1", "a", 1.0)];
        let detected = vec![record("s2", "a", 1.0)];
        let r = evaluate("t", &detected, "t", &truth, None).unwrap();
        assert_eq!(r.inventory_loss_ratio, 0.0);
        assert!((r.overcharge_rate - 1.0).abs() < 1e-15);
        assert_eq!(r.aggregate.tp, 0);
    }

    #[test]
    fn missed_pickup_is_inventory_loss() {
        let truth = vec![truth_action("s1", "a", 1.0), truth_action("s1", "b", 2.0)];
        let detected = vec![record("s1", "a", 1.0)];
        let r = evaluate("t", &detected, "t", &truth, None).unwrap();
        assert!((r.inventory_loss_ratio - 0.5).abs() < 1e-15);
        assert_eq!(r.overcharge_rate, 0.0);
    }

    #[test]
    fn dropoff_cancels_pickup_in_net_billing() {
        // Shopper picks up then returns the item; nothing should be billed
        // or counted as taken.
        let mut pick = truth_action("s1", "a", 1.0);
        pick.count = 1;
        let mut drop = truth_action("s1", "a", 5.0);
        drop.kind = ActionKind::Dropoff;
        let truth = vec![pick, drop];
        let mut d1 = record("s1", "a", 1.0);
        d1.kind = ActionKind::Pickup;
        let mut d2 = record("s1", "a", 5.0);
        d2.kind = ActionKind::Dropoff;
        let r = evaluate("t", &[d1, d2], "t", &truth, None).unwrap();
        assert_eq!(r.aggregate.tp, 2);
        assert_eq!(r.inventory_loss_ratio, 0.0);
        assert_eq!(r.overcharge_rate, 0.0);
    }

    #[test]
    fn adversarial_breakdown_attributes_by_class() {
        let mut hidden = truth_action("s1", "a", 1.0);
        hidden.adversarial = AdversarialKind::HandHiding;
        let clean = truth_action("s1", "b", 5.0);
        let truth = vec![hidden, clean];
        // The clean action is detected; the hand-hiding one is missed.
        let detected = vec![record("s1", "b", 5.0)];
        let r = evaluate("t", &detected, "t", &truth, None).unwrap();
        let hh = &r.per_adversarial["hand_hiding"];
        assert_eq!((hh.tp, hh.fn_), (0, 1));
        let none = &r.per_adversarial["none"];
        assert_eq!((none.tp, none.fn_), (1, 0));
        assert_eq!(r.non_adversarial.recall, 1.0);
        assert!((r.aggregate.recall - 0.5).abs() < 1e-15);
    }

    #[test]
    fn counts_expand_into_units() {
        let mut a = truth_action("s1", "a", 1.0);
        a.count = 3;
        let mut d = record("s1", "a", 1.0);
        d.count = 2;
        let r = evaluate("t", &[d], "t", &[a], None).unwrap();
        assert_eq!((r.aggregate.tp, r.aggregate.fp, r.aggregate.fn_), (2, 0, 1));
        assert!((r.inventory_loss_ratio - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stats_flow_into_rates() {
        let stats = RunStats {
            tracks_created: 4,
            identity_switches: 1,
            identification_delay_s: Some(0.8),
            frames_processed: 100,
        };
        let r = evaluate("t", &[], "t", &[], Some(&stats)).unwrap();
        assert!((r.identity_switch_rate - 0.25).abs() < 1e-15);
        assert_eq!(r.identification_delay_s, Some(0.8));
    }
}
