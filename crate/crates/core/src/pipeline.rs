//! End-to-end run: frames, scales, and RFID in; purchase records out.
//!
//! The stage order is identity, tracking, limb refinement, proximity,
//! then per-window fusion. Sensor masking happens here rather than inside
//! the fusion math: a masked sensor contributes no evidence and spawns no
//! item instances, so an ablated run behaves like a store that never had
//! the hardware.

use crate::config::PipelineConfig;
use crate::eval::{PurchaseRecord, RunStats};
use crate::fusion::{
    self, AssignmentPair, AssociationMatrix, HandKey, ItemInstance, RfidEpisode,
    ShelfVisionClassifier, WeightEvent, WeightEventKind,
};
use crate::identity::FaceRegistry;
use crate::limbs::{associate_limbs, refined_position, LimbCandidateSet};
use crate::proximity::{point_polygon_distance, GroundPlaneModel, ProximityDetector, ProximityEvent};
use crate::tracking::Tracker;
use crate::trace::{
    ActionKind, Hand, JointName, Keypoint, LimbSide, Shelf, Skeleton, Trace,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Quiet period (seconds) between a tag's bursts that separates episodes.
const RFID_GAP_S: f64 = 1.0;
/// Sensor evidence is searched this far (seconds) beyond window bounds.
const WINDOW_PAD_S: f64 = 0.5;
/// Carry onsets and offsets count toward an instance within this slack.
const CARRY_PAD_S: f64 = 1.5;
/// Fewer carried pixels than this cannot open a vision-only instance.
const MIN_CARRY_PIXELS: usize = 20;
/// Sample gap (seconds) that splits one hand's carry into two segments.
const CARRY_GAP_S: f64 = 0.4;
/// Length of the onset and offset slices taken from a carry segment.
const CARRY_EDGE_S: f64 = 1.2;
/// Half-width of the interval a rescue instance claims around a carry
/// onset or offset.
const CARRY_MOMENT_HALF_S: f64 = 0.6;
/// Shortest carry segment whose edges count as evidence. Shorter runs are
/// matching debris from a briefly lost skeleton, not a held item.
const MIN_CARRY_SPAN_S: f64 = 0.45;

/// Which sensing modalities participate in association.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorMask {
    pub vision: bool,
    pub weight: bool,
    pub rfid: bool,
}

impl Default for SensorMask {
    fn default() -> Self {
        SensorMask { vision: true, weight: true, rfid: true }
    }
}

impl SensorMask {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn none() -> Self {
        SensorMask { vision: false, weight: false, rfid: false }
    }

    pub fn any(&self) -> bool {
        self.vision || self.weight || self.rfid
    }

    /// Short form like "V+W+R" or "W".
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.vision {
            parts.push("V");
        }
        if self.weight {
            parts.push("W");
        }
        if self.rfid {
            parts.push("R");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub mask: SensorMask,
    /// Frames are decimated to at most this rate before processing.
    pub fps_limit: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { mask: SensorMask::all(), fps_limit: None }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("all sensors are masked; nothing can be associated")]
    AllSensorsMasked,
    #[error("fps limit must be positive, got {0}")]
    BadFpsLimit(f64),
}

/// One fusion window's outcome, kept for the assignments report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowOutcome {
    pub shelf_id: String,
    pub start: f64,
    pub finish: f64,
    pub hands: Vec<HandKey>,
    pub items: Vec<ItemInstance>,
    pub pairs: Vec<AssignmentPair>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutput {
    pub trace_id: String,
    pub records: Vec<PurchaseRecord>,
    pub stats: RunStats,
    pub windows: Vec<WindowOutcome>,
}

/// Spreads per-camera track ids apart so merged maps cannot collide.
const TRACK_ID_STRIDE: u64 = 1_000_000;

#[derive(Debug, Default, Clone)]
struct TrackFinal {
    identity: Option<String>,
    created_t: f64,
    bound_t: Option<f64>,
    switches: u64,
}

#[derive(Debug, Default, Clone)]
struct AnkleMemory {
    last_ankle: Option<(f64, f64)>,
    last_neck: Option<(f64, f64)>,
}

/// One contiguous run of carried-item pixels in a hand. Only the ends
/// matter for association: the onset is when the item entered the hand,
/// the offset when it left. Pixels from the middle of a long carry say
/// nothing about any shelf interaction.
struct CarrySegment {
    t0: f64,
    t1: f64,
    onset: Vec<[u8; 3]>,
    offset: Vec<[u8; 3]>,
}

/// A candidate unit of one item type inside a window, with handles back to
/// the evidence that spawned it.
struct InstanceDetail {
    type_idx: usize,
    kind: WeightEventKind,
    interval: (f64, f64),
    /// Per-unit magnitude of the weight event behind this unit.
    unit_magnitude: Option<f64>,
    /// Index into the shelf's episode list.
    episode: Option<usize>,
}

pub fn run_pipeline(
    trace: &Trace,
    registry: &FaceRegistry,
    config: &PipelineConfig,
    options: &RunOptions,
) -> Result<PipelineOutput, PipelineError> {
    if !options.mask.any() {
        return Err(PipelineError::AllSensorsMasked);
    }
    if let Some(fps) = options.fps_limit {
        if !(fps > 0.0) {
            return Err(PipelineError::BadFpsLimit(fps));
        }
    }
    // A sensor participates only when unmasked and carrying fusion weight,
    // so masking a zero-weight sensor cannot change the outcome.
    let base_weights = config.fusion_weights();
    let active_v = options.mask.vision && base_weights[0] > 0.0;
    let active_w = options.mask.weight && base_weights[1] > 0.0;
    let active_r = options.mask.rfid && base_weights[2] > 0.0;
    let weights = [
        if active_v { base_weights[0] } else { 0.0 },
        if active_w { base_weights[1] } else { 0.0 },
        if active_r { base_weights[2] } else { 0.0 },
    ];

    let mut stats = RunStats::default();
    let mut prox_events: Vec<ProximityEvent> = Vec::new();
    let mut finals: BTreeMap<u64, TrackFinal> = BTreeMap::new();
    // (track, hand, shelf) -> (t, distance) series feeding the DTW check.
    let mut dist_series: BTreeMap<(u64, Hand, String), Vec<(f64, f64)>> = BTreeMap::new();
    // (track, hand) -> carried-item pixels over time.
    let mut carries: BTreeMap<(u64, Hand), Vec<(f64, Vec<[u8; 3]>)>> = BTreeMap::new();

    for (cam_idx, (camera_id, recs)) in trace.frames.iter().enumerate() {
        let Some(cam) = trace.store.camera(camera_id) else { continue };
        let shelves: Vec<&Shelf> =
            trace.store.shelves.iter().filter(|s| &s.camera_id == camera_id).collect();
        let shelves_owned: Vec<Shelf> = shelves.iter().map(|&s| s.clone()).collect();
        let model = GroundPlaneModel::from_camera(cam);
        let shelf_polys_px: Vec<Vec<(f64, f64)>> = shelves
            .iter()
            .map(|s| s.polygon_px.iter().map(|p| (p[0], p[1])).collect())
            .collect();
        let shelf_polys_floor: Vec<Vec<(f64, f64)>> = shelf_polys_px
            .iter()
            .map(|poly| poly.iter().filter_map(|&(x, y)| model.pixel_to_floor(x, y)).collect())
            .collect();

        let base = cam_idx as u64 * TRACK_ID_STRIDE;
        let mut tracker = Tracker::new(cam, &config.tracking, &config.identity);
        let mut detector = ProximityDetector::new(&config.proximity, &shelves_owned, cam);
        let mut ankles: BTreeMap<u64, AnkleMemory> = BTreeMap::new();
        let mut next_due = f64::NEG_INFINITY;

        for rec in recs {
            if let Some(fps) = options.fps_limit {
                if rec.t + 1e-9 < next_due {
                    continue;
                }
                next_due = rec.t + 1.0 / fps;
            }
            stats.frames_processed += 1;

            let labels: Vec<Option<crate::identity::FaceLabel>> = rec
                .skeletons
                .iter()
                .map(|s| s.face_embedding.as_deref().map(|e| registry.classify(e)))
                .collect();
            let entries = tracker.step(rec.frame, rec.t, &rec.skeletons, &labels);

            // Limb refinement replaces coarse wrists with the medoid of the
            // matched wrist cluster before proximity looks at them.
            let mut skels: Vec<Skeleton> = rec.skeletons.clone();
            if let Some(limbs) = &rec.limbs {
                let cands = LimbCandidateSet::from_record(limbs, config.limbs.color_thresh);
                let assignment = associate_limbs(&cands);
                for &(ei, wi) in &assignment.pairs {
                    let elbow = &limbs.elbows[ei];
                    if elbow.skeleton >= skels.len() {
                        continue;
                    }
                    let (x, y) = refined_position(&cands.wrists[wi], config.limbs.medoid_percentile);
                    let joint = match elbow.side {
                        LimbSide::Left => JointName::LeftWrist,
                        LimbSide::Right => JointName::RightWrist,
                    };
                    let confidence = skels[elbow.skeleton]
                        .joint(joint)
                        .map(|kp| kp.confidence)
                        .unwrap_or(limbs.wrists[wi].confidence);
                    skels[elbow.skeleton].set_joint(Keypoint { joint, x, y, confidence });
                }
            }

            for entry in &entries {
                let track_id = base + entry.track_id;
                let skel = &skels[entry.skeleton_index];
                detector.observe(rec.t, track_id, skel);

                for (hand, joint) in
                    [(Hand::Left, JointName::LeftWrist), (Hand::Right, JointName::RightWrist)]
                {
                    if let Some(kp) = skel.joint(joint) {
                        for (idx, poly) in shelf_polys_px.iter().enumerate() {
                            if poly.len() < 2 {
                                continue;
                            }
                            let d = point_polygon_distance((kp.x, kp.y), poly);
                            dist_series
                                .entry((track_id, hand, shelves[idx].shelf_id.clone()))
                                .or_default()
                                .push((rec.t, d));
                        }
                    }
                }

                // Ankle fallback distances mirror the detector's memory rule:
                // visible ankles win, otherwise the last ankle rides along
                // with the neck.
                let mem = ankles.entry(track_id).or_default();
                let neck = skel.joint(JointName::Neck).map(|kp| (kp.x, kp.y));
                let visible: Vec<(f64, f64)> = [JointName::LeftAnkle, JointName::RightAnkle]
                    .iter()
                    .filter_map(|&j| skel.joint(j).map(|kp| (kp.x, kp.y)))
                    .collect();
                let ankle_px = if !visible.is_empty() {
                    let n = visible.len() as f64;
                    let mean = (
                        visible.iter().map(|a| a.0).sum::<f64>() / n,
                        visible.iter().map(|a| a.1).sum::<f64>() / n,
                    );
                    mem.last_ankle = Some(mean);
                    Some(mean)
                } else if let (Some(prev), Some(pn), Some(cn)) =
                    (mem.last_ankle, mem.last_neck, neck)
                {
                    let shifted = (prev.0 + cn.0 - pn.0, prev.1 + cn.1 - pn.1);
                    mem.last_ankle = Some(shifted);
                    Some(shifted)
                } else {
                    None
                };
                if let Some(n) = neck {
                    mem.last_neck = Some(n);
                }
                let both_wrists_gone = skel.joint(JointName::LeftWrist).is_none()
                    && skel.joint(JointName::RightWrist).is_none();
                if both_wrists_gone {
                    if let Some(floor) =
                        ankle_px.and_then(|(x, y)| model.pixel_to_floor(x, y))
                    {
                        for (idx, poly) in shelf_polys_floor.iter().enumerate() {
                            if poly.len() < 2 {
                                continue;
                            }
                            let d = point_polygon_distance(floor, poly);
                            dist_series
                                .entry((track_id, Hand::AnkleFallback, shelves[idx].shelf_id.clone()))
                                .or_default()
                                .push((rec.t, d));
                        }
                    }
                }

                for (hand, pixels) in &skel.hand_item_pixels {
                    if !pixels.is_empty() {
                        carries
                            .entry((track_id, *hand))
                            .or_default()
                            .push((rec.t, pixels.clone()));
                    }
                }
            }

            let seen: Vec<u64> = entries.iter().map(|e| base + e.track_id).collect();
            detector.sweep(rec.t, &seen);

            for entry in &entries {
                if entry.cost.is_none() {
                    stats.tracks_created += 1;
                }
            }
            for track in tracker.tracks() {
                let f = finals.entry(base + track.track_id).or_default();
                f.identity = track.identity.clone();
                f.created_t = track.created_t;
                f.bound_t = track.identity_bound_t;
                f.switches = track.identity_switches as u64;
            }
        }

        prox_events.extend(detector.finish());
    }

    stats.identity_switches = finals.values().map(|f| f.switches).sum();
    let delays: Vec<f64> = finals
        .values()
        .filter_map(|f| f.bound_t.map(|b| b - f.created_t))
        .collect();
    stats.identification_delay_s = if delays.is_empty() {
        None
    } else {
        Some(delays.iter().sum::<f64>() / delays.len() as f64)
    };

    // Decimation stretches the spacing of carry samples, so the gap that
    // splits segments has to stretch with it.
    let carry_gap = options.fps_limit.map_or(CARRY_GAP_S, |f| (2.0 / f).max(CARRY_GAP_S));
    let mut segments: BTreeMap<(u64, Hand), Vec<CarrySegment>> = BTreeMap::new();
    for (key, samples) in &carries {
        let mut runs: Vec<Vec<&(f64, Vec<[u8; 3]>)>> = Vec::new();
        for sample in samples {
            match runs.last_mut() {
                Some(run) if sample.0 - run.last().unwrap().0 <= carry_gap => run.push(sample),
                _ => runs.push(vec![sample]),
            }
        }
        let segs: Vec<CarrySegment> = runs
            .into_iter()
            .map(|run| {
                let t0 = run[0].0;
                let t1 = run[run.len() - 1].0;
                let mut onset = Vec::new();
                let mut offset = Vec::new();
                for (t, px) in run {
                    if *t <= t0 + CARRY_EDGE_S {
                        onset.extend_from_slice(px);
                    }
                    if *t >= t1 - CARRY_EDGE_S {
                        offset.extend_from_slice(px);
                    }
                }
                CarrySegment { t0, t1, onset, offset }
            })
            .collect();
        segments.insert(*key, segs);
    }

    // Sensor event extraction, gated on participation.
    let mut weight_events: BTreeMap<&str, Vec<WeightEvent>> = BTreeMap::new();
    if active_w {
        for (scale_id, readings) in &trace.weights {
            let samples: Vec<(f64, f64)> = readings.iter().map(|r| (r.t, r.grams)).collect();
            weight_events.insert(
                scale_id,
                fusion::detect_weight_events(scale_id, &samples, &config.fusion),
            );
        }
    }
    let mut episodes: BTreeMap<&str, Vec<RfidEpisode>> = BTreeMap::new();
    if active_r {
        for (antenna_id, samples) in &trace.rfid {
            episodes.insert(antenna_id, fusion::extract_episodes(samples, RFID_GAP_S));
        }
    }

    let mut classifiers: BTreeMap<&str, ShelfVisionClassifier> = BTreeMap::new();
    if active_v {
        for shelf in &trace.store.shelves {
            classifiers.insert(
                &shelf.shelf_id,
                ShelfVisionClassifier::from_catalog(&shelf.catalog, config.fusion.vision_k),
            );
        }
    }

    let windows = fusion::form_windows(&prox_events);

    // An episode is one physical tag motion and may inform only one
    // window; without this, a long episode tail leaks the same unit into
    // the next shopper's window at the same shelf. Each episode goes to
    // the window it overlaps most (earliest on ties).
    let mut episode_home: BTreeMap<(&str, usize), (f64, usize)> = BTreeMap::new();
    for (wi, window) in windows.iter().enumerate() {
        let Some(shelf) = trace.store.shelf(&window.shelf_id) else { continue };
        let antenna = shelf.rfid_antenna_id.as_str();
        let Some(eps) = episodes.get(antenna) else { continue };
        let lo = window.start - WINDOW_PAD_S;
        let hi = window.finish + WINDOW_PAD_S;
        for (ei, ep) in eps.iter().enumerate() {
            let (es, ee) = ep.interval();
            if ee < lo || es > hi {
                continue;
            }
            let overlap = ee.min(hi) - es.max(lo);
            let entry = episode_home.entry((antenna, ei)).or_insert((overlap, wi));
            if overlap > entry.0 {
                *entry = (overlap, wi);
            }
        }
    }

    // First pass: weight-spawned units per window, with each episode
    // folded into every matching unit it overlaps. Folding attaches
    // evidence to a unit that already exists, so one episode may fold in
    // several windows without inflating the count.
    let mut window_details: Vec<Vec<InstanceDetail>> =
        (0..windows.len()).map(|_| Vec::new()).collect();
    let mut folded: BTreeSet<(&str, usize)> = BTreeSet::new();
    for (wi, window) in windows.iter().enumerate() {
        let Some(shelf) = trace.store.shelf(&window.shelf_id) else { continue };
        let catalog = &shelf.catalog;
        let lo = window.start - WINDOW_PAD_S;
        let hi = window.finish + WINDOW_PAD_S;

        let details = &mut window_details[wi];

        let shelf_events: &[WeightEvent] = weight_events
            .get(shelf.scale_id.as_str())
            .map(|v| v.as_slice())
            .unwrap_or(&[]);
        for ev in shelf_events {
            if ev.tampered || ev.t_e < lo || ev.t_s > hi {
                continue;
            }
            // Best (type, count) explanation of the magnitude.
            let mut best: Option<(f64, usize, u32)> = None;
            for (ti, item) in catalog.iter().enumerate() {
                for c in 1..=item.capacity_per_hand.max(1) {
                    let err = (ev.magnitude - c as f64 * item.weight_g).abs();
                    if best.map_or(true, |(be, _, _)| err < be) {
                        best = Some((err, ti, c));
                    }
                }
            }
            let Some((_, type_idx, count)) = best else { continue };
            for _ in 0..count {
                details.push(InstanceDetail {
                    type_idx,
                    kind: ev.kind,
                    interval: ev.interval(),
                    unit_magnitude: Some(ev.magnitude / count as f64),
                    episode: None,
                });
            }
        }

        let shelf_episodes: &[RfidEpisode] = episodes
            .get(shelf.rfid_antenna_id.as_str())
            .map(|v| v.as_slice())
            .unwrap_or(&[]);
        for (ei, ep) in shelf_episodes.iter().enumerate() {
            let (es, ee) = ep.interval();
            if ee < lo || es > hi {
                continue;
            }
            let type_id = ep.tag_id.split('#').next().unwrap_or("");
            let Some(type_idx) = catalog.iter().position(|it| it.item_id == type_id) else {
                continue;
            };
            let kind = match ep.direction {
                fusion::RfidDirection::Departing => WeightEventKind::Removal,
                fusion::RfidDirection::Returning => WeightEventKind::Deposit,
            };
            let mut target: Option<(f64, usize)> = None;
            for (di, d) in details.iter().enumerate() {
                if d.type_idx != type_idx || d.kind != kind || d.episode.is_some() {
                    continue;
                }
                if d.interval.1 < es || d.interval.0 > ee {
                    continue;
                }
                let gap = ((d.interval.0 + d.interval.1) / 2.0 - (es + ee) / 2.0).abs();
                if target.map_or(true, |(bg, _)| gap < bg) {
                    target = Some((gap, di));
                }
            }
            if let Some((_, di)) = target {
                details[di].episode = Some(ei);
                folded.insert((shelf.rfid_antenna_id.as_str(), ei));
            }
        }
    }

    let mut outcomes: Vec<WindowOutcome> = Vec::new();
    let mut records: Vec<PurchaseRecord> = Vec::new();

    for (wi, window) in windows.iter().enumerate() {
        let Some(shelf) = trace.store.shelf(&window.shelf_id) else { continue };
        let catalog = &shelf.catalog;

        let mut details = std::mem::take(&mut window_details[wi]);

        let shelf_events: &[WeightEvent] = weight_events
            .get(shelf.scale_id.as_str())
            .map(|v| v.as_slice())
            .unwrap_or(&[]);
        let shelf_episodes: &[RfidEpisode] = episodes
            .get(shelf.rfid_antenna_id.as_str())
            .map(|v| v.as_slice())
            .unwrap_or(&[]);

        // An episode folded nowhere is evidence of a tag motion no scale
        // accounted for; it opens one unit, in its home window only.
        for (ei, ep) in shelf_episodes.iter().enumerate() {
            let key = (shelf.rfid_antenna_id.as_str(), ei);
            if folded.contains(&key) || episode_home.get(&key).map(|&(_, w)| w) != Some(wi) {
                continue;
            }
            let type_id = ep.tag_id.split('#').next().unwrap_or("");
            let Some(type_idx) = catalog.iter().position(|it| it.item_id == type_id) else {
                continue;
            };
            let (es, ee) = ep.interval();
            details.push(InstanceDetail {
                type_idx,
                kind: match ep.direction {
                    fusion::RfidDirection::Departing => WeightEventKind::Removal,
                    fusion::RfidDirection::Returning => WeightEventKind::Deposit,
                },
                interval: (es, ee),
                unit_magnitude: None,
                episode: Some(ei),
            });
        }

        // Vision can still open an instance when the scales and tags saw
        // nothing. One carry segment is one physical action: its onset is
        // the grab of a pickup, its offset the release of a dropoff, and
        // whichever edge lies deeper inside the hand event is the one
        // that happened at the shelf. The opposite edge is the stow or
        // unstow away from the shelf and must not open anything.
        if active_v {
            let classifier = &classifiers[shelf.shelf_id.as_str()];
            for ev in &window.events {
                let Some(segs) = segments.get(&(ev.track_id, ev.hand)) else { continue };
                for seg in segs {
                    if seg.t1 - seg.t0 < MIN_CARRY_SPAN_S {
                        continue;
                    }
                    let onset_in =
                        seg.t0 >= ev.start - WINDOW_PAD_S && seg.t0 <= ev.finish + WINDOW_PAD_S;
                    let offset_in =
                        seg.t1 >= ev.start - WINDOW_PAD_S && seg.t1 <= ev.finish + WINDOW_PAD_S;
                    if !onset_in && !offset_in {
                        continue;
                    }
                    // Explained at either edge means the whole segment is
                    // accounted for by another sensor. Weight events and
                    // episodes are consulted shelf-wide: the explaining
                    // instance may live in a neighboring window.
                    let explained = |kind: WeightEventKind, moment: f64| {
                        let claim = (moment - CARRY_MOMENT_HALF_S, moment + CARRY_MOMENT_HALF_S);
                        let by_unit = details.iter().any(|d| {
                            d.kind == kind
                                && fusion::interval_association(d.interval, claim)
                                    >= config.fusion.vision_instance_iou_gate
                        });
                        let by_scale = shelf_events.iter().any(|we| {
                            !we.tampered
                                && we.kind == kind
                                && fusion::interval_association(we.interval(), claim)
                                    >= config.fusion.vision_instance_iou_gate
                        });
                        let by_tag = shelf_episodes.iter().any(|ep| {
                            let (es, ee) = ep.interval();
                            let dir = match ep.direction {
                                fusion::RfidDirection::Departing => WeightEventKind::Removal,
                                fusion::RfidDirection::Returning => WeightEventKind::Deposit,
                            };
                            dir == kind
                                && moment >= es - CARRY_MOMENT_HALF_S
                                && moment <= ee + CARRY_MOMENT_HALF_S
                        });
                        by_unit || by_scale || by_tag
                    };
                    if explained(WeightEventKind::Removal, seg.t0)
                        || explained(WeightEventKind::Deposit, seg.t1)
                    {
                        continue;
                    }
                    let (kind, moment, pixels) = if seg.t0 - ev.start > ev.finish - seg.t1 {
                        (WeightEventKind::Removal, seg.t0, &seg.onset)
                    } else {
                        (WeightEventKind::Deposit, seg.t1, &seg.offset)
                    };
                    if pixels.len() < MIN_CARRY_PIXELS {
                        continue;
                    }
                    let probs = classifier.classify_pixels(pixels);
                    let Some(type_idx) = argmax(&probs) else { continue };
                    eprintln!(
                        "RESCUE win=[{:.2},{:.2}] track={} hand={:?} seg=[{:.3},{:.3}] ev=[{:.2},{:.2}] kind={:?} type={}",
                        window.start, window.finish, ev.track_id, ev.hand, seg.t0, seg.t1, ev.start, ev.finish, kind, type_idx
                    );
                    details.push(InstanceDetail {
                        type_idx,
                        kind,
                        interval: (moment - CARRY_MOMENT_HALF_S, moment + CARRY_MOMENT_HALF_S),
                        unit_magnitude: None,
                        episode: None,
                    });
                }
            }
        }

        let hands: Vec<HandKey> = window
            .events
            .iter()
            .map(|ev| HandKey {
                track_id: ev.track_id,
                hand: ev.hand,
                shopper_id: finals.get(&ev.track_id).and_then(|f| f.identity.clone()),
            })
            .collect();
        let items: Vec<ItemInstance> = details
            .iter()
            .map(|d| ItemInstance {
                item_id: catalog[d.type_idx].item_id.clone(),
                capacity_per_hand: catalog[d.type_idx].capacity_per_hand,
                kind: d.kind,
                interval: d.interval,
            })
            .collect();
        let mut matrix = AssociationMatrix::with_size(hands, items);

        for (k, ev) in window.events.iter().enumerate() {
            for (m, d) in details.iter().enumerate() {
                if active_w {
                    if let Some(mag) = d.unit_magnitude {
                        let iou = fusion::interval_association(d.interval, (ev.start, ev.finish));
                        let item_p =
                            fusion::weight_item_probability(mag, catalog, &config.fusion)[d.type_idx];
                        matrix.weight[k][m] = Some(iou * item_p);
                    }
                }
                if active_r && catalog[d.type_idx].rfid_tagged {
                    if let Some(ei) = d.episode {
                        let key = (ev.track_id, ev.hand, window.shelf_id.clone());
                        if let Some(series) = dist_series.get(&key) {
                            matrix.rfid[k][m] = fusion::rfid_hand_probability(
                                &shelf_episodes[ei],
                                series,
                                &config.fusion,
                            );
                        }
                    }
                }
                if active_v {
                    // Only the carry edge matching the instance kind votes:
                    // a removal should see an onset, a deposit an offset.
                    if let Some(segs) = segments.get(&(ev.track_id, ev.hand)) {
                        let mut pixels: Vec<[u8; 3]> = Vec::new();
                        for seg in segs {
                            match d.kind {
                                WeightEventKind::Removal => {
                                    if seg.t0 >= d.interval.0 - WINDOW_PAD_S
                                        && seg.t0 <= d.interval.1 + CARRY_PAD_S
                                    {
                                        pixels.extend_from_slice(&seg.onset);
                                    }
                                }
                                WeightEventKind::Deposit => {
                                    if seg.t1 >= d.interval.0 - CARRY_PAD_S
                                        && seg.t1 <= d.interval.1 + WINDOW_PAD_S
                                    {
                                        pixels.extend_from_slice(&seg.offset);
                                    }
                                }
                            }
                        }
                        if !pixels.is_empty() {
                            let classifier = &classifiers[shelf.shelf_id.as_str()];
                            matrix.camera[k][m] =
                                Some(classifier.classify_pixels(&pixels)[d.type_idx]);
                        }
                    }
                }
            }
        }

        let result = fusion::solve_assignment(&matrix, weights);
        for pair in &result.pairs {
            if pair.p < config.fusion.min_assignment_p {
                continue;
            }
            let hand = &matrix.hands[pair.hand];
            let d = &details[pair.item];
            let shopper_id = hand
                .shopper_id
                .clone()
                .unwrap_or_else(|| format!("unknown:{}", hand.track_id));
            records.push(PurchaseRecord {
                shopper_id,
                shelf_id: window.shelf_id.clone(),
                item_id: catalog[d.type_idx].item_id.clone(),
                kind: match d.kind {
                    WeightEventKind::Removal => ActionKind::Pickup,
                    WeightEventKind::Deposit => ActionKind::Dropoff,
                },
                count: 1,
                t: (d.interval.0 + d.interval.1) / 2.0,
                p: pair.p,
            });
        }

        outcomes.push(WindowOutcome {
            shelf_id: window.shelf_id.clone(),
            start: window.start,
            finish: window.finish,
            hands: matrix.hands.clone(),
            items: matrix.items.clone(),
            pairs: result.pairs,
            objective: result.objective,
        });
    }

    records.sort_by(|a, b| {
        a.t.total_cmp(&b.t)
            .then_with(|| a.shopper_id.cmp(&b.shopper_id))
            .then_with(|| a.item_id.cmp(&b.item_id))
    });

    Ok(PipelineOutput { trace_id: trace.store.trace_id.clone(), records, stats, windows: outcomes })
}

fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |(bv, _)| v > bv) {
            best = Some((v, i));
        }
    }
    best.map(|(_, i)| i)
}
