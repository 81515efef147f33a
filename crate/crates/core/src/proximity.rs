//! Proximity-event detection.
//!
//! A proximity event is the interval a shopper's hand stays close to a
//! shelf. Wrist keypoints drive the pixel-space test against the shelf
//! polygon; when both wrists are hidden the shopper's ankle is projected
//! to the floor plane and tested in meters against the shelf's floor
//! footprint. Opening and closing use a hysteresis band, and events
//! shorter than the minimum duration are discarded as flicker.

use crate::config::{PipelineConfig, ProximityConfig};
use crate::trace::{CameraConfig, Hand, JointName, Shelf, Skeleton};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Pinhole ground-plane camera model. Tilt is measured from the vertical,
/// so 0 looks straight down and 90 is horizontal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlaneModel {
    pub height_m: f64,
    pub tilt_deg: f64,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl GroundPlaneModel {
    pub fn from_camera(cfg: &CameraConfig) -> Self {
        GroundPlaneModel {
            height_m: cfg.height_m,
            tilt_deg: cfg.tilt_deg,
            hfov_deg: cfg.hfov_deg,
            vfov_deg: cfg.vfov_deg,
            width_px: cfg.width_px,
            height_px: cfg.height_px,
        }
    }

    fn fx(&self) -> f64 {
        (self.width_px as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan()
    }

    fn fy(&self) -> f64 {
        (self.height_px as f64 / 2.0) / (self.vfov_deg.to_radians() / 2.0).tan()
    }

    /// Image row of the horizon; rays at or above it never meet the floor.
    /// May lie outside the image for steep tilts.
    pub fn horizon_row(&self) -> f64 {
        let theta = self.tilt_deg.to_radians();
        self.height_px as f64 / 2.0 - self.fy() * (theta.cos() / theta.sin())
    }

    /// Inverse ground-plane projection. The camera sits at the world
    /// origin at its configured height; +x is image-right along the floor
    /// and +y points away from the camera under its principal axis.
    pub fn pixel_to_floor(&self, px: f64, py: f64) -> Option<(f64, f64)> {
        let theta = self.tilt_deg.to_radians();
        let dx = (px - self.width_px as f64 / 2.0) / self.fx();
        let dy = (py - self.height_px as f64 / 2.0) / self.fy();
        // Ray direction in world coordinates (z up):
        //   d = x_cam * dx + y_cam * dy + forward
        // with forward = (0, sin t, -cos t) and image-down = (0, -cos t, -sin t).
        let dz = -(theta.sin() * dy + theta.cos());
        if dz >= 0.0 {
            return None;
        }
        let t = self.height_m / -dz;
        let x = t * dx;
        let y = t * (theta.sin() - theta.cos() * dy);
        Some((x, y))
    }

    /// Forward projection of a floor point; inverse of `pixel_to_floor`.
    pub fn floor_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let theta = self.tilt_deg.to_radians();
        let v = (x, y, -self.height_m);
        let z_c = v.1 * theta.sin() + self.height_m * theta.cos();
        let x_c = v.0;
        let y_c = -v.1 * theta.cos() + self.height_m * theta.sin();
        (
            self.width_px as f64 / 2.0 + self.fx() * x_c / z_c,
            self.height_px as f64 / 2.0 + self.fy() * y_c / z_c,
        )
    }
}

/// The interval one hand of one track stayed near one shelf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityEvent {
    pub track_id: u64,
    pub hand: Hand,
    pub shelf_id: String,
    pub start: f64,
    pub finish: f64,
}

/// Distance from a point to a closed polygon: zero inside, nearest edge
/// distance outside.
pub(crate) fn point_polygon_distance(p: (f64, f64), poly: &[(f64, f64)]) -> f64 {
    if poly.len() >= 3 && point_in_polygon(p, poly) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        best = best.min(point_segment_distance(p, a, b));
    }
    best
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * abx, a.1 + t * aby);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > p.1) != (yj > p.1) {
            let x_crossing = xi + (p.1 - yi) * (xj - xi) / (yj - yi);
            if p.0 < x_crossing {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, Default)]
struct TrackMemory {
    last_ankle_px: Option<(f64, f64)>,
    last_neck_px: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
struct OpenEvent {
    shelf_idx: usize,
    start: f64,
}

/// Streaming detector. Feed frames through `observe` in time order and
/// collect events with `finish`; the batch wrapper `detect_proximity`
/// produces identical output for identical input order.
pub struct ProximityDetector {
    params: ProximityConfig,
    model: GroundPlaneModel,
    shelf_ids: Vec<String>,
    shelf_polys_px: Vec<Vec<(f64, f64)>>,
    shelf_polys_floor: Vec<Vec<(f64, f64)>>,
    open_px: f64,
    close_px: f64,
    open_m: f64,
    close_m: f64,
    open_events: BTreeMap<(u64, Hand), OpenEvent>,
    memory: BTreeMap<u64, TrackMemory>,
    events: Vec<ProximityEvent>,
    last_t: Option<f64>,
}

impl ProximityDetector {
    pub fn new(params: &ProximityConfig, shelves: &[Shelf], camera: &CameraConfig) -> Self {
        let model = GroundPlaneModel::from_camera(camera);
        let open_px = PipelineConfig::scale_px(params.pixel_threshold_px, camera.width_px);
        let close_px = open_px + PipelineConfig::scale_px(params.hysteresis_px, camera.width_px);
        // The floor band reuses the pixel hysteresis ratio.
        let open_m = params.floor_threshold_m;
        let close_m = open_m * (1.0 + params.hysteresis_px / params.pixel_threshold_px);
        let shelf_polys_px: Vec<Vec<(f64, f64)>> = shelves
            .iter()
            .map(|s| s.polygon_px.iter().map(|p| (p[0], p[1])).collect())
            .collect();
        let shelf_polys_floor = shelf_polys_px
            .iter()
            .map(|poly| {
                poly.iter().filter_map(|&(x, y)| model.pixel_to_floor(x, y)).collect::<Vec<_>>()
            })
            .collect();
        ProximityDetector {
            params: params.clone(),
            model,
            shelf_ids: shelves.iter().map(|s| s.shelf_id.clone()).collect(),
            shelf_polys_px,
            shelf_polys_floor,
            open_px,
            close_px,
            open_m,
            close_m,
            open_events: BTreeMap::new(),
            memory: BTreeMap::new(),
            events: Vec::new(),
            last_t: None,
        }
    }

    /// One track's skeleton at time `t`. Frames must arrive in
    /// non-decreasing time order.
    pub fn observe(&mut self, t: f64, track_id: u64, skeleton: &Skeleton) {
        self.last_t = Some(t);
        let wrist = |j: JointName| skeleton.joint(j).map(|kp| (kp.x, kp.y));
        let left = wrist(JointName::LeftWrist);
        let right = wrist(JointName::RightWrist);

        // Ankle memory: prefer visible ankles; otherwise extrapolate the
        // last-known ankle by the neck's displacement.
        let neck = skeleton.joint(JointName::Neck).map(|kp| (kp.x, kp.y));
        let visible_ankles: Vec<(f64, f64)> = [JointName::LeftAnkle, JointName::RightAnkle]
            .iter()
            .filter_map(|&j| skeleton.joint(j).map(|kp| (kp.x, kp.y)))
            .collect();
        let mem = self.memory.entry(track_id).or_default();
        let ankle_px = if !visible_ankles.is_empty() {
            let n = visible_ankles.len() as f64;
            let mean = (
                visible_ankles.iter().map(|a| a.0).sum::<f64>() / n,
                visible_ankles.iter().map(|a| a.1).sum::<f64>() / n,
            );
            mem.last_ankle_px = Some(mean);
            Some(mean)
        } else if let (Some(prev_ankle), Some(prev_neck), Some(cur_neck)) =
            (mem.last_ankle_px, mem.last_neck_px, neck)
        {
            let shifted =
                (prev_ankle.0 + cur_neck.0 - prev_neck.0, prev_ankle.1 + cur_neck.1 - prev_neck.1);
            mem.last_ankle_px = Some(shifted);
            Some(shifted)
        } else {
            None
        };
        if let Some(n) = neck {
            mem.last_neck_px = Some(n);
        }

        let fallback_active = left.is_none() && right.is_none();
        let ankle_floor =
            if fallback_active { ankle_px.and_then(|(x, y)| self.model.pixel_to_floor(x, y)) } else { None };

        for (hand, pos) in [(Hand::Left, left), (Hand::Right, right)] {
            self.step_hand(t, track_id, hand, pos, false);
        }
        self.step_hand(t, track_id, Hand::AnkleFallback, ankle_floor, true);
    }

    fn step_hand(
        &mut self,
        t: f64,
        track_id: u64,
        hand: Hand,
        pos: Option<(f64, f64)>,
        floor_space: bool,
    ) {
        let key = (track_id, hand);
        let (open_thresh, close_thresh) = if floor_space {
            (self.open_m, self.close_m)
        } else {
            (self.open_px, self.close_px)
        };

        let Some(p) = pos else {
            // Position unavailable: close any open event at this time.
            if let Some(open) = self.open_events.remove(&key) {
                self.emit(track_id, hand, open, t);
            }
            return;
        };

        if let Some(open) = self.open_events.get(&key) {
            let d = self.shelf_distance(open.shelf_idx, p, floor_space);
            if d > close_thresh {
                let open = self.open_events.remove(&key).unwrap();
                self.emit(track_id, hand, open, t);
            } else {
                return;
            }
        }

        // Closed: open against the nearest shelf inside the threshold.
        let mut best: Option<(f64, usize)> = None;
        for idx in 0..self.shelf_ids.len() {
            let d = self.shelf_distance(idx, p, floor_space);
            if d < open_thresh && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, idx));
            }
        }
        if let Some((_, idx)) = best {
            self.open_events.insert(key, OpenEvent { shelf_idx: idx, start: t });
        }
    }

    fn shelf_distance(&self, idx: usize, p: (f64, f64), floor_space: bool) -> f64 {
        let poly: &[(f64, f64)] =
            if floor_space { &self.shelf_polys_floor[idx] } else { &self.shelf_polys_px[idx] };
        if poly.len() < 2 {
            f64::INFINITY
        } else {
            point_polygon_distance(p, poly)
        }
    }

    fn emit(&mut self, track_id: u64, hand: Hand, open: OpenEvent, finish: f64) {
        if finish > open.start && finish - open.start >= self.params.min_duration_s {
            self.events.push(ProximityEvent {
                track_id,
                hand,
                shelf_id: self.shelf_ids[open.shelf_idx].clone(),
                start: open.start,
                finish,
            });
        }
    }

    /// Closes open events of tracks that were not observed at `t`. Call
    /// after a frame's observes when the upstream tracker can drop a track
    /// without a final sighting; otherwise a vanished track's event would
    /// stay open to the end of the run.
    pub fn sweep(&mut self, t: f64, seen: &[u64]) {
        self.last_t = Some(t);
        let stale: Vec<(u64, Hand)> = self
            .open_events
            .keys()
            .filter(|(track_id, _)| !seen.contains(track_id))
            .cloned()
            .collect();
        for key in stale {
            let open = self.open_events.remove(&key).unwrap();
            self.emit(key.0, key.1, open, t);
        }
    }

    /// Closes events still open at the last observed time and returns all
    /// events sorted by (start, track, hand).
    pub fn finish(mut self) -> Vec<ProximityEvent> {
        if let Some(t) = self.last_t {
            let open: Vec<((u64, Hand), OpenEvent)> = std::mem::take(&mut self.open_events)
                .into_iter()
                .collect();
            for ((track_id, hand), ev) in open {
                self.emit(track_id, hand, ev, t);
            }
        }
        self.events.sort_by(|a, b| {
            a.start
                .total_cmp(&b.start)
                .then(a.track_id.cmp(&b.track_id))
                .then(a.hand.cmp(&b.hand))
                .then(a.shelf_id.cmp(&b.shelf_id))
        });
        self.events
    }
}

/// Batch wrapper over the streaming detector.
pub fn detect_proximity(
    frames: &[(f64, u64, Skeleton)],
    shelves: &[Shelf],
    camera: &CameraConfig,
    params: &ProximityConfig,
) -> Vec<ProximityEvent> {
    let mut det = ProximityDetector::new(params, shelves, camera);
    for (t, track_id, skeleton) in frames {
        det.observe(*t, *track_id, skeleton);
    }
    det.finish()
}
