//! Seeded synthetic store traces with ground truth.
//!
//! The generator lays out a two-shelf aisle watched by one tilted overhead
//! camera, scripts shopper errands as floor waypoints, and renders every
//! stream the pipeline consumes: keypoints through the pinhole model, face
//! embeddings and shirt histograms, weight waveforms with inertial bounce,
//! RSSI episodes for tagged items, and carried-item pixels. Adversarial
//! actions distort exactly one channel each: hand-hiding drops both wrist
//! keypoints for the action, item-switching renders another item's color in
//! the hand, sensor-tampering injects a high-frequency press burst on the
//! scale just before the real transition.
//!
//! Layout (meters, camera at the origin looking down-aisle along +y):
//! two flanking shelves put their inner faces at |x| = 0.8; all vertical
//! travel runs on the aisle centre line x = 0, and shoppers between errands
//! park at personal spots in the near field, where the tilted camera spans
//! hundreds of pixels per metre. The store admits one walker at a time, so
//! the only moving body in any frame is the active walker. Faces are
//! captured during the check-in pause, at the parking spots (shoppers face
//! the entrance), and on occasional glances while standing; exits walk off
//! the bottom edge of the frame so tracks delete cleanly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::identity::FaceRegistry;
use crate::trace::{
    ActionKind, AdversarialKind, CameraConfig, ColorHistogram, ElbowCandidate, FrameRecord,
    GroundTruthAction, Hand, ItemType, JointName, Keypoint, LimbRecord, LimbSide, RfidSample,
    ScaleReading, Shelf, Skeleton, StoreConfig, Trace, WristCandidate, EMBEDDING_DIM,
};

pub const MAX_SHOPPERS: usize = 8;

const CAMERA_ID: &str = "cam0";
const FRAME_RATE_HZ: f64 = 15.0;
const SCALE_RATE_HZ: f64 = 30.0;
const RFID_RATE_HZ: f64 = 10.0;

// Aisle geometry. Shelf inner faces flank the walking lane; item slots are
// spread along each shelf's run in y.
const SHELF_X_INNER: f64 = 0.8;
const SHELF_X_OUTER: f64 = 1.4;
const SHELF_Y0: f64 = 1.8;
const SHELF_Y1: f64 = 3.0;
const SHELF_TOP_Z: f64 = 1.0;
const SLOT_Y0: f64 = 1.9;
const SLOT_Y1: f64 = 2.9;
const STAND_X: f64 = 0.42;
// Door and check-in kiosk sit in the near field south of the parking grid.
// A body at the door projects below the frame, so entrants materialise a
// step in and exits vanish cleanly at the bottom edge.
const DOOR: (f64, f64) = (0.0, 0.5);
const KIOSK: (f64, f64) = (0.0, 0.8);
const KIOSK_PAUSE_S: f64 = 0.5;
/// Parking spots between errands, two columns flanking the centre line.
/// Neighbouring spots keep at least 0.25 m apart, and every walk leg keeps
/// at least 0.25 m from every other shopper's spot: farther than anyone
/// moves between consecutive frames at native rate, so a passing walker
/// never looks like a better match for a parked neighbour's track than
/// the neighbour itself.
const HOME_COLS: [f64; 2] = [-0.45, 0.45];
const HOME_ROWS: [f64; 4] = [0.9, 1.15, 1.4, 1.65];
/// Clearance between consecutive aisle grants.
const AISLE_GAP_S: f64 = 0.2;

fn home_spot(j: usize) -> (f64, f64) {
    (HOME_COLS[j % HOME_COLS.len()], HOME_ROWS[(j / HOME_COLS.len()) % HOME_ROWS.len()])
}

// Reach animation: arm extends, holds at the slot, returns. The grab (and
// the scale transition) happens mid-hold.
const REACH_OUT_S: f64 = 0.7;
const REACH_HOLD_S: f64 = 0.5;
const REACH_RETURN_S: f64 = 0.7;
const REACH_TOTAL_S: f64 = REACH_OUT_S + REACH_HOLD_S + REACH_RETURN_S;
const GRAB_OFFSET_S: f64 = REACH_OUT_S + 0.15;

// Scale occupancy per action; transitions on one scale never overlap.
const SCALE_BUSY_S: f64 = 1.5;
// Tamper press burst relative to the grab: ends early enough that the real
// transition stays a separate weight event.
const TAMPER_LEAD_S: f64 = 1.9;
const TAMPER_PRESS_END_S: f64 = 0.8;
const TAMPER_PRESS_G: f64 = 500.0;
const TAMPER_PRESS_HZ: f64 = 5.0;

const KEYPOINT_DROPOUT: f64 = 0.03;
const EMBEDDING_NOISE: f64 = 0.02;
const GLANCE_EVERY_S: f64 = 3.0;
const GLANCE_LEN_S: f64 = 0.6;
/// Degrees per second a shopper sweeps while rotating onto a new heading.
const TURN_RATE_DEG_S: f64 = 270.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub n_shoppers: usize,
    pub n_actions: usize,
    /// Fraction of actions given an adversarial class.
    pub adversarial_ratio: f64,
    /// Relative mix of item_switching : hand_hiding : sensor_tampering.
    pub adversarial_mix: [u32; 3],
    pub keypoint_jitter_px: f64,
    pub weight_noise_g: f64,
    pub rssi_noise_db: f64,
    pub store: StoreConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 7,
            n_shoppers: MAX_SHOPPERS,
            n_actions: 307,
            adversarial_ratio: 0.4,
            adversarial_mix: [53, 34, 31],
            keypoint_jitter_px: 2.0,
            weight_noise_g: 2.0,
            rssi_noise_db: 1.0,
            store: default_store(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimgenError {
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// A generated trace plus the face registry enrolling its shoppers.
#[derive(Debug, Clone)]
pub struct Generated {
    pub trace: Trace,
    pub registry: FaceRegistry,
}

/// Four visually distinct base hues; items cycle through them so each shelf
/// holds two or three near-identical colors. None satisfies the skin filter.
const ITEM_HUES: [[u8; 3]; 4] = [
    [30, 70, 210],   // blue
    [40, 170, 80],   // green
    [120, 60, 200],  // purple
    [190, 210, 40],  // yellow-green
];

const SHIRT_COLORS: [[u8; 3]; 8] = [
    [25, 40, 120],
    [35, 130, 60],
    [15, 110, 115],
    [90, 45, 150],
    [150, 160, 30],
    [100, 20, 25],
    [150, 30, 160],
    [90, 90, 90],
];

const SKIN_TONE: [u8; 3] = [182, 120, 86];

const SHELF0_WEIGHTS: [f64; 10] = [180.0, 240.0, 310.0, 370.0, 450.0, 520.0, 600.0, 680.0, 760.0, 850.0];
const SHELF1_WEIGHTS: [f64; 9] = [205.0, 275.0, 312.0, 410.0, 480.0, 560.0, 640.0, 720.0, 800.0];
const SHELF0_TAGGED: [usize; 4] = [0, 2, 5, 8];
const SHELF1_TAGGED: [usize; 4] = [1, 2, 5, 7];

/// World-to-pixel projection for the store camera. `tilt_deg` measures the
/// optical axis from the vertical; the camera sits at world (0, 0, height)
/// looking along +y.
fn project(cam: &CameraConfig, x: f64, y: f64, z: f64) -> (f64, f64) {
    let theta = cam.tilt_deg.to_radians();
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let fx = (cam.width_px as f64 / 2.0) / (cam.hfov_deg.to_radians() / 2.0).tan();
    let fy = (cam.height_px as f64 / 2.0) / (cam.vfov_deg.to_radians() / 2.0).tan();
    let x_c = x;
    let y_c = -y * cos_t + (cam.height_m - z) * sin_t;
    let z_c = y * sin_t + (cam.height_m - z) * cos_t;
    (
        cam.width_px as f64 / 2.0 + fx * x_c / z_c,
        cam.height_px as f64 / 2.0 + fy * y_c / z_c,
    )
}

fn default_camera() -> CameraConfig {
    CameraConfig {
        camera_id: CAMERA_ID.to_string(),
        height_m: 2.5,
        tilt_deg: 55.0,
        hfov_deg: 60.0,
        vfov_deg: 45.0,
        width_px: 1280,
        height_px: 720,
        clock_offset_s: 0.0,
    }
}

fn item_hue(index: usize) -> [u8; 3] {
    ITEM_HUES[index % ITEM_HUES.len()]
}

fn reference_hist(base: [u8; 3], rng: &mut ChaCha8Rng) -> ColorHistogram {
    let pixels: Vec<[u8; 3]> = (0..200).map(|_| jitter_color(base, 8, rng)).collect();
    ColorHistogram::from_pixels(&pixels)
}

fn jitter_color(base: [u8; 3], spread: i32, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, &b) in out.iter_mut().zip(base.iter()) {
        let v = b as i32 + rng.gen_range(-spread..=spread);
        *o = v.clamp(0, 255) as u8;
    }
    out
}

/// The fixed 19-item / 2-shelf / 8-tagged store. Independent of the
/// scenario seed so different seeds exercise different behavior in the
/// same store.
pub fn default_store() -> StoreConfig {
    let cam = default_camera();
    let mut hist_rng = ChaCha8Rng::seed_from_u64(0xA15E);

    let mut make_items = |weights: &[f64], tagged: &[usize], start: usize| -> Vec<ItemType> {
        weights
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let idx = start + k;
                ItemType {
                    item_id: format!("i{idx:02}"),
                    weight_g: w,
                    reference_hist: reference_hist(item_hue(idx), &mut hist_rng),
                    rfid_tagged: tagged.contains(&k),
                    capacity_per_hand: if w < 400.0 { 2 } else { 1 },
                }
            })
            .collect()
    };

    let catalog0 = make_items(&SHELF0_WEIGHTS, &SHELF0_TAGGED, 0);
    let catalog1 = make_items(&SHELF1_WEIGHTS, &SHELF1_TAGGED, 10);

    // Image-space shelf region: the silhouette of the shelf box, i.e. the
    // convex hull of its eight projected corners. A four-corner cut would
    // clip the top inner edge at the deep end, right where reaches land.
    let polygon = |side: f64| -> Vec<[f64; 2]> {
        let xi = side * SHELF_X_INNER;
        let xo = side * SHELF_X_OUTER;
        let mut corners = Vec::new();
        for x in [xi, xo] {
            for y in [SHELF_Y0, SHELF_Y1] {
                for z in [0.0, SHELF_TOP_Z] {
                    corners.push(project(&cam, x, y, z));
                }
            }
        }
        convex_hull(corners).into_iter().map(|(x, y)| [round2(x), round2(y)]).collect()
    };

    let shelf0_polygon = polygon(-1.0);
    let shelf1_polygon = polygon(1.0);
    StoreConfig {
        trace_id: String::new(),
        cameras: vec![cam.clone()],
        shelves: vec![
            Shelf {
                shelf_id: "shelf0".into(),
                camera_id: CAMERA_ID.into(),
                polygon_px: shelf0_polygon,
                scale_id: "scale0".into(),
                rfid_antenna_id: "ant0".into(),
                catalog: catalog0,
            },
            Shelf {
                shelf_id: "shelf1".into(),
                camera_id: CAMERA_ID.into(),
                polygon_px: shelf1_polygon,
                scale_id: "scale1".into(),
                rfid_antenna_id: "ant1".into(),
                catalog: catalog1,
            },
        ],
        scales: vec!["scale0".into(), "scale1".into()],
        antennas: vec!["ant0".into(), "ant1".into()],
        clock_offsets: BTreeMap::new(),
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn segment_facing(s: &Segment) -> (f64, f64) {
    match s.facing {
        Facing::Fixed(fx, fy) => (fx, fy),
        Facing::Move => {
            let (dx, dy) = (s.p1.0 - s.p0.0, s.p1.1 - s.p0.1);
            let n = (dx * dx + dy * dy).sqrt();
            if n > 1e-9 {
                (dx / n, dy / n)
            } else {
                (0.0, -1.0)
            }
        }
    }
}

/// Heading `elapsed` seconds into a turn from one unit heading to another.
/// The sweep runs at TURN_RATE_DEG_S along the shortest arc, so wide turns
/// take proportionally longer than small course corrections.
fn turn_heading(from: (f64, f64), to: (f64, f64), elapsed: f64) -> (f64, f64) {
    let a0 = from.1.atan2(from.0);
    let a1 = to.1.atan2(to.0);
    let mut delta = a1 - a0;
    while delta > std::f64::consts::PI {
        delta -= 2.0 * std::f64::consts::PI;
    }
    while delta < -std::f64::consts::PI {
        delta += 2.0 * std::f64::consts::PI;
    }
    let turn_s = delta.abs().to_degrees() / TURN_RATE_DEG_S;
    if elapsed >= turn_s || turn_s < 1e-9 {
        return to;
    }
    let a = a0 + delta * (elapsed / turn_s);
    (a.cos(), a.sin())
}

// ---------------------------------------------------------------------------
// Script planning

#[derive(Debug, Clone, Copy, PartialEq)]
enum Facing {
    Move,
    Fixed(f64, f64),
}

#[derive(Debug, Clone)]
struct Segment {
    t0: f64,
    t1: f64,
    p0: (f64, f64),
    p1: (f64, f64),
    facing: Facing,
}

#[derive(Debug, Clone)]
struct ReachWindow {
    t0: f64,
    hand: Hand,
    /// 3D slot position the wrist extends to.
    target: (f64, f64, f64),
    hidden: bool,
}

#[derive(Debug, Clone)]
struct CarryWindow {
    t0: f64,
    t1: f64,
    hand: Hand,
    color: [u8; 3],
}

#[derive(Debug, Clone)]
struct ShopperScript {
    shopper_id: String,
    shirt: [u8; 3],
    embedding_base: Vec<f64>,
    enter_t: f64,
    exit_t: f64,
    segments: Vec<Segment>,
    reaches: Vec<ReachWindow>,
    carries: Vec<CarryWindow>,
    hides: Vec<(f64, f64)>,
    glances: Vec<(f64, f64)>,
    walk_speed: f64,
}

impl ShopperScript {
    fn position(&self, t: f64) -> Option<((f64, f64), (f64, f64))> {
        if t < self.enter_t || t > self.exit_t {
            return None;
        }
        let idx = self.segments.partition_point(|s| s.t1 < t).min(self.segments.len() - 1);
        let s = &self.segments[idx];
        let u = if s.t1 > s.t0 { ((t - s.t0) / (s.t1 - s.t0)).clamp(0.0, 1.0) } else { 0.0 };
        let pos = (s.p0.0 + u * (s.p1.0 - s.p0.0), s.p0.1 + u * (s.p1.1 - s.p0.1));
        Some((pos, self.heading_at(idx, t)))
    }

    /// Heading at time t inside segment idx. Turns are swept at a finite
    /// rate and unfinished turns carry across segment boundaries; snapping
    /// the heading would mirror every lateral joint in a single frame.
    fn heading_at(&self, idx: usize, t: f64) -> (f64, f64) {
        let mut heading = segment_facing(&self.segments[0]);
        for i in 1..=idx {
            let s = &self.segments[i];
            let elapsed = if i == idx { t - s.t0 } else { s.t1 - s.t0 };
            heading = turn_heading(heading, segment_facing(s), elapsed);
        }
        heading
    }

    /// Path length walked up to time t, for the gait phase.
    fn walked(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for s in &self.segments {
            let (dx, dy) = (s.p1.0 - s.p0.0, s.p1.1 - s.p0.1);
            let len = (dx * dx + dy * dy).sqrt();
            if t >= s.t1 {
                acc += len;
            } else if t > s.t0 {
                acc += len * (t - s.t0) / (s.t1 - s.t0);
                break;
            } else {
                break;
            }
        }
        acc
    }
}

#[derive(Debug, Clone)]
struct PlannedAction {
    shopper: usize,
    shelf: usize,
    item: usize,
    count: u32,
    kind: ActionKind,
    adversarial: AdversarialKind,
    /// Tag serial for rfid-tagged items.
    serial: Option<u32>,
    /// Color rendered in the hand; differs from the item's own for switching.
    shown_color: [u8; 3],
    t_grab: f64,
    slot_y: f64,
    hand: Hand,
}

struct Script {
    shoppers: Vec<ShopperScript>,
    actions: Vec<PlannedAction>,
    duration: f64,
}

fn slot_y(shelf: &Shelf, item: usize) -> f64 {
    let n = shelf.catalog.len().max(1);
    SLOT_Y0 + (item as f64 + 0.5) * (SLOT_Y1 - SLOT_Y0) / n as f64
}

/// Monotone-chain convex hull, counterclockwise in image coordinates.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Largest-remainder split of `total` across `mix` shares.
fn apportion(total: usize, mix: [u32; 3]) -> [usize; 3] {
    let sum: u32 = mix.iter().sum();
    let quota: Vec<f64> = mix.iter().map(|&m| total as f64 * m as f64 / sum as f64).collect();
    let mut out: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut rem: Vec<(f64, usize)> =
        quota.iter().enumerate().map(|(i, q)| (q - q.floor(), i)).collect();
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    [out[0], out[1], out[2]]
}

/// Same-hue item on the other shelf with the closest weight, used as the
/// displayed decoy for item-switching.
fn switch_partner(store: &StoreConfig, shelf: usize, item: usize) -> (usize, usize) {
    let own = &store.shelves[shelf].catalog[item];
    let own_hue = item_hue(if shelf == 0 { item } else { 10 + item });
    let other = 1 - shelf;
    let mut best: Option<(f64, usize)> = None;
    for (j, cand) in store.shelves[other].catalog.iter().enumerate() {
        let hue = item_hue(if other == 0 { j } else { 10 + j });
        if hue != own_hue {
            continue;
        }
        let d = (cand.weight_g - own.weight_g).abs();
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    let (_, j) = best.expect("every hue appears on both shelves");
    (other, j)
}

fn plan_script(scenario: &Scenario, rng: &mut ChaCha8Rng) -> Result<Script, SimgenError> {
    let store = &scenario.store;
    let n = scenario.n_shoppers;

    // Action specs first: shopper, shelf, item, kind. Round-robin over
    // shoppers keeps per-shopper loads even.
    struct Spec {
        shopper: usize,
        shelf: usize,
        item: usize,
        count: u32,
        kind: ActionKind,
        adversarial: AdversarialKind,
        serial: Option<u32>,
    }
    let mut specs: Vec<Spec> = Vec::with_capacity(scenario.n_actions);
    let mut held: Vec<Vec<(usize, usize, Option<u32>)>> = vec![Vec::new(); n];
    let mut serial_next: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for i in 0..scenario.n_actions {
        let shopper = i % n;
        let dropoff = !held[shopper].is_empty() && rng.gen_bool(0.18);
        if dropoff {
            let k = rng.gen_range(0..held[shopper].len());
            let (shelf, item, serial) = held[shopper].remove(k);
            specs.push(Spec {
                shopper,
                shelf,
                item,
                count: 1,
                kind: ActionKind::Dropoff,
                adversarial: AdversarialKind::None,
                serial,
            });
        } else {
            let shelf = rng.gen_range(0..store.shelves.len());
            let item = rng.gen_range(0..store.shelves[shelf].catalog.len());
            let it = &store.shelves[shelf].catalog[item];
            let count = if it.capacity_per_hand >= 2 && rng.gen_bool(0.07) { 2 } else { 1 };
            let mut first_serial = None;
            for _ in 0..count {
                let serial = it.rfid_tagged.then(|| {
                    let c = serial_next.entry((shelf, item)).or_insert(0);
                    *c += 1;
                    *c
                });
                if first_serial.is_none() {
                    first_serial = serial;
                }
                held[shopper].push((shelf, item, serial));
            }
            specs.push(Spec {
                shopper,
                shelf,
                item,
                count,
                kind: ActionKind::Pickup,
                adversarial: AdversarialKind::None,
                serial: first_serial,
            });
        }
    }

    // Adversarial classes go to pickups only.
    let n_adv = ((scenario.adversarial_ratio * scenario.n_actions as f64).round() as usize)
        .min(scenario.n_actions);
    let counts = apportion(n_adv, scenario.adversarial_mix);
    let mut pickups: Vec<usize> =
        (0..specs.len()).filter(|&i| specs[i].kind == ActionKind::Pickup).collect();
    if pickups.len() < n_adv {
        return Err(SimgenError::Infeasible(format!(
            "{n_adv} adversarial actions requested but only {} pickups scheduled",
            pickups.len()
        )));
    }
    // Fisher-Yates with the script rng keeps the choice seed-stable.
    for i in (1..pickups.len()).rev() {
        let j = rng.gen_range(0..=i);
        pickups.swap(i, j);
    }
    let mut cursor = 0;
    for (class, &count) in [
        AdversarialKind::ItemSwitching,
        AdversarialKind::HandHiding,
        AdversarialKind::SensorTampering,
    ]
    .iter()
    .zip(counts.iter())
    {
        for _ in 0..count {
            specs[pickups[cursor]].adversarial = *class;
            cursor += 1;
        }
    }

    // Per-shopper sequential timelines with a shared per-scale calendar.
    let mut shoppers: Vec<ShopperScript> = (0..n)
        .map(|j| {
            ShopperScript {
                shopper_id: format!("s{j:02}"),
                shirt: SHIRT_COLORS[j % SHIRT_COLORS.len()],
                embedding_base: Vec::new(),
                enter_t: 1.0 + j as f64 * 2.2 + rng.gen_range(0.0..0.8),
                exit_t: f64::INFINITY,
                segments: Vec::new(),
                reaches: Vec::new(),
                carries: Vec::new(),
                hides: Vec::new(),
                glances: Vec::new(),
                walk_speed: rng.gen_range(1.0..1.3),
            }
        })
        .collect();

    // The aisle admits one walker at a time. Every trip (entry walk, shelf
    // visit, exit walk) reserves the aisle end to end; between trips a
    // shopper waits parked at their home spot facing the entrance.
    enum Phase {
        Enter,
        Act(usize),
        Exit,
        Done,
    }
    struct Walker {
        pos: (f64, f64),
        t: f64,
        phase: Phase,
    }
    let mut walkers: Vec<Walker> = (0..n)
        .map(|j| Walker { pos: DOOR, t: shoppers[j].enter_t, phase: Phase::Enter })
        .collect();
    let mut per_shopper_actions: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, s) in specs.iter().enumerate() {
        per_shopper_actions[s.shopper].push(i);
    }

    let mut aisle_free: f64 = 0.0;
    let mut scale_free: Vec<f64> = vec![0.0; store.shelves.len()];
    let mut planned: Vec<PlannedAction> = Vec::new();

    // Chronological greedy: always advance the earliest-ready shopper, so
    // aisle grants go out first come, first served.
    loop {
        let mut pick: Option<usize> = None;
        for j in 0..n {
            if matches!(walkers[j].phase, Phase::Done) {
                continue;
            }
            if pick.map_or(true, |p| walkers[j].t < walkers[p].t) {
                pick = Some(j);
            }
        }
        let Some(j) = pick else { break };
        let start = walkers[j].t.max(aisle_free);
        let home = home_spot(j);
        let sh = &mut shoppers[j];

        if let Phase::Enter = walkers[j].phase {
            // Spawn at the door, pause at the kiosk facing the camera so
            // the registry gets a clean streak, then park at home.
            sh.enter_t = start;
            let mut t = start;
            let mut pos = DOOR;
            for leg in [KIOSK] {
                let t1 = t + dist(pos, leg) / sh.walk_speed;
                sh.segments.push(Segment { t0: t, t1, p0: pos, p1: leg, facing: Facing::Move });
                t = t1;
                pos = leg;
            }
            sh.segments.push(Segment {
                t0: t,
                t1: t + KIOSK_PAUSE_S,
                p0: KIOSK,
                p1: KIOSK,
                facing: Facing::Fixed(0.0, -1.0),
            });
            t += KIOSK_PAUSE_S;
            for leg in [(0.0, home.1), home] {
                let d = dist(pos, leg);
                if d < 1e-9 {
                    continue;
                }
                let t1 = t + d / sh.walk_speed;
                sh.segments.push(Segment { t0: t, t1, p0: pos, p1: leg, facing: Facing::Move });
                t = t1;
                pos = leg;
            }
            walkers[j].pos = home;
            walkers[j].t = t;
            walkers[j].phase = if per_shopper_actions[j].is_empty() {
                Phase::Exit
            } else {
                Phase::Act(0)
            };
            aisle_free = t + AISLE_GAP_S;
            continue;
        }

        if let Phase::Exit = walkers[j].phase {
            let mut t = walkers[j].t;
            if start - t > 1e-9 {
                sh.segments.push(Segment {
                    t0: t,
                    t1: start,
                    p0: home,
                    p1: home,
                    facing: Facing::Fixed(0.0, -1.0),
                });
                t = start;
            }
            let mut pos = home;
            for leg in [(0.0, home.1), DOOR] {
                let d = dist(pos, leg);
                if d < 1e-9 {
                    continue;
                }
                let t1 = t + d / sh.walk_speed;
                sh.segments.push(Segment { t0: t, t1, p0: pos, p1: leg, facing: Facing::Move });
                t = t1;
                pos = leg;
            }
            sh.exit_t = t;
            walkers[j].t = t;
            walkers[j].phase = Phase::Done;
            aisle_free = t + AISLE_GAP_S;
            continue;
        }

        let Phase::Act(k) = walkers[j].phase else { unreachable!() };
        let spec_idx = per_shopper_actions[j][k];
        let spec = &specs[spec_idx];
        let shelf = &store.shelves[spec.shelf];
        let side = if spec.shelf == 0 { -1.0 } else { 1.0 };
        let sy = slot_y(shelf, spec.item);
        let stand = (side * STAND_X, sy);

        // Out to the centre line, along it, step to the spot.
        let legs = [(0.0, home.1), (0.0, sy), stand];
        let walk_s: f64 = {
            let mut p = home;
            let mut w = 0.0;
            for &leg in &legs {
                w += dist(p, leg) / sh.walk_speed;
                p = leg;
            }
            w
        };

        let lead = if spec.adversarial == AdversarialKind::SensorTampering { TAMPER_LEAD_S } else { 0.0 };
        let arrive = start + walk_s;
        let t_grab = (arrive + 0.3 + GRAB_OFFSET_S).max(scale_free[spec.shelf] + lead);
        let depart = t_grab - GRAB_OFFSET_S + REACH_TOTAL_S + 0.2;

        // Wait out the aisle grant at home, facing the entrance.
        let mut t = walkers[j].t;
        if start - t > 1e-9 {
            sh.segments.push(Segment {
                t0: t,
                t1: start,
                p0: home,
                p1: home,
                facing: Facing::Fixed(0.0, -1.0),
            });
            t = start;
        }
        let mut pos = home;
        for leg in legs {
            let d = dist(pos, leg);
            if d < 1e-9 {
                continue;
            }
            let t1 = t + d / sh.walk_speed;
            sh.segments.push(Segment { t0: t, t1, p0: pos, p1: leg, facing: Facing::Move });
            t = t1;
            pos = leg;
        }

        let face = Facing::Fixed(side, 0.0);
        scale_free[spec.shelf] = scale_free[spec.shelf].max(t_grab + SCALE_BUSY_S);
        let reach_start = t_grab - GRAB_OFFSET_S;
        let reach_end = reach_start + REACH_TOTAL_S;
        sh.segments.push(Segment { t0: t, t1: depart, p0: stand, p1: stand, facing: face });

        let hand = if rng.gen_bool(0.5) { Hand::Left } else { Hand::Right };
        let hidden = spec.adversarial == AdversarialKind::HandHiding;
        sh.reaches.push(ReachWindow {
            t0: reach_start,
            hand,
            target: (side * 0.92, sy, SHELF_TOP_Z + 0.02),
            hidden,
        });
        if hidden {
            sh.hides.push((reach_start - 0.15, reach_end + 0.15));
        } else {
            let own_hue = item_hue(if spec.shelf == 0 { spec.item } else { 10 + spec.item });
            let color = if spec.adversarial == AdversarialKind::ItemSwitching {
                let (ps, pi) = switch_partner(store, spec.shelf, spec.item);
                item_hue(if ps == 0 { pi } else { 10 + pi })
            } else {
                own_hue
            };
            let (c0, c1) = match spec.kind {
                ActionKind::Pickup => (t_grab + 0.1, t_grab + 1.3),
                ActionKind::Dropoff => (t_grab - 1.3, t_grab - 0.1),
            };
            sh.carries.push(CarryWindow { t0: c0, t1: c1, hand, color });
        }

        planned.push(PlannedAction {
            shopper: j,
            shelf: spec.shelf,
            item: spec.item,
            count: spec.count,
            kind: spec.kind,
            adversarial: spec.adversarial,
            serial: spec.serial,
            shown_color: [0, 0, 0],
            t_grab,
            slot_y: sy,
            hand,
        });

        // Retreat home and release the aisle.
        let back = [(0.0, sy), (0.0, home.1), home];
        let mut t = depart;
        let mut pos = stand;
        for leg in back {
            let d = dist(pos, leg);
            if d < 1e-9 {
                continue;
            }
            let t1 = t + d / sh.walk_speed;
            sh.segments.push(Segment { t0: t, t1, p0: pos, p1: leg, facing: Facing::Move });
            t = t1;
            pos = leg;
        }

        walkers[j].pos = home;
        walkers[j].t = t;
        walkers[j].phase = if k + 1 < per_shopper_actions[j].len() {
            Phase::Act(k + 1)
        } else {
            Phase::Exit
        };
        aisle_free = t + AISLE_GAP_S;
    }

    // Glance schedules over every long stationary stretch.
    for sh in shoppers.iter_mut() {
        let standing: Vec<(f64, f64)> = sh
            .segments
            .iter()
            .filter(|s| matches!(s.facing, Facing::Fixed(..)) && s.t1 - s.t0 > 1.0)
            .map(|s| (s.t0, s.t1))
            .collect();
        for (a, b) in standing {
            let slots = ((b - a) / GLANCE_EVERY_S) as usize + 1;
            for i in 0..slots {
                let g0 = a + i as f64 * GLANCE_EVERY_S + rng.gen_range(0.0..1.2);
                let g1 = g0 + GLANCE_LEN_S;
                if g1 <= b {
                    sh.glances.push((g0, g1));
                }
            }
        }
    }

    planned.sort_by(|a, b| a.t_grab.total_cmp(&b.t_grab).then(a.shopper.cmp(&b.shopper)));
    let duration = shoppers.iter().map(|s| s.exit_t).fold(0.0, f64::max) + 1.0;
    Ok(Script { shoppers, actions: planned, duration })
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

// ---------------------------------------------------------------------------
// Pose synthesis

struct JointSpec {
    name: JointName,
    /// Lateral offset along the body's right vector, meters.
    side: f64,
    /// Offset along the facing vector.
    fwd: f64,
    z: f64,
    /// Gait swing amplitude along facing; sign alternates left/right.
    swing: f64,
}

const POSE: [JointSpec; 18] = [
    JointSpec { name: JointName::Nose, side: 0.0, fwd: 0.10, z: 1.62, swing: 0.0 },
    JointSpec { name: JointName::Neck, side: 0.0, fwd: 0.0, z: 1.49, swing: 0.0 },
    JointSpec { name: JointName::LeftEye, side: -0.035, fwd: 0.09, z: 1.65, swing: 0.0 },
    JointSpec { name: JointName::RightEye, side: 0.035, fwd: 0.09, z: 1.65, swing: 0.0 },
    JointSpec { name: JointName::LeftEar, side: -0.075, fwd: 0.02, z: 1.61, swing: 0.0 },
    JointSpec { name: JointName::RightEar, side: 0.075, fwd: 0.02, z: 1.61, swing: 0.0 },
    JointSpec { name: JointName::LeftShoulder, side: -0.19, fwd: 0.0, z: 1.43, swing: 0.0 },
    JointSpec { name: JointName::RightShoulder, side: 0.19, fwd: 0.0, z: 1.43, swing: 0.0 },
    JointSpec { name: JointName::LeftElbow, side: -0.22, fwd: 0.02, z: 1.16, swing: 0.08 },
    JointSpec { name: JointName::RightElbow, side: 0.22, fwd: 0.02, z: 1.16, swing: -0.08 },
    JointSpec { name: JointName::LeftWrist, side: -0.23, fwd: 0.06, z: 0.93, swing: 0.14 },
    JointSpec { name: JointName::RightWrist, side: 0.23, fwd: 0.06, z: 0.93, swing: -0.14 },
    JointSpec { name: JointName::LeftHip, side: -0.11, fwd: 0.0, z: 0.93, swing: 0.0 },
    JointSpec { name: JointName::RightHip, side: 0.11, fwd: 0.0, z: 0.93, swing: 0.0 },
    JointSpec { name: JointName::LeftKnee, side: -0.12, fwd: 0.0, z: 0.50, swing: 0.12 },
    JointSpec { name: JointName::RightKnee, side: 0.12, fwd: 0.0, z: 0.50, swing: -0.12 },
    JointSpec { name: JointName::LeftAnkle, side: -0.13, fwd: 0.0, z: 0.08, swing: 0.18 },
    JointSpec { name: JointName::RightAnkle, side: 0.13, fwd: 0.0, z: 0.08, swing: -0.18 },
];

/// 3D joint positions for one shopper at time t: template pose around the
/// body position, acting wrist (and elbow) overridden by the reach animation.
fn joints_3d(sh: &ShopperScript, t: f64) -> Option<Vec<(JointName, f64, f64, f64)>> {
    let (pos, facing) = sh.position(t)?;
    let f = facing;
    let r = (f.1, -f.0);
    let walking = {
        // Gait swing only while actually moving.
        let idx = sh.segments.partition_point(|s| s.t1 < t).min(sh.segments.len() - 1);
        let s = &sh.segments[idx];
        s.p0 != s.p1
    };
    let phase = if walking { (sh.walked(t) / 0.75) * std::f64::consts::TAU } else { 0.0 };
    let gait = if walking { phase.sin() } else { 0.0 };

    let mut out: Vec<(JointName, f64, f64, f64)> = POSE
        .iter()
        .map(|js| {
            let fwd = js.fwd + js.swing * gait;
            let x = pos.0 + js.side * r.0 + fwd * f.0;
            let y = pos.1 + js.side * r.1 + fwd * f.1;
            (js.name, x, y, js.z)
        })
        .collect();

    // Reach override.
    for rw in &sh.reaches {
        let tau = t - rw.t0;
        if !(0.0..=REACH_TOTAL_S).contains(&tau) {
            continue;
        }
        let u = if tau < REACH_OUT_S {
            tau / REACH_OUT_S
        } else if tau < REACH_OUT_S + REACH_HOLD_S {
            1.0
        } else {
            (REACH_TOTAL_S - tau) / REACH_RETURN_S
        };
        let (wrist, elbow, shoulder) = match rw.hand {
            Hand::Left => (JointName::LeftWrist, JointName::LeftElbow, JointName::LeftShoulder),
            _ => (JointName::RightWrist, JointName::RightElbow, JointName::RightShoulder),
        };
        let shoulder_pos = out.iter().find(|(n, ..)| *n == shoulder).map(|&(_, x, y, z)| (x, y, z)).unwrap();
        for (n, x, y, z) in out.iter_mut() {
            if *n == wrist {
                *x = *x * (1.0 - u) + rw.target.0 * u;
                *y = *y * (1.0 - u) + rw.target.1 * u;
                *z = *z * (1.0 - u) + rw.target.2 * u;
            } else if *n == elbow {
                let ex = (shoulder_pos.0 + rw.target.0) / 2.0;
                let ey = (shoulder_pos.1 + rw.target.1) / 2.0;
                let ez = (shoulder_pos.2 + rw.target.2) / 2.0 - 0.05;
                *x = *x * (1.0 - 0.8 * u) + ex * 0.8 * u;
                *y = *y * (1.0 - 0.8 * u) + ey * 0.8 * u;
                *z = *z * (1.0 - 0.8 * u) + ez * 0.8 * u;
            }
        }
    }
    Some(out)
}

fn in_windows(windows: &[(f64, f64)], t: f64) -> bool {
    windows.iter().any(|&(a, b)| t >= a && t <= b)
}

// ---------------------------------------------------------------------------
// Generation

pub fn generate(scenario: &Scenario) -> Result<Generated, SimgenError> {
    validate_scenario(scenario)?;
    let store = &scenario.store;
    let cam = &store.cameras[0];

    let mut rng_script = stream_rng(scenario.seed, 1);
    let script = plan_script(scenario, &mut rng_script)?;

    // Identity material.
    let mut rng_base = stream_rng(scenario.seed, 2);
    let bases: Vec<Vec<f64>> = (0..scenario.n_shoppers)
        .map(|_| {
            let v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| gaussian(&mut rng_base)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let mut shoppers = script.shoppers;
    for (sh, base) in shoppers.iter_mut().zip(&bases) {
        sh.embedding_base = base.clone();
    }

    let mut rng_reg = stream_rng(scenario.seed, 7);
    let mut registry = FaceRegistry::default();
    for sh in &shoppers {
        let samples: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                sh.embedding_base
                    .iter()
                    .map(|&v| round3(v + EMBEDDING_NOISE * gaussian(&mut rng_reg)))
                    .collect()
            })
            .collect();
        registry.register(&sh.shopper_id, &samples).expect("enrollment embeddings are valid");
    }

    // Frames.
    let mut rng_jitter = stream_rng(scenario.seed, 3);
    let mut rng_limbs = stream_rng(scenario.seed, 4);
    let mut rng_embed = stream_rng(scenario.seed, 5);
    let mut rng_pixels = stream_rng(scenario.seed, 6);

    let n_frames = (script.duration * FRAME_RATE_HZ).ceil() as u64;
    let mut frames: Vec<FrameRecord> = Vec::with_capacity(n_frames as usize);
    for k in 0..n_frames {
        let t = k as f64 / FRAME_RATE_HZ;
        let mut skeletons: Vec<Skeleton> = Vec::new();
        let mut acting: Vec<(usize, Hand)> = Vec::new(); // skeleton index, reaching hand
        for sh in shoppers.iter() {
            let Some(joints) = joints_3d(sh, t) else { continue };
            let hidden = in_windows(&sh.hides, t);
            let mut kps: Vec<Keypoint> = Vec::new();
            for (name, x, y, z) in &joints {
                let (mut px, mut py) = project(cam, *x, *y, *z);
                px += scenario.keypoint_jitter_px * gaussian(&mut rng_jitter);
                py += scenario.keypoint_jitter_px * gaussian(&mut rng_jitter);
                let conf = rng_jitter.gen_range(0.75..0.95);
                // The roll happens even at zero noise so the rng stream
                // stays aligned across noise settings.
                let dropped = rng_jitter.gen_bool(KEYPOINT_DROPOUT);
                if dropped && scenario.keypoint_jitter_px > 0.0 {
                    continue;
                }
                if hidden && matches!(name, JointName::LeftWrist | JointName::RightWrist) {
                    continue;
                }
                let (px, py) = (round2(px), round2(py));
                if px < 0.0 || px > cam.width_px as f64 || py < 0.0 || py > cam.height_px as f64 {
                    continue;
                }
                kps.push(Keypoint { joint: *name, x: px, y: py, confidence: round2(conf) });
            }
            if kps.len() < 3 {
                continue;
            }
            let mut skel = Skeleton::new(kps);

            // Shirt histogram every frame; drives the tracker color fallback.
            let pixels: Vec<[u8; 3]> = (0..60).map(|_| jitter_color(sh.shirt, 4, &mut rng_pixels)).collect();
            skel.upper_body_hist = Some(ColorHistogram::from_pixels(&pixels));

            // Face embedding while facing the camera or glancing at it.
            let (pos, facing) = sh.position(t).unwrap();
            let toward = {
                let n = (pos.0 * pos.0 + pos.1 * pos.1).sqrt().max(1e-9);
                (-pos.0 / n, -pos.1 / n)
            };
            let dot = facing.0 * toward.0 + facing.1 * toward.1;
            if dot > 0.55 || in_windows(&sh.glances, t) {
                let emb: Vec<f64> = sh
                    .embedding_base
                    .iter()
                    .map(|&v| round3(v + EMBEDDING_NOISE * gaussian(&mut rng_embed)))
                    .collect();
                skel.face_embedding = Some(emb);
            }

            // Carried-item pixels.
            for cw in &sh.carries {
                if t >= cw.t0 && t <= cw.t1 {
                    let mut px: Vec<[u8; 3]> =
                        (0..52).map(|_| jitter_color(cw.color, 8, &mut rng_pixels)).collect();
                    px.extend((0..8).map(|_| jitter_color(SKIN_TONE, 10, &mut rng_pixels)));
                    skel.hand_item_pixels.insert(cw.hand, px);
                }
            }

            let idx = skeletons.len();
            for rw in &sh.reaches {
                if !rw.hidden && t >= rw.t0 && t <= rw.t0 + REACH_TOTAL_S {
                    acting.push((idx, rw.hand));
                }
            }
            skeletons.push(skel);
        }

        // Limb candidate pool on every third frame while anyone reaches.
        let limbs = if k % 3 == 0 && !acting.is_empty() {
            Some(limb_record(&skeletons, &acting, &mut rng_limbs))
        } else {
            None
        };

        frames.push(FrameRecord { camera_id: CAMERA_ID.to_string(), frame: k, t, skeletons, limbs });
    }

    // Weight streams.
    let mut rng_weight = stream_rng(scenario.seed, 8);
    let mut weights: BTreeMap<String, Vec<ScaleReading>> = BTreeMap::new();
    for (si, shelf) in store.shelves.iter().enumerate() {
        let baseline: f64 = shelf.catalog.iter().map(|it| it.weight_g * 6.0).sum();
        let acts: Vec<&PlannedAction> = script.actions.iter().filter(|a| a.shelf == si).collect();
        let n_samples = (script.duration * SCALE_RATE_HZ).ceil() as u64;
        let mut series = Vec::with_capacity(n_samples as usize);
        for s in 0..n_samples {
            let t = s as f64 / SCALE_RATE_HZ;
            let mut v = baseline;
            for a in &acts {
                let delta = store.shelves[a.shelf].catalog[a.item].weight_g * a.count as f64;
                let signed = match a.kind {
                    ActionKind::Pickup => -delta,
                    ActionKind::Dropoff => delta,
                };
                v += signed * step_shape(t - a.t_grab);
                if a.adversarial == AdversarialKind::SensorTampering {
                    let tau = t - (a.t_grab - TAMPER_LEAD_S);
                    let press_len = TAMPER_LEAD_S - TAMPER_PRESS_END_S;
                    if (0.0..press_len).contains(&tau) {
                        let phase = (tau * TAMPER_PRESS_HZ).fract();
                        if phase < 0.5 {
                            v += TAMPER_PRESS_G;
                        }
                    }
                }
            }
            v += scenario.weight_noise_g * gaussian(&mut rng_weight);
            series.push(ScaleReading { scale_id: shelf.scale_id.clone(), t, grams: round2(v) });
        }
        weights.insert(shelf.scale_id.clone(), series);
    }

    // RFID episodes.
    let mut rng_rssi = stream_rng(scenario.seed, 9);
    let mut rfid: BTreeMap<String, Vec<RfidSample>> = BTreeMap::new();
    for ant in &store.antennas {
        rfid.insert(ant.clone(), Vec::new());
    }
    for a in &script.actions {
        let Some(serial) = a.serial else { continue };
        let shelf = &store.shelves[a.shelf];
        let item = &shelf.catalog[a.item];
        let side = if a.shelf == 0 { -1.0 } else { 1.0 };
        let antenna_pos = (side * 1.1, (SHELF_Y0 + SHELF_Y1) / 2.0, 1.15);
        let slot = (side * 0.95, a.slot_y, SHELF_TOP_Z);
        let sh = &shoppers[a.shopper];
        let tag_id = format!("{}#{serial:02}", item.item_id);

        let (w0, w1) = match a.kind {
            ActionKind::Pickup => (a.t_grab - 0.3, a.t_grab + 2.6),
            ActionKind::Dropoff => (a.t_grab - 2.6, a.t_grab + 0.3),
        };
        let steps = ((w1 - w0) * RFID_RATE_HZ).round() as usize;
        let out = rfid.get_mut(&shelf.rfid_antenna_id).unwrap();
        for s in 0..=steps {
            let t = w0 + s as f64 / RFID_RATE_HZ;
            let on_shelf = match a.kind {
                ActionKind::Pickup => t < a.t_grab,
                ActionKind::Dropoff => t >= a.t_grab,
            };
            let tag = if on_shelf {
                slot
            } else {
                // Carried: between the slot and a hand at the shopper's side,
                // blending out over the return leg.
                let (pos, facing) = sh.position(t.clamp(sh.enter_t, sh.exit_t)).unwrap();
                let hand = (pos.0 - 0.1 * facing.0, pos.1 - 0.1 * facing.1, 0.95);
                let blend = ((t - a.t_grab).abs() / (REACH_RETURN_S + REACH_HOLD_S)).min(1.0);
                (
                    slot.0 * (1.0 - blend) + hand.0 * blend,
                    slot.1 * (1.0 - blend) + hand.1 * blend,
                    slot.2 * (1.0 - blend) + hand.2 * blend,
                )
            };
            let d = ((tag.0 - antenna_pos.0).powi(2)
                + (tag.1 - antenna_pos.1).powi(2)
                + (tag.2 - antenna_pos.2).powi(2))
            .sqrt()
            .max(0.05);
            let rssi = -32.0 - 20.0 * d.log10() + scenario.rssi_noise_db * gaussian(&mut rng_rssi);
            out.push(RfidSample {
                antenna_id: shelf.rfid_antenna_id.clone(),
                tag_id: tag_id.clone(),
                t: round3(t),
                rssi_dbm: round2(rssi),
            });
        }
    }
    for samples in rfid.values_mut() {
        samples.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.tag_id.cmp(&b.tag_id)));
    }

    // Ground truth.
    let ground_truth: Vec<GroundTruthAction> = script
        .actions
        .iter()
        .map(|a| GroundTruthAction {
            shopper_id: shoppers[a.shopper].shopper_id.clone(),
            shelf_id: store.shelves[a.shelf].shelf_id.clone(),
            item_type: store.shelves[a.shelf].catalog[a.item].item_id.clone(),
            count: a.count,
            kind: a.kind,
            adversarial: a.adversarial,
            t: a.t_grab,
        })
        .collect();

    let mut store_out = store.clone();
    store_out.trace_id = format!("sim-{:08x}", scenario.seed);

    let trace = Trace {
        store: store_out,
        frames: BTreeMap::from([(CAMERA_ID.to_string(), frames)]),
        weights,
        rfid,
        ground_truth: Some(ground_truth),
    };
    Ok(Generated { trace, registry })
}

fn validate_scenario(scenario: &Scenario) -> Result<(), SimgenError> {
    if !(0.0..=1.0).contains(&scenario.adversarial_ratio) {
        return Err(SimgenError::Invalid("adversarial_ratio must be in [0, 1]".into()));
    }
    if scenario.adversarial_mix.iter().any(|&m| m == 0) {
        return Err(SimgenError::Invalid("adversarial_mix shares must be positive".into()));
    }
    if scenario.n_shoppers == 0 {
        return Err(SimgenError::Invalid("need at least one shopper".into()));
    }
    if scenario.n_shoppers > MAX_SHOPPERS {
        return Err(SimgenError::Infeasible(format!(
            "{} concurrent shoppers exceed the aisle capacity of {MAX_SHOPPERS}",
            scenario.n_shoppers
        )));
    }
    if scenario.store.cameras.is_empty() || scenario.store.shelves.is_empty() {
        return Err(SimgenError::Invalid("store needs a camera and shelves".into()));
    }
    if scenario.keypoint_jitter_px < 0.0
        || scenario.weight_noise_g < 0.0
        || scenario.rssi_noise_db < 0.0
    {
        return Err(SimgenError::Invalid("noise levels must be non-negative".into()));
    }
    Ok(())
}

/// Inertial bounce: overshoot to 1.2x the step over the first 0.2 s, settle
/// back to the new level over the next 0.2 s.
fn step_shape(tau: f64) -> f64 {
    if tau < 0.0 {
        0.0
    } else if tau < 0.2 {
        1.2 * (tau / 0.2)
    } else if tau < 0.4 {
        1.2 - 0.2 * ((tau - 0.2) / 0.2)
    } else {
        1.0
    }
}

fn limb_record(
    skeletons: &[Skeleton],
    acting: &[(usize, Hand)],
    rng: &mut ChaCha8Rng,
) -> LimbRecord {
    let mut elbows: Vec<ElbowCandidate> = Vec::new();
    let mut wrists: Vec<WristCandidate> = Vec::new();
    // (owner skeleton, side) per candidate, for the synthetic align scores.
    let mut elbow_owner: Vec<(usize, LimbSide)> = Vec::new();
    let mut wrist_owner: Vec<(usize, LimbSide)> = Vec::new();

    for &(si, _) in acting {
        let skel = &skeletons[si];
        let hist = skel.upper_body_hist.clone().expect("rendered skeletons carry histograms");
        for (side, ej, wj) in [
            (LimbSide::Left, JointName::LeftElbow, JointName::LeftWrist),
            (LimbSide::Right, JointName::RightElbow, JointName::RightWrist),
        ] {
            let (Some(e), Some(w)) = (skel.joint(ej), skel.joint(wj)) else { continue };
            elbows.push(ElbowCandidate {
                skeleton: si,
                side,
                x: round2(e.x + rng.gen_range(-1.0..1.0)),
                y: round2(e.y + rng.gen_range(-1.0..1.0)),
                confidence: round2(rng.gen_range(0.7..0.95)),
                cluster: Vec::new(),
                hist: hist.clone(),
            });
            elbow_owner.push((si, side));
            let mut cluster: Vec<[f64; 2]> = (0..6)
                .map(|_| {
                    [round2(w.x + rng.gen_range(-2.5..2.5)), round2(w.y + rng.gen_range(-2.5..2.5))]
                })
                .collect();
            cluster.push([round2(w.x + 20.0), round2(w.y + 14.0)]);
            wrists.push(WristCandidate {
                x: round2(w.x + rng.gen_range(-1.0..1.0)),
                y: round2(w.y + rng.gen_range(-1.0..1.0)),
                confidence: round2(rng.gen_range(0.7..0.95)),
                cluster,
                hist: hist.clone(),
            });
            wrist_owner.push((si, side));
        }
    }

    let align: Vec<Vec<f64>> = elbow_owner
        .iter()
        .map(|eo| {
            wrist_owner
                .iter()
                .map(|wo| {
                    if eo == wo {
                        round2(rng.gen_range(0.85..0.95))
                    } else {
                        round2(rng.gen_range(0.08..0.2))
                    }
                })
                .collect()
        })
        .collect();

    LimbRecord { elbows, wrists, align }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Writes the trace file set plus `registry.json` into `dir`.
pub fn write_generated(dir: &Path, generated: &Generated) -> Result<(), crate::trace::TraceError> {
    crate::trace::write_trace(dir, &generated.trace)?;
    crate::identity::save_registry(&dir.join("registry.json"), &generated.registry).map_err(|e| {
        crate::trace::TraceError::Io { path: dir.join("registry.json").display().to_string(), source: e }
    })?;
    Ok(())
}
