//! Canonical data model and trace file formats.
//!
//! A trace is a directory of line-delimited JSON files, one record per line,
//! plus a single `store.json` document describing cameras, shelves, and the
//! item catalog. The first line of every JSONL file is a header carrying a
//! versioned schema string and the trace id, so files from different traces
//! cannot be mixed silently.
//!
//! Files:
//! - `store.json`      store configuration (single JSON document)
//! - `frames.jsonl`    per-camera skeleton frames
//! - `weights.jsonl`   weight scale samples
//! - `rfid.jsonl`      RFID RSSI samples
//! - `groundtruth.jsonl` optional ground-truth shopper actions

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

pub const STORE_SCHEMA: &str = "aisle.store.v1";
pub const FRAMES_SCHEMA: &str = "aisle.frames.v1";
pub const WEIGHTS_SCHEMA: &str = "aisle.weights.v1";
pub const RFID_SCHEMA: &str = "aisle.rfid.v1";
pub const GROUNDTRUTH_SCHEMA: &str = "aisle.groundtruth.v1";

pub const EMBEDDING_DIM: usize = 128;
pub const HIST_BINS: usize = 384;

/// Anatomical joints reported per skeleton. At most one keypoint per joint.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum JointName {
    Nose,
    Neck,
    LeftEye,
    RightEye,
    LeftEar,
    RightEar,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl JointName {
    pub const ALL: [JointName; 18] = [
        JointName::Nose,
        JointName::Neck,
        JointName::LeftEye,
        JointName::RightEye,
        JointName::LeftEar,
        JointName::RightEar,
        JointName::LeftShoulder,
        JointName::RightShoulder,
        JointName::LeftElbow,
        JointName::RightElbow,
        JointName::LeftWrist,
        JointName::RightWrist,
        JointName::LeftHip,
        JointName::RightHip,
        JointName::LeftKnee,
        JointName::RightKnee,
        JointName::LeftAnkle,
        JointName::RightAnkle,
    ];
}

impl fmt::Display for JointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_string(self).unwrap();
        write!(f, "{}", s.trim_matches('"'))
    }
}

/// One detected joint in pixel coordinates with a confidence in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub joint: JointName,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "c")]
    pub confidence: f64,
}

/// A left/right hand, or the ankle-projected stand-in used when both
/// hands are hidden from the camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
    AnkleFallback,
}

/// L1-normalized 384-bin color histogram (3 channels x 128 bins).
///
/// Stored dense in memory; serialized as `[bin, value]` pairs for the
/// nonzero bins only, since histograms built from a few hundred pixels
/// touch a small fraction of the 384 bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorHistogram {
    pub bins: Vec<f64>,
}

impl Serialize for ColorHistogram {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let nonzero: Vec<(u16, f64)> = self
            .bins
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as u16, v))
            .collect();
        nonzero.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ColorHistogram {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let nonzero = Vec::<(u16, f64)>::deserialize(deserializer)?;
        let mut bins = vec![0.0; HIST_BINS];
        for (i, v) in nonzero {
            let idx = i as usize;
            if idx >= HIST_BINS {
                return Err(serde::de::Error::custom(format!(
                    "histogram bin index {idx} out of range"
                )));
            }
            bins[idx] = v;
        }
        Ok(ColorHistogram { bins })
    }
}

impl ColorHistogram {
    /// Builds a histogram from raw bin counts, L1-normalizing unless the
    /// total mass is zero.
    pub fn from_counts(counts: &[f64]) -> Self {
        assert_eq!(counts.len(), HIST_BINS, "histogram must have {HIST_BINS} bins");
        let sum: f64 = counts.iter().sum();
        let bins = if sum > 0.0 {
            counts.iter().map(|c| c / sum).collect()
        } else {
            counts.to_vec()
        };
        ColorHistogram { bins }
    }

    /// Histogram of a pixel list: per channel, 128 bins of width 2.
    pub fn from_pixels(pixels: &[[u8; 3]]) -> Self {
        let mut counts = vec![0.0; HIST_BINS];
        for p in pixels {
            for (ch, &v) in p.iter().enumerate() {
                counts[ch * 128 + (v as usize) / 2] += 1.0;
            }
        }
        ColorHistogram::from_counts(&counts)
    }

    pub fn is_zero(&self) -> bool {
        self.bins.iter().all(|&b| b == 0.0)
    }

    /// Euclidean distance between two histograms.
    pub fn distance(&self, other: &ColorHistogram) -> f64 {
        self.bins
            .iter()
            .zip(&other.bins)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn validate(&self) -> Result<(), String> {
        if self.bins.len() != HIST_BINS {
            return Err(format!("histogram has {} bins, expected {}", self.bins.len(), HIST_BINS));
        }
        if self.bins.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err("histogram bins must be finite and non-negative".into());
        }
        let sum: f64 = self.bins.iter().sum();
        if sum != 0.0 && (sum - 1.0).abs() > 1e-9 {
            return Err(format!("histogram not L1-normalized (sum {sum})"));
        }
        Ok(())
    }
}

/// A 256-bit binary feature descriptor with a pixel offset from its joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointDescriptor {
    /// 256 bits as four u64 words, serialized as hex.
    #[serde(with = "descriptor_hex")]
    pub bits: [u64; 4],
    pub dx: f64,
    pub dy: f64,
}

impl JointDescriptor {
    pub fn hamming(&self, other: &JointDescriptor) -> u32 {
        self.bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

mod descriptor_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[u64; 4], s: S) -> Result<S::Ok, S::Error> {
        let hex: String = bits.iter().map(|w| format!("{w:016x}")).collect();
        s.serialize_str(&hex)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u64; 4], D::Error> {
        let hex = String::deserialize(d)?;
        if hex.len() != 64 {
            return Err(serde::de::Error::custom("descriptor must be 64 hex chars"));
        }
        let mut bits = [0u64; 4];
        for (i, chunk) in hex.as_bytes().chunks(16).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(serde::de::Error::custom)?;
            bits[i] = u64::from_str_radix(s, 16).map_err(serde::de::Error::custom)?;
        }
        Ok(bits)
    }
}

/// All keypoints of one person in one frame, plus optional appearance data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Skeleton {
    /// Sorted by joint, at most one entry per joint.
    pub keypoints: Vec<Keypoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_embedding: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper_body_hist: Option<ColorHistogram>,
    /// Pixel samples of an item held in a hand, already background-subtracted.
    /// Keyed by hand; populated only on frames where an item is in view.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hand_item_pixels: BTreeMap<Hand, Vec<[u8; 3]>>,
    /// Binary feature descriptors per joint, when feature tracking data exists.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub joint_descriptors: BTreeMap<JointName, Vec<JointDescriptor>>,
}

impl Skeleton {
    pub fn new(mut keypoints: Vec<Keypoint>) -> Self {
        keypoints.sort_by_key(|k| k.joint);
        Skeleton { keypoints, ..Default::default() }
    }

    pub fn joint(&self, name: JointName) -> Option<&Keypoint> {
        self.keypoints.iter().find(|k| k.joint == name)
    }

    pub fn set_joint(&mut self, kp: Keypoint) {
        match self.keypoints.iter_mut().find(|k| k.joint == kp.joint) {
            Some(existing) => *existing = kp,
            None => {
                self.keypoints.push(kp);
                self.keypoints.sort_by_key(|k| k.joint);
            }
        }
    }

    pub fn remove_joint(&mut self, name: JointName) {
        self.keypoints.retain(|k| k.joint != name);
    }

    fn validate(&self, width: u32, height: u32) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for kp in &self.keypoints {
            if !seen.insert(kp.joint) {
                return Err(format!("duplicate keypoint for joint {}", kp.joint));
            }
            if !kp.x.is_finite() || !kp.y.is_finite() {
                return Err(format!("non-finite coordinates for joint {}", kp.joint));
            }
            if kp.x < 0.0 || kp.x > width as f64 || kp.y < 0.0 || kp.y > height as f64 {
                return Err(format!(
                    "joint {} at ({}, {}) outside {}x{} frame",
                    kp.joint, kp.x, kp.y, width, height
                ));
            }
            if !(0.0..=1.0).contains(&kp.confidence) {
                return Err(format!("confidence {} out of [0,1]", kp.confidence));
            }
        }
        if let Some(e) = &self.face_embedding {
            if e.len() != EMBEDDING_DIM {
                return Err(format!("face embedding has {} dims, expected {}", e.len(), EMBEDDING_DIM));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err("face embedding has non-finite values".into());
            }
        }
        if let Some(h) = &self.upper_body_hist {
            h.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimbSide {
    Left,
    Right,
}

/// An elbow candidate inside a frame's limb record. `skeleton` indexes into
/// the frame's skeleton list; the elbow is anatomically owned by that person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowCandidate {
    pub skeleton: usize,
    pub side: LimbSide,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "c")]
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cluster: Vec<[f64; 2]>,
    pub hist: ColorHistogram,
}

/// A wrist candidate not yet attributed to any skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WristCandidate {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "c")]
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cluster: Vec<[f64; 2]>,
    pub hist: ColorHistogram,
}

/// Frame-level elbow/wrist candidate pool emitted when wrist attribution is
/// ambiguous. `align[i][j]` is the alignment score between elbow i and
/// wrist j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimbRecord {
    pub elbows: Vec<ElbowCandidate>,
    pub wrists: Vec<WristCandidate>,
    pub align: Vec<Vec<f64>>,
}

/// One camera frame: all skeletons plus the optional limb candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub camera_id: String,
    pub frame: u64,
    pub t: f64,
    pub skeletons: Vec<Skeleton>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limbs: Option<LimbRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfidSample {
    pub antenna_id: String,
    pub tag_id: String,
    pub t: f64,
    pub rssi_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Pickup,
    Dropoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    None,
    ItemSwitching,
    HandHiding,
    SensorTampering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAction {
    pub shopper_id: String,
    pub shelf_id: String,
    pub item_type: String,
    pub count: u32,
    pub kind: ActionKind,
    pub adversarial: AdversarialKind,
    pub t: f64,
}

/// Camera mounting and optics. `tilt_deg` is the angle between the optical
/// axis and the vertical: 0 points straight down, 90 is horizontal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub camera_id: String,
    pub height_m: f64,
    pub tilt_deg: f64,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub width_px: u32,
    pub height_px: u32,
    /// Constant clock offset added to this camera's timestamps at load.
    #[serde(default)]
    pub clock_offset_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemType {
    pub item_id: String,
    pub weight_g: f64,
    pub reference_hist: ColorHistogram,
    pub rfid_tagged: bool,
    /// Most items of this type one hand can plausibly take in a single action.
    pub capacity_per_hand: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shelf {
    pub shelf_id: String,
    /// Camera whose frame the polygon is expressed in.
    pub camera_id: String,
    /// Shelf outline in that camera's pixel coordinates.
    pub polygon_px: Vec<[f64; 2]>,
    pub scale_id: String,
    pub rfid_antenna_id: String,
    pub catalog: Vec<ItemType>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StoreConfig {
    #[serde(default)]
    pub trace_id: String,
    pub cameras: Vec<CameraConfig>,
    pub shelves: Vec<Shelf>,
    /// Known weight scale ids; shelves must reference one of these.
    pub scales: Vec<String>,
    /// Known RFID antenna ids.
    pub antennas: Vec<String>,
    /// Per-source clock offsets for scales and antennas, seconds.
    #[serde(default)]
    pub clock_offsets: BTreeMap<String, f64>,
}

impl StoreConfig {
    pub fn camera(&self, id: &str) -> Option<&CameraConfig> {
        self.cameras.iter().find(|c| c.camera_id == id)
    }

    pub fn shelf(&self, id: &str) -> Option<&Shelf> {
        self.shelves.iter().find(|s| s.shelf_id == id)
    }

    pub fn item(&self, shelf_id: &str, item_id: &str) -> Option<&ItemType> {
        self.shelf(shelf_id)?.catalog.iter().find(|i| i.item_id == item_id)
    }
}

/// A single violation found by [`validate_config`]. Violations are data, not
/// errors: an invalid config loads but reports what is wrong.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigViolation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks every structural invariant of a store configuration.
pub fn validate_config(config: &StoreConfig) -> Vec<ConfigViolation> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(ConfigViolation { path, message });

    let mut cam_ids = BTreeSet::new();
    for (i, cam) in config.cameras.iter().enumerate() {
        let p = format!("cameras[{i}]");
        if !cam_ids.insert(cam.camera_id.clone()) {
            push(p.clone(), format!("duplicate camera id {}", cam.camera_id));
        }
        if cam.height_m <= 0.0 {
            push(format!("{p}.height_m"), "camera height must be positive".into());
        }
        if !(cam.tilt_deg > 0.0 && cam.tilt_deg < 90.0) {
            push(format!("{p}.tilt_deg"), "tilt must be in (0, 90) degrees".into());
        }
        for (name, v) in [("hfov_deg", cam.hfov_deg), ("vfov_deg", cam.vfov_deg)] {
            if !(v > 0.0 && v < 180.0) {
                push(format!("{p}.{name}"), "field of view must be in (0, 180) degrees".into());
            }
        }
        if cam.width_px == 0 || cam.height_px == 0 {
            push(format!("{p}.resolution"), "resolution must be positive".into());
        }
    }

    let scale_set: BTreeSet<_> = config.scales.iter().collect();
    let antenna_set: BTreeSet<_> = config.antennas.iter().collect();
    let mut shelf_ids = BTreeSet::new();
    let mut item_ids = BTreeSet::new();
    for (i, shelf) in config.shelves.iter().enumerate() {
        let p = format!("shelves[{i}]");
        if !shelf_ids.insert(shelf.shelf_id.clone()) {
            push(p.clone(), format!("duplicate shelf id {}", shelf.shelf_id));
        }
        if !cam_ids.contains(&shelf.camera_id) {
            push(format!("{p}.camera_id"), format!("unknown camera {}", shelf.camera_id));
        }
        if !scale_set.contains(&shelf.scale_id) {
            push(format!("{p}.scale_id"), format!("shelf references missing scale {}", shelf.scale_id));
        }
        if !antenna_set.contains(&shelf.rfid_antenna_id) {
            push(
                format!("{p}.rfid_antenna_id"),
                format!("shelf references missing antenna {}", shelf.rfid_antenna_id),
            );
        }
        if shelf.polygon_px.len() < 3 {
            push(format!("{p}.polygon_px"), "shelf polygon needs at least 3 points".into());
        }
        for (j, item) in shelf.catalog.iter().enumerate() {
            let ip = format!("{p}.catalog[{j}]");
            if !item_ids.insert(item.item_id.clone()) {
                push(ip.clone(), format!("duplicate item id {}", item.item_id));
            }
            if !(item.weight_g > 0.0) {
                push(format!("{ip}.weight_g"), "non-positive weight".into());
            }
            if item.capacity_per_hand < 1 {
                push(format!("{ip}.capacity_per_hand"), "capacity must be at least 1".into());
            }
            if let Err(msg) = item.reference_hist.validate() {
                push(format!("{ip}.reference_hist"), msg);
            }
        }
    }
    out
}

/// A fully loaded, validated, immutable trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub store: StoreConfig,
    /// Per camera id, frames sorted by timestamp.
    pub frames: BTreeMap<String, Vec<FrameRecord>>,
    /// Per scale id, samples sorted by timestamp.
    pub weights: BTreeMap<String, Vec<ScaleReading>>,
    /// Per antenna id, samples sorted by timestamp.
    pub rfid: BTreeMap<String, Vec<RfidSample>>,
    pub ground_truth: Option<Vec<GroundTruthAction>>,
}

/// One weight scale reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReading {
    pub scale_id: String,
    pub t: f64,
    pub grams: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: malformed record: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("{file}:{line}: unknown source id '{id}'")]
    UnknownSource { file: String, line: usize, id: String },
    #[error("{file}:{line}: non-monotonic timestamps for source '{id}'")]
    NonMonotonic { file: String, line: usize, id: String },
    #[error("{file}: expected schema '{expected}', found '{found}'")]
    SchemaMismatch { file: String, expected: String, found: String },
    #[error("{file}: missing schema header line")]
    MissingHeader { file: String },
    #[error("store config invalid: {0:?}")]
    InvalidConfig(Vec<ConfigViolation>),
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaHeader {
    schema: String,
    #[serde(default)]
    trace_id: String,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>, TraceError> {
    let file = std::fs::File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(std::io::BufReader::new(file).lines())
}

/// Parses one JSONL file, checking its schema header and handing each
/// subsequent line to `sink` with its 1-based line number.
fn read_jsonl<F>(path: &Path, expected_schema: &str, mut sink: F) -> Result<Option<String>, TraceError>
where
    F: FnMut(usize, &str) -> Result<(), TraceError>,
{
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut trace_id = None;
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|source| TraceError::Io { path: file_name.clone(), source })?;
        let lineno = idx + 1;
        if lineno == 1 {
            let header: SchemaHeader =
                serde_json::from_str(&line).map_err(|_| TraceError::MissingHeader { file: file_name.clone() })?;
            if header.schema != expected_schema {
                return Err(TraceError::SchemaMismatch {
                    file: file_name,
                    expected: expected_schema.into(),
                    found: header.schema,
                });
            }
            trace_id = Some(header.trace_id);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        sink(lineno, &line)?;
    }
    Ok(trace_id)
}

fn parse_err(file: &str, line: usize, e: impl fmt::Display) -> TraceError {
    TraceError::Parse { file: file.into(), line, message: e.to_string() }
}

/// Loads a trace directory against a store configuration.
///
/// Missing stream files are treated as empty streams. Records referencing
/// source ids absent from the config are rejected, as are files whose
/// per-source timestamps decrease.
pub fn load_trace(dir: &Path, config: &StoreConfig) -> Result<Trace, TraceError> {
    let violations = validate_config(config);
    if !violations.is_empty() {
        return Err(TraceError::InvalidConfig(violations));
    }

    let mut frames: BTreeMap<String, Vec<FrameRecord>> = BTreeMap::new();
    let mut weights: BTreeMap<String, Vec<ScaleReading>> = BTreeMap::new();
    let mut rfid: BTreeMap<String, Vec<RfidSample>> = BTreeMap::new();
    let mut ground_truth = None;

    let frames_path = dir.join("frames.jsonl");
    if frames_path.exists() {
        let fname = "frames.jsonl";
        read_jsonl(&frames_path, FRAMES_SCHEMA, |lineno, line| {
            let mut rec: FrameRecord =
                serde_json::from_str(line).map_err(|e| parse_err(fname, lineno, e))?;
            let cam = config.camera(&rec.camera_id).ok_or_else(|| TraceError::UnknownSource {
                file: fname.into(),
                line: lineno,
                id: rec.camera_id.clone(),
            })?;
            if !rec.t.is_finite() {
                return Err(parse_err(fname, lineno, "non-finite timestamp"));
            }
            for (i, sk) in rec.skeletons.iter().enumerate() {
                sk.validate(cam.width_px, cam.height_px)
                    .map_err(|m| parse_err(fname, lineno, format!("skeleton[{i}]: {m}")))?;
            }
            if let Some(limbs) = &rec.limbs {
                validate_limb_record(limbs, rec.skeletons.len())
                    .map_err(|m| parse_err(fname, lineno, m))?;
            }
            rec.t += cam.clock_offset_s;
            let stream = frames.entry(rec.camera_id.clone()).or_default();
            if let Some(last) = stream.last() {
                if rec.t < last.t {
                    return Err(TraceError::NonMonotonic {
                        file: fname.into(),
                        line: lineno,
                        id: rec.camera_id.clone(),
                    });
                }
            }
            stream.push(rec);
            Ok(())
        })?;
    }

    let weights_path = dir.join("weights.jsonl");
    if weights_path.exists() {
        let fname = "weights.jsonl";
        let scale_set: BTreeSet<&String> = config.scales.iter().collect();
        read_jsonl(&weights_path, WEIGHTS_SCHEMA, |lineno, line| {
            let mut rec: ScaleReading =
                serde_json::from_str(line).map_err(|e| parse_err(fname, lineno, e))?;
            if !scale_set.contains(&rec.scale_id) {
                return Err(TraceError::UnknownSource {
                    file: fname.into(),
                    line: lineno,
                    id: rec.scale_id,
                });
            }
            if !rec.grams.is_finite() {
                return Err(parse_err(fname, lineno, "grams is not a finite number"));
            }
            if !rec.t.is_finite() {
                return Err(parse_err(fname, lineno, "non-finite timestamp"));
            }
            rec.t += config.clock_offsets.get(&rec.scale_id).copied().unwrap_or(0.0);
            let stream = weights.entry(rec.scale_id.clone()).or_default();
            if let Some(last) = stream.last() {
                if rec.t < last.t {
                    return Err(TraceError::NonMonotonic {
                        file: fname.into(),
                        line: lineno,
                        id: rec.scale_id.clone(),
                    });
                }
            }
            stream.push(rec);
            Ok(())
        })?;
    }

    let rfid_path = dir.join("rfid.jsonl");
    if rfid_path.exists() {
        let fname = "rfid.jsonl";
        let antenna_set: BTreeSet<&String> = config.antennas.iter().collect();
        read_jsonl(&rfid_path, RFID_SCHEMA, |lineno, line| {
            let mut rec: RfidSample =
                serde_json::from_str(line).map_err(|e| parse_err(fname, lineno, e))?;
            if !antenna_set.contains(&rec.antenna_id) {
                return Err(TraceError::UnknownSource {
                    file: fname.into(),
                    line: lineno,
                    id: rec.antenna_id,
                });
            }
            if !rec.rssi_dbm.is_finite() || !rec.t.is_finite() {
                return Err(parse_err(fname, lineno, "non-finite rssi or timestamp"));
            }
            rec.t += config.clock_offsets.get(&rec.antenna_id).copied().unwrap_or(0.0);
            let stream = rfid.entry(rec.antenna_id.clone()).or_default();
            if let Some(last) = stream.last() {
                if rec.t < last.t {
                    return Err(TraceError::NonMonotonic {
                        file: fname.into(),
                        line: lineno,
                        id: rec.antenna_id.clone(),
                    });
                }
            }
            stream.push(rec);
            Ok(())
        })?;
    }

    let gt_path = dir.join("groundtruth.jsonl");
    if gt_path.exists() {
        let fname = "groundtruth.jsonl";
        let mut actions = Vec::new();
        read_jsonl(&gt_path, GROUNDTRUTH_SCHEMA, |lineno, line| {
            let rec: GroundTruthAction =
                serde_json::from_str(line).map_err(|e| parse_err(fname, lineno, e))?;
            if rec.count < 1 {
                return Err(parse_err(fname, lineno, "action count must be at least 1"));
            }
            actions.push(rec);
            Ok(())
        })?;
        ground_truth = Some(actions);
    }

    Ok(Trace { store: config.clone(), frames, weights, rfid, ground_truth })
}

fn validate_limb_record(limbs: &LimbRecord, n_skeletons: usize) -> Result<(), String> {
    if limbs.align.len() != limbs.elbows.len() {
        return Err("limb align matrix row count mismatch".into());
    }
    for row in &limbs.align {
        if row.len() != limbs.wrists.len() {
            return Err("limb align matrix column count mismatch".into());
        }
        if row.iter().any(|a| !a.is_finite()) {
            return Err("limb alignment scores must be finite".into());
        }
    }
    for (i, e) in limbs.elbows.iter().enumerate() {
        if e.skeleton >= n_skeletons {
            return Err(format!("elbow[{i}] references skeleton {} of {}", e.skeleton, n_skeletons));
        }
        e.hist.validate().map_err(|m| format!("elbow[{i}].hist: {m}"))?;
    }
    for (j, w) in limbs.wrists.iter().enumerate() {
        w.hist.validate().map_err(|m| format!("wrist[{j}].hist: {m}"))?;
    }
    Ok(())
}

/// Loads `store.json` from a trace directory.
pub fn load_store(path: &Path) -> Result<StoreConfig, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| parse_err(&path.display().to_string(), 1, e))?;
    let schema = value.get("schema").and_then(|v| v.as_str()).unwrap_or("");
    if schema != STORE_SCHEMA {
        return Err(TraceError::SchemaMismatch {
            file: path.display().to_string(),
            expected: STORE_SCHEMA.into(),
            found: schema.into(),
        });
    }
    serde_json::from_value(value).map_err(|e| parse_err(&path.display().to_string(), 1, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TraceError> {
    let mut f = std::fs::File::create(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(bytes).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn header_line(schema: &str, trace_id: &str) -> String {
    serde_json::to_string(&SchemaHeader { schema: schema.into(), trace_id: trace_id.into() }).unwrap()
}

/// Serializes a trace into its directory layout. The inverse of
/// [`load_trace`] for traces whose clock offsets are zero.
pub fn write_trace(dir: &Path, trace: &Trace) -> Result<(), TraceError> {
    std::fs::create_dir_all(dir).map_err(|source| TraceError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let id = &trace.store.trace_id;

    let mut store_value = serde_json::to_value(&trace.store).unwrap();
    store_value.as_object_mut().unwrap().insert("schema".into(), STORE_SCHEMA.into());
    write_file(&dir.join("store.json"), serde_json::to_string_pretty(&store_value).unwrap().as_bytes())?;

    let mut out = header_line(FRAMES_SCHEMA, id) + "\n";
    let mut all_frames: Vec<&FrameRecord> = trace.frames.values().flatten().collect();
    all_frames.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.camera_id.cmp(&b.camera_id)));
    for rec in all_frames {
        out.push_str(&serde_json::to_string(rec).unwrap());
        out.push('\n');
    }
    write_file(&dir.join("frames.jsonl"), out.as_bytes())?;

    let mut out = header_line(WEIGHTS_SCHEMA, id) + "\n";
    let mut all: Vec<&ScaleReading> = trace.weights.values().flatten().collect();
    all.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.scale_id.cmp(&b.scale_id)));
    for rec in all {
        out.push_str(&serde_json::to_string(rec).unwrap());
        out.push('\n');
    }
    write_file(&dir.join("weights.jsonl"), out.as_bytes())?;

    let mut out = header_line(RFID_SCHEMA, id) + "\n";
    let mut all: Vec<&RfidSample> = trace.rfid.values().flatten().collect();
    all.sort_by(|a, b| {
        a.t.total_cmp(&b.t)
            .then_with(|| a.antenna_id.cmp(&b.antenna_id))
            .then_with(|| a.tag_id.cmp(&b.tag_id))
    });
    for rec in all {
        out.push_str(&serde_json::to_string(rec).unwrap());
        out.push('\n');
    }
    write_file(&dir.join("rfid.jsonl"), out.as_bytes())?;

    if let Some(actions) = &trace.ground_truth {
        let mut out = header_line(GROUNDTRUTH_SCHEMA, id) + "\n";
        for rec in actions {
            out.push_str(&serde_json::to_string(rec).unwrap());
            out.push('\n');
        }
        write_file(&dir.join("groundtruth.jsonl"), out.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_hist() -> ColorHistogram {
        ColorHistogram::from_counts(&vec![1.0; HIST_BINS])
    }

    pub(crate) fn two_shelf_config() -> StoreConfig {
        let catalog = |names: &[&str]| {
            names
                .iter()
                .map(|n| ItemType {
                    item_id: n.to_string(),
                    weight_g: 100.0,
                    reference_hist: flat_hist(),
                    rfid_tagged: false,
                    capacity_per_hand: 1,
                })
                .collect()
        };
        StoreConfig {
            trace_id: "test".into(),
            cameras: vec![CameraConfig {
                camera_id: "cam0".into(),
                height_m: 2.5,
                tilt_deg: 55.0,
                hfov_deg: 90.0,
                vfov_deg: 60.0,
                width_px: 1280,
                height_px: 720,
                clock_offset_s: 0.0,
            }],
            shelves: vec![
                Shelf {
                    shelf_id: "shelf0".into(),
                    camera_id: "cam0".into(),
                    polygon_px: vec![[100.0, 300.0], [300.0, 300.0], [300.0, 500.0], [100.0, 500.0]],
                    scale_id: "scale0".into(),
                    rfid_antenna_id: "ant0".into(),
                    catalog: catalog(&["beans", "rice"]),
                },
                Shelf {
                    shelf_id: "shelf1".into(),
                    camera_id: "cam0".into(),
                    polygon_px: vec![[900.0, 300.0], [1100.0, 300.0], [1100.0, 500.0], [900.0, 500.0]],
                    scale_id: "scale1".into(),
                    rfid_antenna_id: "ant1".into(),
                    catalog: catalog(&["soap", "tea"]),
                },
            ],
            scales: vec!["scale0".into(), "scale1".into()],
            antennas: vec!["ant0".into(), "ant1".into()],
            clock_offsets: BTreeMap::new(),
        }
    }

    #[test]
    fn well_formed_config_has_no_violations() {
        assert!(validate_config(&two_shelf_config()).is_empty());
    }

    #[test]
    fn zero_weight_item_is_a_violation() {
        let mut config = two_shelf_config();
        config.shelves[0].catalog[0].weight_g = 0.0;
        let violations = validate_config(&config);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].message.contains("non-positive weight"));
    }

    #[test]
    fn missing_scale_reference_is_a_violation() {
        let mut config = two_shelf_config();
        config.shelves[1].scale_id = "scale9".into();
        let violations = validate_config(&config);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].message.contains("missing scale"));
    }

    #[test]
    fn empty_directory_loads_as_empty_trace() {
        let dir = tempfile::tempdir().unwrap();
        let trace = load_trace(dir.path(), &two_shelf_config()).unwrap();
        assert!(trace.frames.is_empty());
        assert!(trace.weights.is_empty());
        assert!(trace.rfid.is_empty());
        assert!(trace.ground_truth.is_none());
    }

    #[test]
    fn nan_grams_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\n{}\n{}\n",
            header_line(WEIGHTS_SCHEMA, "test"),
            r#"{"scale_id":"scale0","t":0.0,"grams":100.0}"#,
            r#"{"scale_id":"scale0","t":0.033,"grams":NaN}"#,
        );
        std::fs::write(dir.path().join("weights.jsonl"), body).unwrap();
        let err = load_trace(dir.path(), &two_shelf_config()).unwrap_err();
        match err {
            TraceError::Parse { file, line, .. } => {
                assert_eq!(file, "weights.jsonl");
                assert_eq!(line, 3);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_scale_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\n{}\n",
            header_line(WEIGHTS_SCHEMA, "test"),
            r#"{"scale_id":"mystery","t":0.0,"grams":100.0}"#,
        );
        std::fs::write(dir.path().join("weights.jsonl"), body).unwrap();
        let err = load_trace(dir.path(), &two_shelf_config()).unwrap_err();
        assert!(matches!(err, TraceError::UnknownSource { .. }));
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\n{}\n{}\n",
            header_line(WEIGHTS_SCHEMA, "test"),
            r#"{"scale_id":"scale0","t":1.0,"grams":100.0}"#,
            r#"{"scale_id":"scale0","t":0.5,"grams":100.0}"#,
        );
        std::fs::write(dir.path().join("weights.jsonl"), body).unwrap();
        let err = load_trace(dir.path(), &two_shelf_config()).unwrap_err();
        assert!(matches!(err, TraceError::NonMonotonic { .. }));
    }

    #[test]
    fn wrong_schema_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{}\n", header_line("aisle.frames.v1", "test"));
        std::fs::write(dir.path().join("weights.jsonl"), body).unwrap();
        let err = load_trace(dir.path(), &two_shelf_config()).unwrap_err();
        assert!(matches!(err, TraceError::SchemaMismatch { .. }));
    }

    #[test]
    fn descriptor_hex_round_trips() {
        let d = JointDescriptor { bits: [0x0123456789abcdef, 0, u64::MAX, 42], dx: 1.5, dy: -2.0 };
        let json = serde_json::to_string(&d).unwrap();
        let back: JointDescriptor = serde_json::from_str(&json).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn skeleton_rejects_duplicate_joints() {
        let sk = Skeleton {
            keypoints: vec![
                Keypoint { joint: JointName::Nose, x: 10.0, y: 10.0, confidence: 0.9 },
                Keypoint { joint: JointName::Nose, x: 11.0, y: 10.0, confidence: 0.8 },
            ],
            ..Default::default()
        };
        assert!(sk.validate(1280, 720).is_err());
    }

    #[test]
    fn histogram_from_pixels_is_normalized() {
        let pixels = vec![[10u8, 200u8, 99u8]; 37];
        let h = ColorHistogram::from_pixels(&pixels);
        assert!((h.bins.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h.bins.len(), HIST_BINS);
    }
}
