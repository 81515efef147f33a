//! Shopper registration and face classification.
//!
//! A registry is a flat list of (shopper_id, embedding) pairs queried by a
//! kNN classifier. Registration is index insertion only; there is no model
//! to retrain. Embeddings arrive precomputed in the trace, so this module
//! never touches pixels except to derive a face bounding box from keypoints.

use crate::trace::{JointName, Keypoint, Skeleton, EMBEDDING_DIM};
use serde::{Deserialize, Serialize};

/// Smallest box-side scale at the most extreme head pose.
const MIN_POSE_SCALE: f64 = 0.2;
/// Box sides are floored at this size to stay strictly positive.
const MIN_BOX_PX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub shopper_id: String,
    pub embedding: Vec<f64>,
}

/// All registered shoppers plus classifier settings. Persisted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRegistry {
    pub entries: Vec<RegistryEntry>,
    pub k: usize,
    pub unknown_threshold: f64,
}

impl Default for FaceRegistry {
    fn default() -> Self {
        let cfg = crate::config::IdentityConfig::default();
        FaceRegistry { entries: Vec::new(), k: cfg.k, unknown_threshold: cfg.unknown_threshold }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IdentityError {
    #[error("embedding has {got} dimensions, expected {EMBEDDING_DIM}")]
    WrongDimension { got: usize },
    #[error("registration requires at least one embedding")]
    NoEmbeddings,
    #[error("registry invalid: {0}")]
    InvalidRegistry(String),
}

/// Classification outcome: a registered shopper or Unknown.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaceLabel {
    Shopper(String),
    Unknown,
}

impl FaceRegistry {
    pub fn new(k: usize, unknown_threshold: f64) -> Self {
        FaceRegistry { entries: Vec::new(), k, unknown_threshold }
    }

    pub fn validate(&self) -> Result<(), IdentityError> {
        if self.k < 1 {
            return Err(IdentityError::InvalidRegistry("k must be at least 1".into()));
        }
        if !(self.unknown_threshold > 0.0) {
            return Err(IdentityError::InvalidRegistry("unknown_threshold must be positive".into()));
        }
        for e in &self.entries {
            if e.embedding.len() != EMBEDDING_DIM {
                return Err(IdentityError::WrongDimension { got: e.embedding.len() });
            }
        }
        Ok(())
    }

    /// Adds one entry per embedding. O(n) in the number of embeddings.
    pub fn register(
        &mut self,
        shopper_id: &str,
        embeddings: &[Vec<f64>],
    ) -> Result<(), IdentityError> {
        if embeddings.is_empty() {
            return Err(IdentityError::NoEmbeddings);
        }
        for e in embeddings {
            if e.len() != EMBEDDING_DIM {
                return Err(IdentityError::WrongDimension { got: e.len() });
            }
        }
        for e in embeddings {
            self.entries.push(RegistryEntry { shopper_id: shopper_id.to_string(), embedding: e.clone() });
        }
        Ok(())
    }

    /// Majority label among the k nearest entries by Euclidean distance.
    /// Returns Unknown when the registry is empty or the single nearest
    /// entry is farther than the threshold. Equal distances at the k-th rank
    /// and equal vote counts both break toward the lower shopper_id,
    /// making the result independent of registry order.
    pub fn classify(&self, embedding: &[f64]) -> FaceLabel {
        if embedding.len() != EMBEDDING_DIM || self.entries.is_empty() {
            return FaceLabel::Unknown;
        }
        let mut by_distance: Vec<(f64, &str)> = self
            .entries
            .iter()
            .map(|e| (euclidean(&e.embedding, embedding), e.shopper_id.as_str()))
            .collect();
        by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));

        if by_distance[0].0 > self.unknown_threshold {
            return FaceLabel::Unknown;
        }
        let k = self.k.min(by_distance.len());
        let mut votes: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
        for (_, id) in &by_distance[..k] {
            *votes.entry(id).or_insert(0) += 1;
        }
        let best = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(id, _)| id.to_string())
            .unwrap();
        FaceLabel::Shopper(best)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    schema: String,
    registry: FaceRegistry,
}

const REGISTRY_SCHEMA: &str = "aisle.registry.v1";

pub fn save_registry(path: &std::path::Path, registry: &FaceRegistry) -> std::io::Result<()> {
    let file = RegistryFile { schema: REGISTRY_SCHEMA.to_string(), registry: registry.clone() };
    let mut body = serde_json::to_string_pretty(&file).expect("registry serializes");
    body.push('\n');
    std::fs::write(path, body)
}

pub fn load_registry(path: &std::path::Path) -> Result<FaceRegistry, IdentityError> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| IdentityError::InvalidRegistry(format!("read {}: {e}", path.display())))?;
    let file: RegistryFile = serde_json::from_str(&body)
        .map_err(|e| IdentityError::InvalidRegistry(format!("parse {}: {e}", path.display())))?;
    if file.schema != REGISTRY_SCHEMA {
        return Err(IdentityError::InvalidRegistry(format!("unknown schema {}", file.schema)));
    }
    file.registry.validate()?;
    Ok(file.registry)
}

/// Face bounding box derived from keypoints, with head pose estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub height: f64,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

/// Signed perpendicular distance of `p` from the line through `a` and `b`.
fn signed_axis_distance(a: &Keypoint, b: &Keypoint, p: &Keypoint) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return 0.0;
    }
    ((p.x - a.x) * dy - (p.y - a.y) * dx) / len
}

fn pose_scale(angle_deg: f64) -> f64 {
    1.0 - (1.0 - MIN_POSE_SCALE) * angle_deg.abs() / 90.0
}

/// Estimates the face box of a skeleton.
///
/// Requires nose, neck, and at least one eye or ear. Yaw comes from the
/// asymmetry of the two ear (or eye) distances to the nose-neck axis, mapped
/// to [-90, 90]; a single visible side landmark reads as a full profile.
/// Pitch is the analogous asymmetry of nose and neck against the inter-ear
/// (or inter-eye) axis. Width starts from the ear span and height from the
/// nose-neck distance, each shrunk linearly as the pose angle grows.
pub fn face_box_from_keypoints(skeleton: &Skeleton) -> Option<FaceBox> {
    let nose = skeleton.joint(JointName::Nose)?;
    let neck = skeleton.joint(JointName::Neck)?;
    let l_ear = skeleton.joint(JointName::LeftEar);
    let r_ear = skeleton.joint(JointName::RightEar);
    let l_eye = skeleton.joint(JointName::LeftEye);
    let r_eye = skeleton.joint(JointName::RightEye);
    if l_ear.is_none() && r_ear.is_none() && l_eye.is_none() && r_eye.is_none() {
        return None;
    }

    // Prefer ears for both yaw and raw width; fall back to eyes (scaled up,
    // eyes sit inboard of ears), then to a profile-view default.
    let axis_dist = |p: &Keypoint| signed_axis_distance(nose, neck, p).abs();
    let (yaw, raw_width) = match (l_ear, r_ear, l_eye, r_eye) {
        (Some(l), Some(r), _, _) => {
            let (dl, dr) = (axis_dist(l), axis_dist(r));
            let yaw = if dl + dr == 0.0 { 0.0 } else { 90.0 * (dl - dr) / (dl + dr) };
            (yaw, ((l.x - r.x).powi(2) + (l.y - r.y).powi(2)).sqrt())
        }
        (None, None, Some(l), Some(r)) => {
            let (dl, dr) = (axis_dist(l), axis_dist(r));
            let yaw = if dl + dr == 0.0 { 0.0 } else { 90.0 * (dl - dr) / (dl + dr) };
            (yaw, 1.5 * ((l.x - r.x).powi(2) + (l.y - r.y).powi(2)).sqrt())
        }
        (Some(_), None, _, _) | (None, None, Some(_), None) => {
            let h = ((nose.x - neck.x).powi(2) + (nose.y - neck.y).powi(2)).sqrt();
            (90.0, 0.6 * h)
        }
        (None, Some(_), _, _) | (None, None, None, Some(_)) => {
            let h = ((nose.x - neck.x).powi(2) + (nose.y - neck.y).powi(2)).sqrt();
            (-90.0, 0.6 * h)
        }
        (None, None, None, None) => unreachable!(),
    };

    let raw_height = ((nose.x - neck.x).powi(2) + (nose.y - neck.y).powi(2)).sqrt();

    // Pitch axis: the inter-ear line when both ears exist, else inter-eye,
    // else level (pitch 0).
    let pitch = match (l_ear, r_ear, l_eye, r_eye) {
        (Some(l), Some(r), _, _) | (None, None, Some(l), Some(r)) => {
            let dn = signed_axis_distance(l, r, nose).abs();
            let dk = signed_axis_distance(l, r, neck).abs();
            if dn + dk == 0.0 {
                0.0
            } else {
                90.0 * (dn - dk) / (dn + dk)
            }
        }
        _ => 0.0,
    };

    Some(FaceBox {
        center_x: nose.x,
        center_y: nose.y,
        width: (raw_width * pose_scale(yaw)).max(MIN_BOX_PX),
        height: (raw_height * pose_scale(pitch)).max(MIN_BOX_PX),
        yaw_deg: yaw,
        pitch_deg: pitch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn embed(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..EMBEDDING_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn kp(joint: JointName, x: f64, y: f64) -> Keypoint {
        Keypoint { joint, x, y, confidence: 0.9 }
    }

    #[test]
    fn empty_registry_is_unknown() {
        let reg = FaceRegistry::default();
        assert_eq!(reg.classify(&vec![0.0; EMBEDDING_DIM]), FaceLabel::Unknown);
    }

    #[test]
    fn registered_embedding_classifies_to_its_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reg = FaceRegistry::new(1, 0.6);
        let embeddings: Vec<_> = (0..5).map(|_| embed(&mut rng)).collect();
        reg.register("alice", &embeddings).unwrap();
        assert_eq!(reg.classify(&embeddings[2]), FaceLabel::Shopper("alice".into()));
    }

    #[test]
    fn duplicate_vector_tie_breaks_to_lower_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = embed(&mut rng);
        let mut reg = FaceRegistry::new(1, 0.6);
        reg.register("zed", &[v.clone()]).unwrap();
        reg.register("amy", &[v.clone()]).unwrap();
        assert_eq!(reg.classify(&v), FaceLabel::Shopper("amy".into()));
    }

    #[test]
    fn beyond_threshold_is_unknown() {
        let mut reg = FaceRegistry::new(1, 0.6);
        reg.register("alice", &[vec![0.0; EMBEDDING_DIM]]).unwrap();
        let mut q = vec![0.0; EMBEDDING_DIM];
        q[0] = 0.7;
        assert_eq!(reg.classify(&q), FaceLabel::Unknown);
        q[0] = 0.5;
        assert_eq!(reg.classify(&q), FaceLabel::Shopper("alice".into()));
    }

    #[test]
    fn wrong_dimension_rejected() {
        let mut reg = FaceRegistry::default();
        let err = reg.register("alice", &[vec![0.0; 64]]).unwrap_err();
        assert_eq!(err, IdentityError::WrongDimension { got: 64 });
        assert!(reg.entries.is_empty());
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut reg = FaceRegistry::new(3, f64::INFINITY);
        let ids = ["a", "b", "c"];
        for id in ids {
            let es: Vec<_> = (0..10).map(|_| embed(&mut rng)).collect();
            reg.register(id, &es).unwrap();
        }
        for _ in 0..1000 {
            let q = embed(&mut rng);
            // Oracle: full sort by (distance, id), majority of first k with
            // lexicographic tie-break.
            let mut d: Vec<(f64, &str)> = reg
                .entries
                .iter()
                .map(|e| (euclidean(&e.embedding, &q), e.shopper_id.as_str()))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            let mut counts = std::collections::BTreeMap::new();
            for (_, id) in &d[..3] {
                *counts.entry(*id).or_insert(0usize) += 1;
            }
            let want = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(id, _)| FaceLabel::Shopper(id.to_string()))
                .unwrap();
            assert_eq!(reg.classify(&q), want);
        }
    }

    #[test]
    fn classify_is_registry_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut reg = FaceRegistry::new(3, f64::INFINITY);
        for id in ["a", "b", "c"] {
            let es: Vec<_> = (0..5).map(|_| embed(&mut rng)).collect();
            reg.register(id, &es).unwrap();
        }
        let mut reversed = reg.clone();
        reversed.entries.reverse();
        for _ in 0..200 {
            let q = embed(&mut rng);
            assert_eq!(reg.classify(&q), reversed.classify(&q));
        }
    }

    #[test]
    fn common_scaling_preserves_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reg = FaceRegistry::new(3, 5.0);
        for id in ["a", "b"] {
            let es: Vec<_> = (0..5).map(|_| embed(&mut rng)).collect();
            reg.register(id, &es).unwrap();
        }
        let mut scaled = reg.clone();
        let c = 3.5;
        scaled.unknown_threshold *= c;
        for e in &mut scaled.entries {
            for v in &mut e.embedding {
                *v *= c;
            }
        }
        for _ in 0..100 {
            let q = embed(&mut rng);
            let qs: Vec<f64> = q.iter().map(|v| v * c).collect();
            assert_eq!(reg.classify(&q), scaled.classify(&qs));
        }
    }

    #[test]
    fn thousand_entry_classify_stays_under_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut reg = FaceRegistry::new(3, f64::INFINITY);
        for i in 0..100 {
            let es: Vec<_> = (0..10).map(|_| embed(&mut rng)).collect();
            reg.register(&format!("s{i:03}"), &es).unwrap();
        }
        assert_eq!(reg.entries.len(), 1000);
        let queries: Vec<_> = (0..100).map(|_| embed(&mut rng)).collect();
        let start = std::time::Instant::now();
        for q in &queries {
            std::hint::black_box(reg.classify(q));
        }
        let per_query = start.elapsed().as_secs_f64() / queries.len() as f64;
        assert!(per_query < 0.010, "classify took {:.3} ms per query", per_query * 1e3);
    }

    #[test]
    fn frontal_face_has_zero_yaw_and_ear_width() {
        let sk = Skeleton::new(vec![
            kp(JointName::Nose, 100.0, 50.0),
            kp(JointName::Neck, 100.0, 90.0),
            kp(JointName::LeftEar, 120.0, 52.0),
            kp(JointName::RightEar, 80.0, 52.0),
        ]);
        let fb = face_box_from_keypoints(&sk).unwrap();
        assert!(fb.yaw_deg.abs() < 1e-9);
        assert!((fb.width - 40.0).abs() < 1e-9);
        assert!(fb.height > 0.0);
    }

    #[test]
    fn ear_on_axis_is_maximum_yaw() {
        let sk = Skeleton::new(vec![
            kp(JointName::Nose, 100.0, 50.0),
            kp(JointName::Neck, 100.0, 90.0),
            kp(JointName::LeftEar, 100.0, 52.0),
            kp(JointName::RightEar, 70.0, 52.0),
        ]);
        let fb = face_box_from_keypoints(&sk).unwrap();
        assert!((fb.yaw_deg.abs() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn missing_nose_gives_no_box() {
        let sk = Skeleton::new(vec![
            kp(JointName::Neck, 100.0, 90.0),
            kp(JointName::LeftEar, 120.0, 52.0),
            kp(JointName::RightEar, 80.0, 52.0),
        ]);
        assert!(face_box_from_keypoints(&sk).is_none());
    }

    #[test]
    fn width_shrinks_monotonically_with_yaw() {
        // Slide a constant-span ear pair sideways: the span stays 40 px while
        // the asymmetry (hence |yaw|) grows, so width must only shrink.
        let mut last: Option<(f64, f64)> = None;
        for a in [20.0f64, 25.0, 30.0, 35.0, 40.0] {
            let sk = Skeleton::new(vec![
                kp(JointName::Nose, 100.0, 50.0),
                kp(JointName::Neck, 100.0, 90.0),
                kp(JointName::LeftEar, 100.0 + a, 52.0),
                kp(JointName::RightEar, 100.0 + a - 40.0, 52.0),
            ]);
            let fb = face_box_from_keypoints(&sk).unwrap();
            if let Some((prev_yaw, prev_width)) = last {
                assert!(fb.yaw_deg.abs() > prev_yaw, "yaw should grow as ears shift");
                assert!(fb.width < prev_width, "width should shrink as |yaw| grows");
            }
            last = Some((fb.yaw_deg.abs(), fb.width));
        }
    }

    #[test]
    fn box_sides_always_positive() {
        let sk = Skeleton::new(vec![
            kp(JointName::Nose, 100.0, 50.0),
            kp(JointName::Neck, 100.0, 50.0),
            kp(JointName::LeftEye, 100.0, 50.0),
            kp(JointName::RightEye, 100.0, 50.0),
        ]);
        let fb = face_box_from_keypoints(&sk).unwrap();
        assert!(fb.width > 0.0 && fb.height > 0.0);
    }
}
