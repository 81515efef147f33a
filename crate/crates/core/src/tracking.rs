//! Persistent shopper tracks over per-frame skeletons.
//!
//! One `Tracker` instance serves one camera and is strictly sequential in
//! frame order. Matching is a global minimum-cost assignment between the
//! frame's skeletons and the non-deleted tracks, so the result does not
//! depend on skeleton enumeration order. Fully occluded tracks are blocked
//! rather than deleted unless they vanish at the frame edge (lazy tracking);
//! a blocked track that matches again later keeps its track id and identity.

use crate::config::{IdentityConfig, PipelineConfig, TrackingConfig};
use crate::hungarian::solve_min_cost;
use crate::identity::FaceLabel;
use crate::trace::{CameraConfig, Skeleton};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackState {
    Active,
    Blocked,
    Deleted,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub track_id: u64,
    pub state: TrackState,
    /// Bound shopper identity; None until the streak rule fires.
    pub identity: Option<String>,
    pub last_skeleton: Skeleton,
    pub last_seen_frame: u64,
    pub last_seen_t: f64,
    pub created_t: f64,
    /// Consecutive frames with the same face label.
    pub identity_streak: u32,
    streak_label: Option<FaceLabel>,
    /// Times the bound identity changed to a different shopper.
    pub identity_switches: u32,
    /// When the identity was first bound, for the identification-delay metric.
    pub identity_bound_t: Option<f64>,
}

/// Result of matching one frame's skeletons against the track set.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// (skeleton index, track index in tracker order, normalized cost).
    pub assigned: Vec<(usize, usize, f64)>,
    /// Skeleton indices that matched nothing and will found new tracks.
    pub unmatched_skeletons: Vec<usize>,
    /// Skeleton indices skipped this frame: skeletal and color evidence
    /// confidently named different tracks.
    pub skipped: Vec<usize>,
}

/// One skeleton's track attribution in a processed frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackLogEntry {
    pub skeleton_index: usize,
    pub track_id: u64,
    pub identity: Option<String>,
    /// Normalized match cost; None when this frame founded the track.
    pub cost: Option<f64>,
}

/// Mean pixel distance over joints visible in both skeletons.
pub fn skeletal_cost(a: &Skeleton, b: &Skeleton) -> Option<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut ai = a.keypoints.iter().peekable();
    let mut bi = b.keypoints.iter().peekable();
    while let (Some(ka), Some(kb)) = (ai.peek(), bi.peek()) {
        match ka.joint.cmp(&kb.joint) {
            std::cmp::Ordering::Less => {
                ai.next();
            }
            std::cmp::Ordering::Greater => {
                bi.next();
            }
            std::cmp::Ordering::Equal => {
                sum += ((ka.x - kb.x).powi(2) + (ka.y - kb.y).powi(2)).sqrt();
                n += 1;
                ai.next();
                bi.next();
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some((sum / n as f64, n))
    }
}

fn color_cost(a: &Skeleton, b: &Skeleton) -> Option<f64> {
    match (&a.upper_body_hist, &b.upper_body_hist) {
        (Some(ha), Some(hb)) => Some(ha.distance(hb)),
        _ => None,
    }
}

fn centroid(sk: &Skeleton) -> (f64, f64) {
    if sk.keypoints.is_empty() {
        return (0.0, 0.0);
    }
    let n = sk.keypoints.len() as f64;
    let sx: f64 = sk.keypoints.iter().map(|k| k.x).sum();
    let sy: f64 = sk.keypoints.iter().map(|k| k.y).sum();
    (sx / n, sy / n)
}

pub struct Tracker {
    tracking: TrackingConfig,
    streak_required: u32,
    width_px: u32,
    height_px: u32,
    gate_px: f64,
    edge_margin_px: f64,
    tracks: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(camera: &CameraConfig, tracking: &TrackingConfig, identity: &IdentityConfig) -> Self {
        Tracker {
            gate_px: PipelineConfig::scale_px(tracking.distance_gate_px, camera.width_px),
            edge_margin_px: tracking.edge_margin_frac * camera.width_px as f64,
            tracking: tracking.clone(),
            streak_required: identity.identity_streak,
            width_px: camera.width_px,
            height_px: camera.height_px,
            tracks: Vec::new(),
            next_id: 1,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn track(&self, track_id: u64) -> Option<&Track> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    /// Normalized pair cost in [0, 1): skeletal distance over the gate when
    /// enough joints are jointly visible, otherwise color distance over the
    /// color gate. Returns None for infeasible pairs.
    fn pair_cost(&self, sk: &Skeleton, track: &Track) -> Option<f64> {
        if let Some((dist, n)) = skeletal_cost(sk, &track.last_skeleton) {
            if n >= self.tracking.min_visible_subset {
                return if dist < self.gate_px { Some(dist / self.gate_px) } else { None };
            }
        }
        let ed = color_cost(sk, &track.last_skeleton)?;
        if ed < self.tracking.color_gate {
            Some(ed / self.tracking.color_gate)
        } else {
            None
        }
    }

    /// The track a confident skeletal match names, if any.
    fn skeletal_verdict(&self, sk: &Skeleton, candidates: &[usize]) -> Option<usize> {
        candidates
            .iter()
            .filter_map(|&ti| {
                let (dist, n) = skeletal_cost(sk, &self.tracks[ti].last_skeleton)?;
                (n >= self.tracking.min_visible_subset && dist < self.gate_px).then_some((dist, ti))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, ti)| ti)
    }

    /// The track a confident color match names, if any.
    fn color_verdict(&self, sk: &Skeleton, candidates: &[usize]) -> Option<(usize, f64)> {
        candidates
            .iter()
            .filter_map(|&ti| {
                let ed = color_cost(sk, &self.tracks[ti].last_skeleton)?;
                (ed < self.tracking.color_gate).then_some((ed, ti))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(ed, ti)| (ti, ed))
    }

    /// Matches skeletons to tracks without mutating any state.
    pub fn match_skeletons(&self, skeletons: &[Skeleton]) -> MatchOutcome {
        let candidates: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| self.tracks[i].state != TrackState::Deleted)
            .collect();

        // A skeleton whose skeletal evidence confidently names one track while
        // its color evidence confidently names another is contradictory; it is
        // left unmatched this frame and retried on later frames.
        let mut skipped = Vec::new();
        let mut eligible = Vec::new();
        for (si, sk) in skeletons.iter().enumerate() {
            let skeletal = self.skeletal_verdict(sk, &candidates);
            let color = self.color_verdict(sk, &candidates);
            if let (Some(st), Some((ct, _))) = (skeletal, &color) {
                if st != *ct {
                    skipped.push(si);
                    continue;
                }
            }
            eligible.push(si);
        }

        let costs: Vec<Vec<Option<f64>>> = eligible
            .iter()
            .map(|&si| {
                candidates.iter().map(|&ti| self.pair_cost(&skeletons[si], &self.tracks[ti])).collect()
            })
            .collect();
        let matching = solve_min_cost(&costs);

        let mut assigned: Vec<(usize, usize, f64)> = matching
            .pairs
            .iter()
            .map(|&(r, c)| (eligible[r], candidates[c], costs[r][c].unwrap()))
            .collect();
        assigned.sort_unstable_by_key(|&(si, _, _)| si);

        let matched_set: std::collections::BTreeSet<usize> =
            assigned.iter().map(|&(si, _, _)| si).collect();
        let unmatched_skeletons: Vec<usize> =
            eligible.into_iter().filter(|si| !matched_set.contains(si)).collect();

        MatchOutcome { assigned, unmatched_skeletons, skipped }
    }

    /// Feeds one face classification into a track's identity streak.
    pub fn bind_identity(&mut self, track_id: u64, label: FaceLabel, t: f64) {
        let required = self.streak_required;
        let Some(track) = self.tracks.iter_mut().find(|t| t.track_id == track_id) else {
            return;
        };
        if track.streak_label.as_ref() == Some(&label) {
            track.identity_streak += 1;
        } else {
            track.streak_label = Some(label.clone());
            track.identity_streak = 1;
        }
        if track.identity_streak >= required {
            if let FaceLabel::Shopper(id) = &label {
                if track.identity.as_deref() != Some(id) {
                    if track.identity.is_some() {
                        track.identity_switches += 1;
                    }
                    track.identity = Some(id.clone());
                    if track.identity_bound_t.is_none() {
                        track.identity_bound_t = Some(t);
                    }
                }
            }
        }
    }

    /// Blocks or deletes tracks that matched nothing this frame and expires
    /// stale blocked tracks. `matched_track_indices` are tracker-order
    /// indices that were just updated.
    pub fn step_occlusion(&mut self, matched_track_indices: &[usize], t: f64) {
        let margin = self.edge_margin_px;
        let (w, h) = (self.width_px as f64, self.height_px as f64);
        for (ti, track) in self.tracks.iter_mut().enumerate() {
            match track.state {
                TrackState::Deleted => {}
                TrackState::Active if !matched_track_indices.contains(&ti) => {
                    let (cx, cy) = centroid(&track.last_skeleton);
                    let near_edge =
                        cx < margin || cx > w - margin || cy < margin || cy > h - margin;
                    track.state = if near_edge { TrackState::Deleted } else { TrackState::Blocked };
                }
                TrackState::Blocked if t - track.last_seen_t > self.tracking.blocked_expiry_s => {
                    track.state = TrackState::Deleted;
                }
                _ => {}
            }
        }
    }

    /// Processes one frame end to end: match, commit, identity, occlusion.
    /// `face_labels[i]` is the classifier output for skeleton i on frames
    /// where its face was visible.
    pub fn step(
        &mut self,
        frame: u64,
        t: f64,
        skeletons: &[Skeleton],
        face_labels: &[Option<FaceLabel>],
    ) -> Vec<TrackLogEntry> {
        debug_assert!(face_labels.is_empty() || face_labels.len() == skeletons.len());
        let outcome = self.match_skeletons(skeletons);

        let mut entries = Vec::new();
        let mut matched_tracks = Vec::new();
        for &(si, ti, cost) in &outcome.assigned {
            let track = &mut self.tracks[ti];
            track.state = TrackState::Active;
            track.last_skeleton = skeletons[si].clone();
            track.last_seen_frame = frame;
            track.last_seen_t = t;
            matched_tracks.push(ti);
            entries.push((si, track.track_id, Some(cost)));
        }

        // New tracks are founded in centroid order so ids do not depend on
        // the input ordering of simultaneous first appearances.
        let mut founders = outcome.unmatched_skeletons.clone();
        founders.sort_by(|&a, &b| {
            let (ax, ay) = centroid(&skeletons[a]);
            let (bx, by) = centroid(&skeletons[b]);
            ax.total_cmp(&bx).then(ay.total_cmp(&by)).then(a.cmp(&b))
        });
        for si in founders {
            let id = self.next_id;
            self.next_id += 1;
            matched_tracks.push(self.tracks.len());
            self.tracks.push(Track {
                track_id: id,
                state: TrackState::Active,
                identity: None,
                last_skeleton: skeletons[si].clone(),
                last_seen_frame: frame,
                last_seen_t: t,
                created_t: t,
                identity_streak: 0,
                streak_label: None,
                identity_switches: 0,
                identity_bound_t: None,
            });
            entries.push((si, id, None));
        }

        for &(si, track_id, _) in &entries {
            if let Some(Some(label)) = face_labels.get(si) {
                self.bind_identity(track_id, label.clone(), t);
            }
        }

        self.step_occlusion(&matched_tracks, t);

        let mut log: Vec<TrackLogEntry> = entries
            .into_iter()
            .map(|(si, track_id, cost)| TrackLogEntry {
                skeleton_index: si,
                track_id,
                identity: self.track(track_id).and_then(|t| t.identity.clone()),
                cost,
            })
            .collect();
        log.sort_by_key(|e| e.skeleton_index);
        log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ColorHistogram, JointName, Keypoint, HIST_BINS};

    fn camera() -> CameraConfig {
        CameraConfig {
            camera_id: "cam0".into(),
            height_m: 2.5,
            tilt_deg: 55.0,
            hfov_deg: 90.0,
            vfov_deg: 60.0,
            width_px: 1280,
            height_px: 720,
            clock_offset_s: 0.0,
        }
    }

    fn tracker() -> Tracker {
        Tracker::new(&camera(), &TrackingConfig::default(), &IdentityConfig::default())
    }

    /// Six-joint skeleton anchored at (x, y).
    fn skeleton_at(x: f64, y: f64) -> Skeleton {
        let offsets = [
            (JointName::Nose, 0.0, 0.0),
            (JointName::Neck, 0.0, 20.0),
            (JointName::LeftShoulder, 15.0, 22.0),
            (JointName::RightShoulder, -15.0, 22.0),
            (JointName::LeftHip, 10.0, 70.0),
            (JointName::RightHip, -10.0, 70.0),
        ];
        Skeleton::new(
            offsets
                .iter()
                .map(|&(joint, dx, dy)| Keypoint { joint, x: x + dx, y: y + dy, confidence: 0.9 })
                .collect(),
        )
    }

    fn hist_peaked_at(bin: usize) -> ColorHistogram {
        let mut counts = vec![0.0; HIST_BINS];
        counts[bin] = 1.0;
        ColorHistogram::from_counts(&counts)
    }

    #[test]
    fn identical_skeleton_matches_at_zero_cost() {
        let mut tr = tracker();
        let sk = skeleton_at(400.0, 200.0);
        let log = tr.step(0, 0.0, &[sk.clone()], &[None]);
        assert_eq!(log.len(), 1);
        assert!(log[0].cost.is_none());
        let id = log[0].track_id;

        let log = tr.step(1, 0.066, &[sk], &[None]);
        assert_eq!(log[0].track_id, id);
        assert_eq!(log[0].cost, Some(0.0));
    }

    #[test]
    fn crossed_distances_resolve_globally() {
        let mut tr = tracker();
        tr.step(0, 0.0, &[skeleton_at(400.0, 200.0), skeleton_at(500.0, 200.0)], &[None, None]);
        let ids: Vec<u64> = tr.tracks().iter().map(|t| t.track_id).collect();

        // Skeleton P sits 30 px from track 0 and 70 px from track 1;
        // skeleton Q sits 40 px from track 0 and 60 px from track 1. Greedy
        // per-skeleton nearest would give both to track 0; the global
        // optimum (30 + 60 < 40 + 70) pairs P with 0 and Q with 1.
        let p = skeleton_at(430.0, 200.0);
        let q = skeleton_at(440.0, 200.0);
        let log = tr.step(1, 0.066, &[q.clone(), p.clone()], &[None, None]);
        assert_eq!(log[0].track_id, ids[1], "q goes to the farther track");
        assert_eq!(log[1].track_id, ids[0], "p takes the nearest track");

        // Brute force over both permutations agrees.
        let d = |a: &Skeleton, b: &Skeleton| skeletal_cost(a, b).unwrap().0;
        let t0 = skeleton_at(400.0, 200.0);
        let t1 = skeleton_at(500.0, 200.0);
        let direct = d(&q, &t0) + d(&p, &t1);
        let crossed = d(&q, &t1) + d(&p, &t0);
        assert!(crossed < direct);
    }

    #[test]
    fn conflicting_evidence_skips_the_frame() {
        let mut tr = tracker();
        let mut a = skeleton_at(400.0, 200.0);
        a.upper_body_hist = Some(hist_peaked_at(0));
        let mut b = skeleton_at(900.0, 200.0);
        b.upper_body_hist = Some(hist_peaked_at(10));
        tr.step(0, 0.0, &[a, b], &[None, None]);

        // Joints sit on track A, but the histogram matches track B and is
        // far from A's.
        let mut s = skeleton_at(405.0, 200.0);
        s.upper_body_hist = Some(hist_peaked_at(10));
        let outcome = tr.match_skeletons(&[s.clone()]);
        assert_eq!(outcome.skipped, vec![0]);
        assert!(outcome.assigned.is_empty());
        assert!(outcome.unmatched_skeletons.is_empty());

        // The full step neither matches nor founds a track for it.
        let n_before = tr.tracks().len();
        let log = tr.step(1, 0.066, &[s], &[None]);
        assert!(log.is_empty());
        assert_eq!(tr.tracks().len(), n_before);
    }

    #[test]
    fn vanishing_near_edge_deletes() {
        let mut tr = tracker();
        tr.step(0, 0.0, &[skeleton_at(20.0, 200.0)], &[None]);
        tr.step(1, 0.066, &[], &[]);
        assert_eq!(tr.tracks()[0].state, TrackState::Deleted);
    }

    #[test]
    fn vanishing_at_center_blocks() {
        let mut tr = tracker();
        tr.step(0, 0.0, &[skeleton_at(640.0, 300.0)], &[None]);
        tr.step(1, 0.066, &[], &[]);
        assert_eq!(tr.tracks()[0].state, TrackState::Blocked);
    }

    #[test]
    fn blocked_track_reactivates_with_same_id() {
        let mut tr = tracker();
        let sk = skeleton_at(640.0, 300.0);
        let log = tr.step(0, 0.0, &[sk.clone()], &[None]);
        let id = log[0].track_id;
        for f in 1..=30 {
            tr.step(f, f as f64 / 15.0, &[], &[]);
        }
        assert_eq!(tr.tracks()[0].state, TrackState::Blocked);
        let log = tr.step(31, 31.0 / 15.0, &[sk], &[None]);
        assert_eq!(log[0].track_id, id);
        assert_eq!(tr.tracks()[0].state, TrackState::Active);
    }

    #[test]
    fn blocked_track_expires() {
        let mut tr = tracker();
        tr.step(0, 0.0, &[skeleton_at(640.0, 300.0)], &[None]);
        tr.step(1, 1.0, &[], &[]);
        assert_eq!(tr.tracks()[0].state, TrackState::Blocked);
        tr.step(2, 32.0, &[], &[]);
        assert_eq!(tr.tracks()[0].state, TrackState::Deleted);
    }

    #[test]
    fn identity_binds_after_three_consecutive_labels() {
        let mut tr = tracker();
        let sk = skeleton_at(640.0, 300.0);
        let a = || Some(FaceLabel::Shopper("A".into()));
        tr.step(0, 0.0, &[sk.clone()], &[a()]);
        tr.step(1, 0.1, &[sk.clone()], &[a()]);
        assert_eq!(tr.tracks()[0].identity, None);
        tr.step(2, 0.2, &[sk.clone()], &[a()]);
        assert_eq!(tr.tracks()[0].identity, Some("A".into()));
    }

    #[test]
    fn differing_label_resets_streak() {
        let mut tr = tracker();
        let sk = skeleton_at(640.0, 300.0);
        let lab = |s: &str| Some(FaceLabel::Shopper(s.into()));
        tr.step(0, 0.0, &[sk.clone()], &[lab("A")]);
        tr.step(1, 0.1, &[sk.clone()], &[lab("B")]);
        tr.step(2, 0.2, &[sk.clone()], &[lab("A")]);
        assert_eq!(tr.tracks()[0].identity, None);
    }

    #[test]
    fn unknown_resets_streak_and_binding_recovers() {
        let mut tr = tracker();
        let sk = skeleton_at(640.0, 300.0);
        let a = || Some(FaceLabel::Shopper("A".into()));
        let labels = [a(), a(), Some(FaceLabel::Unknown), a(), a(), a()];
        for (f, lab) in labels.into_iter().enumerate() {
            tr.step(f as u64, f as f64 * 0.1, &[sk.clone()], &[lab]);
            let expect = if f < 5 { None } else { Some("A".to_string()) };
            assert_eq!(tr.tracks()[0].identity, expect, "after frame {f}");
        }
    }

    #[test]
    fn track_ids_never_reused() {
        let mut tr = tracker();
        tr.step(0, 0.0, &[skeleton_at(20.0, 200.0)], &[None]);
        tr.step(1, 0.1, &[], &[]);
        assert_eq!(tr.tracks()[0].state, TrackState::Deleted);
        let log = tr.step(2, 0.2, &[skeleton_at(20.0, 200.0)], &[None]);
        assert_ne!(log[0].track_id, tr.tracks()[0].track_id);
    }

    #[test]
    fn assignment_is_one_to_one() {
        let mut tr = tracker();
        let sks: Vec<Skeleton> =
            (0..4).map(|i| skeleton_at(200.0 + 150.0 * i as f64, 300.0)).collect();
        tr.step(0, 0.0, &sks, &vec![None; 4]);
        let moved: Vec<Skeleton> =
            (0..4).map(|i| skeleton_at(210.0 + 150.0 * i as f64, 300.0)).collect();
        let log = tr.step(1, 0.066, &moved, &vec![None; 4]);
        let mut track_ids: Vec<u64> = log.iter().map(|e| e.track_id).collect();
        track_ids.sort_unstable();
        track_ids.dedup();
        assert_eq!(track_ids.len(), 4);
    }

    #[test]
    fn matching_is_input_order_invariant() {
        let build = |order: &[usize]| {
            let mut tr = tracker();
            let sks: Vec<Skeleton> =
                (0..3).map(|i| skeleton_at(200.0 + 200.0 * i as f64, 300.0)).collect();
            tr.step(0, 0.0, &sks, &vec![None; 3]);
            let moved: Vec<Skeleton> = order
                .iter()
                .map(|&i| skeleton_at(205.0 + 200.0 * i as f64, 302.0))
                .collect();
            let log = tr.step(1, 0.066, &moved, &vec![None; 3]);
            // Map centroid x of each skeleton to its track id.
            let mut pairs: Vec<(i64, u64)> = log
                .iter()
                .map(|e| (centroid(&moved[e.skeleton_index]).0 as i64, e.track_id))
                .collect();
            pairs.sort_unstable();
            pairs
        };
        assert_eq!(build(&[0, 1, 2]), build(&[2, 0, 1]));
    }

    #[test]
    fn color_fallback_matches_on_sparse_joints() {
        let mut tr = tracker();
        let mut full = skeleton_at(640.0, 300.0);
        full.upper_body_hist = Some(hist_peaked_at(5));
        tr.step(0, 0.0, &[full], &[None]);

        // Only two joints visible: below the subset minimum, so the color
        // histogram must carry the match.
        let mut sparse = Skeleton::new(vec![
            Keypoint { joint: JointName::Nose, x: 645.0, y: 300.0, confidence: 0.9 },
            Keypoint { joint: JointName::Neck, x: 645.0, y: 320.0, confidence: 0.9 },
        ]);
        sparse.upper_body_hist = Some(hist_peaked_at(5));
        let log = tr.step(1, 0.066, &[sparse], &[None]);
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].track_id, tr.tracks()[0].track_id);
        assert_eq!(tr.tracks().len(), 1);
    }
}
