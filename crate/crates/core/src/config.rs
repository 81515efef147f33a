//! Pipeline tuning parameters.
//!
//! Every threshold the pipeline uses lives here so a single JSON document can
//! override any of them. All pixel thresholds are calibrated for a 1280 px
//! wide frame and scaled linearly with actual frame width at use sites.

use serde::{Deserialize, Serialize};

/// Frame width the pixel-threshold defaults are calibrated against.
pub const REFERENCE_WIDTH_PX: f64 = 1280.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentityConfig {
    /// Neighbors consulted by the face classifier.
    pub k: usize,
    /// Embedding distance beyond which the nearest neighbor is not trusted.
    pub unknown_threshold: f64,
    /// Consecutive identical labels required before binding an identity.
    pub identity_streak: u32,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        IdentityConfig { k: 3, unknown_threshold: 0.6, identity_streak: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    /// Mean per-joint distance above which a skeleton cannot join a track.
    pub distance_gate_px: f64,
    /// Joints both sides must share before the skeletal cost is trusted.
    pub min_visible_subset: usize,
    /// Upper-body histogram distance bound for the color fallback.
    pub color_gate: f64,
    /// Fraction of frame width treated as the exit margin.
    pub edge_margin_frac: f64,
    /// Blocked tracks older than this are deleted.
    pub blocked_expiry_s: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            distance_gate_px: 80.0,
            min_visible_subset: 4,
            color_gate: 0.25,
            edge_margin_frac: 0.03,
            blocked_expiry_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimbConfig {
    /// Percentile of medoid distances kept by the outlier filter.
    pub medoid_percentile: f64,
    /// Forearm color distance below which two limbs may share a body.
    pub color_thresh: f64,
}

impl Default for LimbConfig {
    fn default() -> Self {
        LimbConfig { medoid_percentile: 85.0, color_thresh: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProximityConfig {
    /// Hand-to-shelf pixel distance that opens an event.
    pub pixel_threshold_px: f64,
    /// Extra distance required to close an open event.
    pub hysteresis_px: f64,
    /// Ankle-to-shelf floor distance (meters) for the fallback rule.
    pub floor_threshold_m: f64,
    /// Events shorter than this are discarded as flicker.
    pub min_duration_s: f64,
}

impl Default for ProximityConfig {
    fn default() -> Self {
        ProximityConfig {
            pixel_threshold_px: 40.0,
            hysteresis_px: 10.0,
            floor_threshold_m: 0.6,
            min_duration_s: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Vision, weight, RFID fusion weights. Renormalized over the sensors
    /// actually present for a given (hand, item) pair.
    pub w_vision: f64,
    pub w_weight: f64,
    pub w_rfid: f64,
    /// DTW distance scale in exp(-d / sigma).
    pub dtw_sigma: f64,
    /// Sakoe-Chiba band half-width as a fraction of series length.
    pub dtw_band_frac: f64,
    /// Weight difference floor (grams) in the inverse-delta item probability.
    pub delta_floor_g: f64,
    /// Median filter window (samples) applied before plateau detection.
    pub median_window: usize,
    /// Moving-window length (seconds) for change-point detection.
    pub plateau_window_s: f64,
    /// Window mean difference (grams) that marks a transition.
    pub plateau_step_g: f64,
    /// Zero-crossing rate (Hz) of the transition region above which the
    /// event is marked tampered.
    pub tamper_zcr_hz: f64,
    /// Events below this magnitude (grams) are noise, not actions.
    pub min_magnitude_g: f64,
    /// Neighbors consulted by the vision item classifier.
    pub vision_k: usize,
    /// Composite probability below which an assignment pair is not billed.
    pub min_assignment_p: f64,
    /// Interval IoU below which visual hand activity opens a new item
    /// instance instead of merging into an existing one.
    pub vision_instance_iou_gate: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            w_vision: 0.25,
            w_weight: 0.35,
            w_rfid: 0.40,
            dtw_sigma: 2.0,
            dtw_band_frac: 0.2,
            delta_floor_g: 0.5,
            median_window: 5,
            plateau_window_s: 0.3,
            plateau_step_g: 15.0,
            tamper_zcr_hz: 6.0,
            min_magnitude_g: 15.0,
            vision_k: 3,
            min_assignment_p: 0.12,
            vision_instance_iou_gate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiplexConfig {
    /// Full pose detection latency, milliseconds.
    pub detect_ms: f64,
    /// Per-frame propagation latency, milliseconds.
    pub track_ms: f64,
    /// Source camera frame rate, Hz.
    pub camera_fps: f64,
    /// Pixel radius searched for descriptor matches.
    pub search_radius_px: f64,
    /// Hamming distance bound for a descriptor match (out of 256 bits).
    pub hamming_threshold: u32,
    /// Confidence multiplier applied to joints carried forward unmatched.
    pub confidence_decay: f64,
}

impl Default for MultiplexConfig {
    fn default() -> Self {
        MultiplexConfig {
            detect_ms: 63.3,
            track_ms: 5.0,
            camera_fps: 30.0,
            search_radius_px: 32.0,
            hamming_threshold: 64,
            confidence_decay: 0.8,
        }
    }
}

/// Complete tuning surface of the pipeline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub identity: IdentityConfig,
    pub tracking: TrackingConfig,
    pub limbs: LimbConfig,
    pub proximity: ProximityConfig,
    pub fusion: FusionConfig,
    pub multiplex: MultiplexConfig,
}

impl PipelineConfig {
    /// Reads a config from JSON text; absent fields keep their defaults.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Scales a pixel threshold calibrated at the reference width to the
    /// given frame width.
    pub fn scale_px(value: f64, frame_width_px: u32) -> f64 {
        value * frame_width_px as f64 / REFERENCE_WIDTH_PX
    }

    /// Fusion weights in (vision, weight, rfid) order.
    pub fn fusion_weights(&self) -> [f64; 3] {
        [self.fusion.w_vision, self.fusion.w_weight, self.fusion.w_rfid]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_yields_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"fusion": {"w_vision": 0.5}}"#).unwrap();
        assert_eq!(cfg.fusion.w_vision, 0.5);
        assert_eq!(cfg.fusion.w_weight, 0.35);
        assert_eq!(cfg.identity.k, 3);
    }

    #[test]
    fn default_fusion_weights_sum_to_one() {
        let [v, w, r] = PipelineConfig::default().fusion_weights();
        assert!((v + w + r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_scaling_is_linear_in_width() {
        assert_eq!(PipelineConfig::scale_px(80.0, 1280), 80.0);
        assert_eq!(PipelineConfig::scale_px(80.0, 640), 40.0);
    }
}
