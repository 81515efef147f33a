//! Shelf-side sensor fusion for checkout-free retail.
//!
//! This crate turns three sensor streams - per-frame body keypoints, shelf
//! weight scales, and RFID RSSI readings - into per-shopper purchase
//! assignments. It ships with a seeded trace simulator, an evaluation
//! harness (precision/recall under adversarial shopper behaviour), and a
//! GPU multiplexing cost-model simulator.
//!
//! The main entry points are:
//!
//! - [`trace`]: canonical data model and JSONL trace formats
//! - [`simgen`]: seeded synthetic trace generation with ground truth
//! - [`pipeline`]: end-to-end run from a loaded trace to assignments
//! - [`eval`]: scoring assignments against ground truth
//! - [`multiplex`]: round-robin GPU scheduling simulation

pub mod config;
pub mod dtw;
pub mod eval;
pub mod fusion;
pub mod hungarian;
pub mod identity;
pub mod limbs;
pub mod multiplex;
pub mod pipeline;
pub mod proximity;
pub mod simgen;
pub mod trace;
pub mod tracking;

pub use config::PipelineConfig;
pub use eval::{EvalReport, PurchaseRecord, RunStats};
pub use trace::{
    ColorHistogram, GroundTruthAction, JointName, Keypoint, RfidSample, ScaleReading, Skeleton,
    StoreConfig, Trace,
};
