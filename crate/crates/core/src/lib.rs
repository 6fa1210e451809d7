//! Ripening analysis for time-series crop imagery.
//!
//! The crate turns per-session RGB frames, externally produced instance masks
//! and per-berry feature vectors into calibrated albedo class histograms,
//! ripeness-ratio tables and per-berry ripeness trajectories.
//!
//! Stages, in pipeline order:
//!
//! 1. [`calib`] - per-channel linear radiometric correction from six gray patches.
//! 2. [`register`] - Harris/patch matching and RANSAC homography alignment to the first frame.
//! 3. [`track`] - IoU association of instance masks into persistent berry tracks.
//! 4. [`albedo`] - k-means color classes, majority-vote berry labels, class histograms
//!    and ripeness ratios.
//! 5. [`embed`] - UMAP projection of berry features and the line-fit ripeness axis.
//!
//! [`model`] holds the shared data types and interchange file formats, and
//! [`synth`] renders synthetic bogs with full ground truth for testing every stage.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod albedo;
pub mod calib;
pub mod embed;
mod error;
pub mod model;
pub mod raster;
pub mod register;
pub mod stats;
pub mod synth;
pub mod track;

pub use albedo::{ClassHistogram, ColorClassModel, RatioRow, RipenessRatioTable};
pub use calib::CalibrationModel;
pub use embed::{EmbeddingModel, RipenessAxis, UmapParams};
pub use error::{Error, Result};
pub use model::{
    BerryTrack, FeatureRecord, GrayPatchSample, InstanceMask, InstanceMaskSet, Role, Run, Series,
    SessionManifest, TrackEntry,
};
pub use raster::{GrayRaster, RgbRaster};
pub use register::{Correspondence, Homography, MatchParams, RansacParams};
pub use track::TrackSet;
