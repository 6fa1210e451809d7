//! Per-channel linear radiometric correction from six neutral card patches.
//!
//! Each channel is fitted independently by ordinary least squares,
//! `reference ~ gain * measured + offset`, and applied as
//! `x -> clamp(gain * x + offset, 0, 255)` on the stored 8-bit scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GrayPatchSample, CARD_PATCHES};
use crate::raster::RgbRaster;

/// Default reference values for the six neutral patches of a 24-patch checker,
/// brightest first, on the 8-bit scale.
pub const DEFAULT_REFERENCE_JSON: &str = include_str!("../data/gray_card_reference.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub residual_rms: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayCardReference {
    pub description: String,
    pub reference_values: [f64; CARD_PATCHES],
}

pub fn default_reference() -> GrayCardReference {
    serde_json::from_str(DEFAULT_REFERENCE_JSON).expect("bundled gray card reference is valid")
}

impl CalibrationModel {
    pub fn identity() -> Self {
        Self {
            gain: [1.0; 3],
            offset: [0.0; 3],
            residual_rms: [0.0; 3],
        }
    }

    #[inline]
    pub fn correct(&self, channel: usize, value: f64) -> f64 {
        (self.gain[channel] * value + self.offset[channel]).clamp(0.0, 255.0)
    }
}

/// Closed-form least-squares fit per channel.
pub fn fit_calibration(patches: &[GrayPatchSample]) -> Result<CalibrationModel> {
    if patches.len() != CARD_PATCHES {
        return Err(Error::Validation(format!(
            "calibration needs {CARD_PATCHES} gray patches, got {}",
            patches.len()
        )));
    }
    let n = patches.len() as f64;
    let mut model = CalibrationModel::identity();
    let ref_mean = patches.iter().map(|p| p.reference_value).sum::<f64>() / n;
    for c in 0..3 {
        let m_mean = patches.iter().map(|p| p.measured_rgb[c]).sum::<f64>() / n;
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for p in patches {
            let dx = p.measured_rgb[c] - m_mean;
            sxx += dx * dx;
            sxy += dx * (p.reference_value - ref_mean);
        }
        // Relative test so that tiny-but-real spreads are still accepted.
        let scale = patches
            .iter()
            .map(|p| p.measured_rgb[c].abs())
            .fold(1.0, f64::max);
        if sxx <= (1e-12 * scale) * (1e-12 * scale) * n {
            return Err(Error::Fit(format!(
                "rank-deficient calibration: channel {c} has zero variance in measured values"
            )));
        }
        let gain = sxy / sxx;
        if !(gain > 0.0) {
            return Err(Error::Fit(format!(
                "calibration gain for channel {c} is not positive ({gain})"
            )));
        }
        let offset = ref_mean - gain * m_mean;
        let sse: f64 = patches
            .iter()
            .map(|p| {
                let r = gain * p.measured_rgb[c] + offset - p.reference_value;
                r * r
            })
            .sum();
        model.gain[c] = gain;
        model.offset[c] = offset;
        model.residual_rms[c] = (sse / n).sqrt();
    }
    Ok(model)
}

pub fn apply_calibration(model: &CalibrationModel, image: &RgbRaster) -> RgbRaster {
    let mut out = image.clone();
    for px in out.pixels_mut() {
        for (c, v) in px.iter_mut().enumerate() {
            *v = model.correct(c, *v as f64) as f32;
        }
    }
    out
}

/// Mean RGB over an axis-aligned rectangle `(x, y, w, h)`; used to measure card patches.
pub fn measure_patch(image: &RgbRaster, rect: (usize, usize, usize, usize)) -> [f64; 3] {
    let (x0, y0, w, h) = rect;
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for y in y0..(y0 + h).min(image.height()) {
        for x in x0..(x0 + w).min(image.width()) {
            let p = image.get(x, y);
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
            n += 1;
        }
    }
    sum.map(|s| s / n.max(1) as f64)
}
