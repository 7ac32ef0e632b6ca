//! Reconstruction-based anomaly detection: noise a masked scan to a fixed
//! timestep, predict the clean image in one shot, and compare.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::NoiseEstimator;
use crate::error::{Error, Result};
use crate::inpaint::check_binary;
use crate::sampler::{predict_x0, q_sample, standard_normal_like};
use crate::schedule::NoiseSchedule;
use crate::voxgrid::Volume;

/// Value given to voxels outside the region of interest.
pub const BACKGROUND: f32 = -1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyResult {
    /// Masked input minus its reconstruction.
    pub map: Volume,
    pub abs_map: Volume,
    pub mask: Volume,
    pub score: f64,
}

/// `round(0.95 T)`, at least 1.
pub fn default_t_fixed(steps: usize) -> usize {
    ((0.95 * steps as f64).round() as usize).clamp(1, steps.max(1))
}

/// `(abs_map >= threshold) & roi`.
pub fn binarize(abs_map: &Volume, roi: &Volume, threshold: f64) -> Result<Volume> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {threshold}")));
    }
    abs_map.zip_map(roi, |a, r| (r == 1.0 && a as f64 >= threshold) as u8 as f32)
}

/// Aggregates `abs_map` over the ROI.
pub fn roi_score(abs_map: &Volume, roi: &Volume, mode: ScoreMode) -> Result<f64> {
    abs_map.check_same_shape(roi)?;
    let vals = abs_map.data().iter().zip(roi.data()).filter(|(_, &r)| r == 1.0).map(|(&a, _)| a as f64);
    let (mut n, mut sum, mut max) = (0usize, 0.0f64, f64::NEG_INFINITY);
    for v in vals {
        n += 1;
        sum += v;
        max = max.max(v);
    }
    if n == 0 {
        return Err(Error::EmptyRoi);
    }
    Ok(match mode {
        ScoreMode::Max => max,
        ScoreMode::Mean => sum / n as f64,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn detect<E: NoiseEstimator + ?Sized, R: Rng + ?Sized>(
    est: &E,
    s: &NoiseSchedule,
    x: &Volume,
    roi: &Volume,
    t_fixed: usize,
    threshold: f64,
    mode: ScoreMode,
    rng: &mut R,
) -> Result<AnomalyResult> {
    check_binary(roi).map_err(|_| Error::InvalidMask("roi must be binary".into()))?;
    x.check_same_shape(roi)?;
    s.check_timestep(t_fixed)?;
    if !roi.data().contains(&1.0) {
        return Err(Error::EmptyRoi);
    }
    let masked = x.zip_map(roi, |v, r| if r == 1.0 { v } else { BACKGROUND })?;
    let eps = standard_normal_like(x, rng);
    let x_t = q_sample(s, &masked, t_fixed, &eps)?;
    let eps_hat = est.estimate(&x_t, t_fixed)?;
    let recon = predict_x0(s, &x_t, t_fixed, &eps_hat)?;
    let map = masked.zip_map(&recon, |a, b| a - b)?;
    let abs_map = map.map(f32::abs);
    let mask = binarize(&abs_map, roi, threshold)?;
    let score = roi_score(&abs_map, roi, mode)?;
    Ok(AnomalyResult { map, abs_map, mask, score })
}
