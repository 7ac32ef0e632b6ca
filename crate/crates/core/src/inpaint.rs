//! Mask-guided inpainting: the known region is re-noised from the original at
//! every step and pasted over the generated state.

use rand::Rng;

use crate::denoiser::NoiseEstimator;
use crate::error::{Error, Result};
use crate::sampler::{ancestral_mean, ancestral_step, q_sample, standard_normal_like};
use crate::schedule::NoiseSchedule;
use crate::voxgrid::Volume;

/// Rejects masks with values other than 0 and 1.
pub fn check_binary(mask: &Volume) -> Result<()> {
    match mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::InvalidMask(format!("mask value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// `(1 - c) * known + c * unknown` for a binary mask `c`, evaluated as a
/// selection so that known voxels are copied bit for bit.
pub fn repaint_combine(known: &Volume, unknown: &Volume, mask: &Volume) -> Result<Volume> {
    check_binary(mask)?;
    known.check_same_shape(unknown)?;
    known.check_same_shape(mask)?;
    let data = known
        .data()
        .iter()
        .zip(unknown.data())
        .zip(mask.data())
        .map(|((&k, &u), &c)| if c == 1.0 { u } else { k })
        .collect();
    known.with_data(data)
}

/// Regenerates the voxels where `mask` is 1 and keeps `x_orig` elsewhere.
pub fn inpaint_volume<E: NoiseEstimator + ?Sized, R: Rng + ?Sized>(
    est: &E,
    s: &NoiseSchedule,
    x_orig: &Volume,
    mask: &Volume,
    rng: &mut R,
) -> Result<Volume> {
    check_binary(mask)?;
    x_orig.check_same_shape(mask)?;
    let mut x = standard_normal_like(x_orig, rng);
    for t in (1..=s.steps()).rev() {
        let eps = est.estimate(&x, t)?;
        let unknown = if t > 1 {
            ancestral_step(s, &x, t, &eps, &standard_normal_like(&x, rng))?
        } else {
            ancestral_mean(s, &x, t, &eps)?
        };
        let known = if t > 1 {
            q_sample(s, x_orig, t - 1, &standard_normal_like(x_orig, rng))?
        } else {
            x_orig.clone()
        };
        x = repaint_combine(&known, &unknown, mask)?;
    }
    Ok(x)
}
