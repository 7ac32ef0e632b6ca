//! Plug-and-play restoration with a diffusion prior: low-dose denoising and
//! z-axis super-resolution.
//!
//! Each reverse step predicts x0 from the current state, pulls it towards
//! the observation with a closed-form proximal step weighted by `rho_t`, and
//! re-noises the refined estimate to the next timestep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::NoiseEstimator;
use crate::error::{Error, Result};
use crate::sampler::{predict_x0, standard_normal_like};
use crate::schedule::{skip_subsequence, t_start_for_sigma, NoiseSchedule};
use crate::voxgrid::Volume;

/// Observation model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Degradation {
    /// `H` is the identity.
    Denoise,
    /// `H` averages slabs of `sf` consecutive z slices.
    SuperRes { sf: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationOps {
    pub degradation: Degradation,
    pub sigma_n: f64,
    pub lambda: f64,
}

impl DegradationOps {
    pub fn denoise(sigma_n: f64, lambda: f64) -> Result<Self> {
        Self::new(Degradation::Denoise, sigma_n, lambda)
    }

    pub fn super_res(sf: usize, sigma_n: f64, lambda: f64) -> Result<Self> {
        Self::new(Degradation::SuperRes { sf }, sigma_n, lambda)
    }

    pub fn new(degradation: Degradation, sigma_n: f64, lambda: f64) -> Result<Self> {
        if let Degradation::SuperRes { sf: 0 } = degradation {
            return Err(Error::InvalidArgument("scale factor must be >= 1".into()));
        }
        if !(sigma_n > 0.0) || !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("need sigma_n > 0 and lambda > 0, got {sigma_n}, {lambda}")));
        }
        Ok(DegradationOps { degradation, sigma_n, lambda })
    }

    pub fn sf(&self) -> usize {
        match self.degradation {
            Degradation::Denoise => 1,
            Degradation::SuperRes { sf } => sf,
        }
    }

    /// Forward operator.
    pub fn h(&self, x: &Volume) -> Result<Volume> {
        slab_mean(x, self.sf())
    }

    /// Right inverse of `h`: replicates each slice `sf` times.
    pub fn h_up(&self, y: &Volume) -> Result<Volume> {
        Ok(slab_replicate(y, self.sf()))
    }
}

/// Averages `sf` consecutive z slices; z spacing grows by `sf`.
pub fn slab_mean(x: &Volume, sf: usize) -> Result<Volume> {
    let [d, h, w] = x.shape();
    if sf == 0 || d % sf != 0 {
        return Err(Error::ShapeMismatch(format!("depth {d} is not a multiple of scale factor {sf}")));
    }
    if sf == 1 {
        return Ok(x.clone());
    }
    let plane = h * w;
    let mut out = vec![0.0f32; d / sf * plane];
    for (oz, o) in out.chunks_mut(plane).enumerate() {
        for (i, v) in o.iter_mut().enumerate() {
            let sum: f64 = (0..sf).map(|k| x.data()[(oz * sf + k) * plane + i] as f64).sum();
            *v = (sum / sf as f64) as f32;
        }
    }
    let mut spacing = x.spacing();
    spacing[0] *= sf as f64;
    Volume::new([d / sf, h, w], out)?.with_meta_of(x).with_spacing(spacing)
}

/// Repeats every z slice `sf` times; z spacing shrinks by `sf`.
pub fn slab_replicate(y: &Volume, sf: usize) -> Volume {
    if sf == 1 {
        return y.clone();
    }
    let [d, h, w] = y.shape();
    let plane = h * w;
    let mut out = Vec::with_capacity(d * sf * plane);
    for z in 0..d {
        for _ in 0..sf {
            out.extend_from_slice(&y.data()[z * plane..(z + 1) * plane]);
        }
    }
    let mut spacing = y.spacing();
    spacing[0] /= sf as f64;
    Volume::new([d * sf, h, w], out)
        .and_then(|v| v.with_meta_of(y).with_spacing(spacing))
        .expect("replicated shape is valid")
}

/// `rho_t = lambda sigma_n^2 / sigma_bar_t^2`.
pub fn rho(s: &NoiseSchedule, t: usize, lambda: f64, sigma_n: f64) -> Result<f64> {
    s.check_timestep(t)?;
    if !(sigma_n > 0.0) || !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("need sigma_n > 0 and lambda > 0, got {sigma_n}, {lambda}")));
    }
    Ok(lambda * sigma_n * sigma_n / s.sigma_bar(t).powi(2))
}

/// `(y + rho x0) / (1 + rho)`.
pub fn proximal_denoise(y: &Volume, x0: &Volume, rho: f64) -> Result<Volume> {
    y.zip_map(x0, |a, b| ((a as f64 + rho * b as f64) / (1.0 + rho)) as f32)
}

/// `x0 + H_up(y - H x0) / (1 + rho)`.
pub fn proximal_sr(y: &Volume, x0: &Volume, rho: f64, ops: &DegradationOps) -> Result<Volume> {
    let hx = ops.h(x0)?;
    let resid = y.zip_map(&hx, |a, b| ((a as f64 - b as f64) / (1.0 + rho)) as f32)?;
    let up = ops.h_up(&resid)?;
    x0.zip_map(&up, |a, b| a + b)
}

/// Starting timestep matched to the observation noise, and the scaled observation.
pub fn init_from_observation(y: &Volume, s: &NoiseSchedule, sigma_n: f64) -> Result<(Volume, usize)> {
    let t = t_start_for_sigma(s, sigma_n)?;
    let a = s.alpha_bar(t).sqrt();
    Ok((y.map(|v| (a * v as f64) as f32), t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreParams {
    /// Number of network evaluations; capped by the available timesteps.
    pub nfe: usize,
    /// Share of fresh noise when re-noising, in `[0, 1]`.
    pub zeta: f64,
}

impl RestoreParams {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 || !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::InvalidArgument(format!("need nfe >= 1 and zeta in [0, 1], got {self:?}")));
        }
        Ok(())
    }
}

/// Restores `y`. For denoising the chain starts from the scaled observation at
/// the matched timestep; for super-resolution it starts from noise at `T` on
/// the high-resolution grid.
pub fn restore<E: NoiseEstimator + ?Sized, R: Rng + ?Sized>(
    est: &E,
    s: &NoiseSchedule,
    y: &Volume,
    ops: &DegradationOps,
    params: RestoreParams,
    rng: &mut R,
) -> Result<Volume> {
    params.validate()?;
    let (mut x, t_start) = match ops.degradation {
        Degradation::Denoise => init_from_observation(y, s, ops.sigma_n)?,
        Degradation::SuperRes { .. } => {
            let template = ops.h_up(y)?;
            (standard_normal_like(&template, rng), s.steps())
        }
    };
    let steps = skip_subsequence(s, params.nfe.min(t_start), t_start)?;
    let mut x0_hat = x.clone();
    for (i, &t) in steps.iter().enumerate() {
        let eps = est.estimate(&x, t)?;
        let x0 = predict_x0(s, &x, t, &eps)?;
        let r = rho(s, t, ops.lambda, ops.sigma_n)?;
        x0_hat = match ops.degradation {
            Degradation::Denoise => proximal_denoise(y, &x0, r)?,
            Degradation::SuperRes { .. } => proximal_sr(y, &x0, r, ops)?,
        };
        let Some(&t_next) = steps.get(i + 1) else { break };
        x = renoise(s, &x, t, &x0_hat, t_next, params.zeta, rng)?;
    }
    Ok(x0_hat)
}

/// Moves the refined estimate to `t_next`, mixing the implied noise of `x_t`
/// with a fresh draw.
fn renoise<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    x_t: &Volume,
    t: usize,
    x0_hat: &Volume,
    t_next: usize,
    zeta: f64,
    rng: &mut R,
) -> Result<Volume> {
    let (ab, ab_next) = (s.alpha_bar(t), s.alpha_bar(t_next));
    let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (a_next, b_next) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
    let (keep, fresh) = ((1.0 - zeta).sqrt(), zeta.sqrt());
    let z = (zeta > 0.0).then(|| standard_normal_like(x_t, rng));
    let mut out = x0_hat.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let x0 = *o as f64;
        let eps_eff = (x_t.data()[i] as f64 - sa * x0) / s1;
        let zi = z.as_ref().map_or(0.0, |z| z.data()[i] as f64);
        *o = (a_next * x0 + b_next * (keep * eps_eff + fresh * zi)) as f32;
    }
    Ok(out)
}

/// Heuristic noise-level estimate from high-pass residuals.
///
/// Subtracts the 3x3x3 local mean and takes a median-absolute-deviation
/// spread, which is insensitive to the few residuals that sit on edges. Only
/// meaningful for roughly piecewise-smooth images with white noise.
pub fn estimate_sigma(v: &Volume) -> Result<f64> {
    let [d, h, w] = v.shape();
    if d < 3 || h < 3 || w < 3 {
        return Err(Error::InvalidSize(format!("need at least 3^3 voxels, got {:?}", v.shape())));
    }
    let mut resid = Vec::with_capacity((d - 2) * (h - 2) * (w - 2));
    for z in 1..d - 1 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut sum = 0.0;
                for zz in z - 1..=z + 1 {
                    for yy in y - 1..=y + 1 {
                        for xx in x - 1..=x + 1 {
                            sum += v.get(zz, yy, xx) as f64;
                        }
                    }
                }
                resid.push(v.get(z, y, x) as f64 - sum / 27.0);
            }
        }
    }
    let mut abs: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
    abs.sort_by(|a, b| a.total_cmp(b));
    let mad = abs[abs.len() / 2];
    // White noise leaves residual variance sigma^2 * 26/27.
    Ok(1.4826 * mad / (26.0f64 / 27.0).sqrt())
}
