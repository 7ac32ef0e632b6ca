//! Closed-form reference denoisers.

use super::Denoiser;
use crate::condition::ConditionBundle;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::voxgrid::Volume;

/// Exact posterior-mean noise predictor for data `x_0 ~ N(mu0, var0 I)`.
///
/// Given `x_t = sqrt(ab) x_0 + sqrt(1 - ab) eps`, the conditional mean of
/// `eps` is `sqrt(1 - ab) (x_t - sqrt(ab) mu0) / (ab var0 + 1 - ab)`.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianDenoiser {
    pub mu0: f64,
    pub var0: f64,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mu0: f64, var0: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(var0 > 0.0) || !mu0.is_finite() {
            return Err(Error::InvalidArgument(format!("need finite mu0 and var0 > 0, got {mu0}, {var0}")));
        }
        Ok(AnalyticGaussianDenoiser { mu0, var0, schedule })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    #[inline]
    pub fn eps(&self, x: f64, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        (1.0 - ab).sqrt() * (x - ab.sqrt() * self.mu0) / (ab * self.var0 + 1.0 - ab)
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn predict_noise(&self, x_t: &Volume, t: usize, _cond: &ConditionBundle) -> Result<Volume> {
        self.schedule.check_timestep(t)?;
        Ok(x_t.map(|v| self.eps(v as f64, t) as f32))
    }
}

/// Spatially coupled reference denoiser: shrinks a local box mean of the
/// rescaled input towards `mu0`. Its estimates depend on the patch borders,
/// which makes it useful for exercising window fusion.
#[derive(Clone, Debug)]
pub struct BoxShrinkDenoiser {
    pub mu0: f64,
    pub var0: f64,
    pub radius: usize,
    schedule: NoiseSchedule,
}

impl BoxShrinkDenoiser {
    pub fn new(mu0: f64, var0: f64, radius: usize, schedule: NoiseSchedule) -> Result<Self> {
        if !(var0 > 0.0) {
            return Err(Error::InvalidArgument(format!("var0 must be positive, got {var0}")));
        }
        Ok(BoxShrinkDenoiser { mu0, var0, radius, schedule })
    }
}

/// Mean over the `(2r+1)^3` box clipped to the volume.
pub(crate) fn box_mean(v: &Volume, r: usize) -> Vec<f64> {
    let [d, h, w] = v.shape();
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d {
        let zr = z.saturating_sub(r)..(z + r + 1).min(d);
        for y in 0..h {
            let yr = y.saturating_sub(r)..(y + r + 1).min(h);
            for x in 0..w {
                let xr = x.saturating_sub(r)..(x + r + 1).min(w);
                let mut sum = 0.0;
                for zz in zr.clone() {
                    for yy in yr.clone() {
                        for xx in xr.clone() {
                            sum += v.get(zz, yy, xx) as f64;
                        }
                    }
                }
                out.push(sum / (zr.len() * yr.len() * xr.len()) as f64);
            }
        }
    }
    out
}

impl Denoiser for BoxShrinkDenoiser {
    fn predict_noise(&self, x_t: &Volume, t: usize, _cond: &ConditionBundle) -> Result<Volume> {
        self.schedule.check_timestep(t)?;
        let ab = self.schedule.alpha_bar(t);
        let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        let gain = ab * self.var0 / (ab * self.var0 + 1.0 - ab);
        let local = box_mean(x_t, self.radius);
        let data = x_t
            .data()
            .iter()
            .zip(local)
            .map(|(&x, m)| {
                let x0 = self.mu0 + gain * (m / sa - self.mu0);
                ((x as f64 - sa * x0) / s1) as f32
            })
            .collect();
        x_t.with_data(data)
    }
}
