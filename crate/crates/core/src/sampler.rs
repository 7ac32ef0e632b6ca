//! Forward noising, x0 prediction, and reverse-chain sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::NoiseEstimator;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::voxgrid::Volume;

fn check_t(s: &NoiseSchedule, t: usize) -> Result<()> {
    if t > s.steps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside [0, {}]", s.steps())));
    }
    Ok(())
}

/// Standard-normal volume with the shape and metadata of `like`.
pub fn standard_normal_like<R: Rng + ?Sized>(like: &Volume, rng: &mut R) -> Volume {
    let data = (0..like.len()).map(|_| StandardNormal.sample(rng)).collect();
    like.with_data(data).expect("length matches")
}

/// `x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps`; `t = 0` returns `x_0`.
pub fn q_sample(s: &NoiseSchedule, x0: &Volume, t: usize, eps: &Volume) -> Result<Volume> {
    check_t(s, t)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
}

pub fn predict_x0(s: &NoiseSchedule, x_t: &Volume, t: usize, eps_hat: &Volume) -> Result<Volume> {
    s.check_timestep(t)?;
    let ab = s.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::DegenerateStep(t));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| ((x as f64 - b * e as f64) / a) as f32)
}

/// Posterior mean of `x_{t-1}` given the noise estimate.
pub fn ancestral_mean(s: &NoiseSchedule, x_t: &Volume, t: usize, eps_hat: &Volume) -> Result<Volume> {
    s.check_timestep(t)?;
    let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let scale = 1.0 / s.alpha(t).sqrt();
    x_t.zip_map(eps_hat, |x, e| (scale * (x as f64 - coef * e as f64)) as f32)
}

/// One reverse step `t -> t-1` with variance `beta_tilde_t`; `z` is ignored at `t = 1`.
pub fn ancestral_step(s: &NoiseSchedule, x_t: &Volume, t: usize, eps_hat: &Volume, z: &Volume) -> Result<Volume> {
    let mean = ancestral_mean(s, x_t, t, eps_hat)?;
    if t == 1 {
        return Ok(mean);
    }
    let sd = s.posterior_variance(t).sqrt();
    mean.zip_map(z, |m, n| (m as f64 + sd * n as f64) as f32)
}

/// Reverse step `t -> t_prev` over a skip, with coefficients taken from the
/// two endpoints and full ancestral noise. Reduces to the posterior variance
/// when `t_prev = t - 1`; `t_prev = 0` returns the x0 estimate.
pub fn skip_step(
    s: &NoiseSchedule,
    x_t: &Volume,
    t: usize,
    t_prev: usize,
    eps_hat: &Volume,
    z: &Volume,
) -> Result<Volume> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("skip must decrease: {t} -> {t_prev}")));
    }
    let x0 = predict_x0(s, x_t, t, eps_hat)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t_prev));
    let var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
    let dir = (1.0 - ab_prev - var).max(0.0).sqrt();
    let (a, sd) = (ab_prev.sqrt(), var.sqrt());
    let mut out = x0;
    for ((o, &e), &n) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(z.data()) {
        *o = (a * *o as f64 + dir * e as f64 + sd * n as f64) as f32;
    }
    Ok(out)
}

/// Checks that `steps` is strictly decreasing, within `[1, T]`, and ends at 1.
pub fn validate_steps(s: &NoiseSchedule, steps: &[usize]) -> Result<()> {
    let ok = !steps.is_empty()
        && steps.windows(2).all(|w| w[0] > w[1])
        && steps.last() == Some(&1)
        && steps[0] <= s.steps();
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument("steps must be strictly decreasing within [1, T] and end at 1".into()))
    }
}

/// Runs the reverse chain from `x_start` at `steps[0]` down to a clean sample.
///
/// Consecutive timesteps use [`ancestral_step`]; gaps use [`skip_step`]. One
/// noise volume is drawn per transition out of `t > 1`.
pub fn reverse_chain<E: NoiseEstimator + ?Sized, R: Rng + ?Sized>(
    est: &E,
    s: &NoiseSchedule,
    x_start: Volume,
    steps: &[usize],
    rng: &mut R,
) -> Result<Volume> {
    validate_steps(s, steps)?;
    let mut x = x_start;
    for (i, &t) in steps.iter().enumerate() {
        let eps = est.estimate(&x, t)?;
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        x = if t == 1 {
            ancestral_mean(s, &x, t, &eps)?
        } else {
            let z = standard_normal_like(&x, rng);
            if t_prev + 1 == t {
                ancestral_step(s, &x, t, &eps, &z)?
            } else {
                skip_step(s, &x, t, t_prev, &eps, &z)?
            }
        };
    }
    Ok(x)
}

/// Samples a volume shaped like `template` (only its shape and metadata are used).
/// Without `steps` the full chain `T, T-1, ..., 1` runs.
pub fn generate<E: NoiseEstimator + ?Sized, R: Rng + ?Sized>(
    est: &E,
    s: &NoiseSchedule,
    template: &Volume,
    steps: Option<&[usize]>,
    rng: &mut R,
) -> Result<Volume> {
    let full: Vec<usize>;
    let steps = match steps {
        Some(st) => st,
        None => {
            full = (1..=s.steps()).rev().collect();
            &full
        }
    };
    validate_steps(s, steps)?;
    let x_start = standard_normal_like(template, rng);
    reverse_chain(est, s, x_start, steps, rng)
}

/// Clamps the implied x0 prediction to `[lo, hi]` and re-expresses the
/// result as a noise estimate, so every sampler built on [`predict_x0`]
/// sees a clean estimate inside the data range.
///
/// Near `t = T` the x0 prediction divides by `sqrt(ab_t)`; without a clamp a
/// small noise error from an imperfect network blows up by orders of
/// magnitude in the first skip step.
pub struct ClampedX0<'a, E: ?Sized> {
    pub inner: &'a E,
    pub schedule: &'a NoiseSchedule,
    pub lo: f32,
    pub hi: f32,
}

impl<'a, E: NoiseEstimator + ?Sized> ClampedX0<'a, E> {
    pub fn new(inner: &'a E, schedule: &'a NoiseSchedule, lo: f32, hi: f32) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("clamp range [{lo}, {hi}] is empty")));
        }
        Ok(ClampedX0 { inner, schedule, lo, hi })
    }
}

impl<E: NoiseEstimator + ?Sized> NoiseEstimator for ClampedX0<'_, E> {
    fn estimate(&self, x_t: &Volume, t: usize) -> Result<Volume> {
        let eps = self.inner.estimate(x_t, t)?;
        let x0 = predict_x0(self.schedule, x_t, t, &eps)?;
        let ab = self.schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        if b <= 0.0 {
            return Err(Error::DegenerateStep(t));
        }
        let (lo, hi) = (self.lo, self.hi);
        x_t.zip_map(&x0, |x, p| ((x as f64 - a * p.clamp(lo, hi) as f64) / b) as f32)
    }
}
