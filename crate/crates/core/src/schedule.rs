//! Noise-schedule tables and timestep arithmetic.
//!
//! Timesteps are 1-based; index 0 holds the noise-free convention
//! `alpha_bar[0] = 1`, `sigma_bar[0] = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const BETA_MIN: f64 = 1e-8;
const BETA_MAX: f64 = 0.999;

/// Serializable description of a schedule; enough to rebuild the tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleParams {
    Cosine { steps: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        match p {
            ScheduleParams::Cosine { steps } => cosine_schedule(steps),
        }
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams::Cosine { steps: self.steps }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma_bar(&self, t: usize) -> f64 {
        self.sigma_bar[t]
    }

    /// Posterior variance of `x_{t-1}` given `x_t` and `x_0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Cosine schedule with offset 0.008 and betas clipped to `[1e-8, 0.999]`.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    let f = |t: usize| {
        let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    let mut beta = vec![0.0; steps + 1];
    let mut alpha = vec![1.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    let mut sigma_bar = vec![0.0; steps + 1];
    let mut prev_formula = 1.0;
    for t in 1..=steps {
        let formula = f(t) / f0;
        let b = (1.0 - formula / prev_formula).clamp(BETA_MIN, BETA_MAX);
        prev_formula = formula;
        beta[t] = b;
        alpha[t] = 1.0 - b;
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        sigma_bar[t] = ((1.0 - alpha_bar[t]) / alpha_bar[t]).sqrt();
    }
    Ok(NoiseSchedule { steps, beta, alpha, alpha_bar, sigma_bar })
}

/// Smallest `t` with `sigma_bar[t] >= sigma_n`, clamped to `T`.
pub fn t_start_for_sigma(s: &NoiseSchedule, sigma_n: f64) -> Result<usize> {
    if !(sigma_n > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_n must be positive, got {sigma_n}")));
    }
    let idx = s.sigma_bar[1..].partition_point(|&sb| sb < sigma_n);
    Ok((idx + 1).min(s.steps))
}

/// `nfe` uniformly spaced, strictly decreasing timesteps from `t_start` to 1.
pub fn skip_subsequence(s: &NoiseSchedule, nfe: usize, t_start: usize) -> Result<Vec<usize>> {
    s.check_timestep(t_start)?;
    if nfe == 0 || nfe > t_start {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= nfe <= t_start, got nfe = {nfe}, t_start = {t_start}"
        )));
    }
    if nfe == 1 {
        return Ok(vec![t_start]);
    }
    let span = t_start - 1;
    let gaps = nfe - 1;
    // Rounded i * span / gaps in integer arithmetic.
    Ok((0..nfe).map(|i| t_start - (2 * i * span + gaps) / (2 * gaps)).collect())
}
