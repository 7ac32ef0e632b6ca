//! Sliding-window processing of volumes larger than the network patch.
//!
//! Noise is predicted on overlapping windows, each with its own global
//! position encoding, and averaged per voxel. The reverse-chain update then
//! runs once on the whole volume, so every window sees the same noise draw.

use rand::Rng;
use rayon::prelude::*;

use crate::condition::{ConditionBundle, ConditionSource};
use crate::denoiser::{Denoiser, NoiseEstimator};
use crate::error::{Error, Result};
use crate::inverse::{restore, DegradationOps, RestoreParams};
use crate::sampler::generate;
use crate::schedule::NoiseSchedule;
use crate::voxgrid::{crop, voxel_count, Shape3, Volume};

/// Window origins covering a volume, plus per-voxel coverage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub volume_shape: Shape3,
    pub window: Shape3,
    pub stride: Shape3,
    pub origins: Vec<Shape3>,
    pub coverage: Vec<u32>,
}

/// Origins `0, stride, 2 stride, ...` plus a final one flush with the end.
pub fn axis_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

pub fn plan_windows(volume_shape: Shape3, window: Shape3, stride: Shape3) -> Result<WindowPlan> {
    for a in 0..3 {
        if window[a] == 0 || window[a] > volume_shape[a] {
            return Err(Error::InvalidPlan(format!("window {window:?} does not fit volume {volume_shape:?}")));
        }
        if stride[a] == 0 || stride[a] > window[a] {
            return Err(Error::InvalidPlan(format!("stride {stride:?} must lie in [1, window {window:?}]")));
        }
    }
    let axes: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(volume_shape[a], window[a], stride[a])).collect();
    let mut origins = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                origins.push([z, y, x]);
            }
        }
    }
    let [_, h, w] = volume_shape;
    let mut coverage = vec![0u32; voxel_count(volume_shape)];
    for o in &origins {
        for z in o[0]..o[0] + window[0] {
            for y in o[1]..o[1] + window[1] {
                let row = (z * h + y) * w;
                coverage[row + o[2]..row + o[2] + window[2]].iter_mut().for_each(|c| *c += 1);
            }
        }
    }
    Ok(WindowPlan { volume_shape, window, stride, origins, coverage })
}

impl WindowPlan {
    /// One window spanning the whole volume.
    pub fn whole(volume_shape: Shape3) -> Result<WindowPlan> {
        plan_windows(volume_shape, volume_shape, volume_shape)
    }

    /// Interior window-edge positions per axis: index `p` marks the face
    /// between voxels `p - 1` and `p`.
    pub fn boundaries(&self) -> [Vec<usize>; 3] {
        let mut out: [Vec<usize>; 3] = Default::default();
        for (a, b) in out.iter_mut().enumerate() {
            let mut v: Vec<usize> = self
                .origins
                .iter()
                .flat_map(|o| [o[a], o[a] + self.window[a]])
                .filter(|&p| p > 0 && p < self.volume_shape[a])
                .collect();
            v.sort_unstable();
            v.dedup();
            *b = v;
        }
        out
    }

    /// Per-window conditions cut from a whole-volume source.
    pub fn conditions(&self, source: &ConditionSource) -> Result<Vec<ConditionBundle>> {
        if source.volume_shape() != self.volume_shape {
            return Err(Error::ShapeMismatch(format!(
                "conditions {:?} vs plan {:?}",
                source.volume_shape(),
                self.volume_shape
            )));
        }
        self.origins.iter().map(|&o| source.window(o, self.window)).collect()
    }
}

/// Mean of per-window noise predictions. Windows are evaluated in parallel
/// and summed in plan order, so the result does not depend on scheduling.
pub fn fused_noise_estimate<D: Denoiser + ?Sized>(
    d: &D,
    x_t: &Volume,
    t: usize,
    plan: &WindowPlan,
    conds: &[ConditionBundle],
) -> Result<Volume> {
    if x_t.shape() != plan.volume_shape || conds.len() != plan.origins.len() {
        return Err(Error::InvalidPlan("plan, state and conditions disagree".into()));
    }
    let patches: Vec<Volume> = plan
        .origins
        .par_iter()
        .zip(conds)
        .map(|(&o, c)| {
            let patch = if plan.window == plan.volume_shape { x_t.clone() } else { crop(x_t, o, plan.window)? };
            d.predict_noise(&patch, t, c)
        })
        .collect::<Result<_>>()?;
    // -0.0 is the additive identity for every float, so a single window
    // reproduces its prediction bit for bit.
    let mut sum = vec![-0.0f32; x_t.len()];
    let [_, h, w] = plan.volume_shape;
    let [pd, ph, pw] = plan.window;
    for (o, p) in plan.origins.iter().zip(&patches) {
        for z in 0..pd {
            for y in 0..ph {
                let dst = ((o[0] + z) * h + o[1] + y) * w + o[2];
                let src = (z * ph + y) * pw;
                for (s, &v) in sum[dst..dst + pw].iter_mut().zip(&p.data()[src..src + pw]) {
                    *s += v;
                }
            }
        }
    }
    for (s, &c) in sum.iter_mut().zip(&plan.coverage) {
        *s /= c as f32;
    }
    x_t.with_data(sum)
}

/// Window-fused noise estimator with one condition bundle per window.
pub struct Tiled<'a, D: ?Sized> {
    pub denoiser: &'a D,
    pub plan: &'a WindowPlan,
    pub conds: Vec<ConditionBundle>,
}

impl<'a, D: Denoiser + ?Sized> Tiled<'a, D> {
    pub fn new(denoiser: &'a D, plan: &'a WindowPlan, source: &ConditionSource) -> Result<Self> {
        Ok(Tiled { denoiser, plan, conds: plan.conditions(source)? })
    }
}

impl<D: Denoiser + ?Sized> NoiseEstimator for Tiled<'_, D> {
    fn estimate(&self, x_t: &Volume, t: usize) -> Result<Volume> {
        fused_noise_estimate(self.denoiser, x_t, t, self.plan, &self.conds)
    }
}

/// Samples a whole volume with fused window estimates.
pub fn tiled_generate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    d: &D,
    source: &ConditionSource,
    template: &Volume,
    s: &NoiseSchedule,
    plan: &WindowPlan,
    steps: Option<&[usize]>,
    rng: &mut R,
) -> Result<Volume> {
    if template.shape() != plan.volume_shape {
        return Err(Error::ShapeMismatch(format!("template {:?} vs plan {:?}", template.shape(), plan.volume_shape)));
    }
    generate(&Tiled::new(d, plan, source)?, s, template, steps, rng)
}

/// Restores a whole volume with fused window estimates. For super-resolution
/// the plan and conditions live on the high-resolution grid.
#[allow(clippy::too_many_arguments)]
pub fn tiled_restore<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    d: &D,
    source: &ConditionSource,
    y: &Volume,
    ops: &DegradationOps,
    s: &NoiseSchedule,
    params: RestoreParams,
    plan: &WindowPlan,
    rng: &mut R,
) -> Result<Volume> {
    restore(&Tiled::new(d, plan, source)?, s, y, ops, params, rng)
}

/// Baseline without fusion: every window is sampled independently and pasted
/// in plan order.
pub fn naive_stitch_generate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    d: &D,
    source: &ConditionSource,
    template: &Volume,
    s: &NoiseSchedule,
    plan: &WindowPlan,
    rng: &mut R,
) -> Result<Volume> {
    let conds = plan.conditions(source)?;
    let patch_tpl = crop(template, [0; 3], plan.window)?;
    let mut out = template.clone();
    for (o, c) in plan.origins.iter().zip(&conds) {
        let est = crate::denoiser::Conditioned::new(d, c);
        let patch = generate(&est, s, &patch_tpl, None, rng)?;
        out.paste(&patch, *o)?;
    }
    Ok(out)
}

/// Mean absolute finite difference across window-edge faces divided by the
/// mean over all other faces, pooled over the three axes.
pub fn seam_ratio(v: &Volume, boundaries: &[Vec<usize>; 3]) -> Result<f64> {
    let [d, h, w] = v.shape();
    let (mut seam, mut n_seam, mut inner, mut n_inner) = (0.0f64, 0usize, 0.0f64, 0usize);
    let mut is_edge: [Vec<bool>; 3] = [vec![false; d + 1], vec![false; h + 1], vec![false; w + 1]];
    for a in 0..3 {
        for &p in &boundaries[a] {
            if p < is_edge[a].len() {
                is_edge[a][p] = true;
            }
        }
    }
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let c = v.get(z, y, x) as f64;
                let idx = [z, y, x];
                for a in 0..3 {
                    if idx[a] == 0 {
                        continue;
                    }
                    let mut p = idx;
                    p[a] -= 1;
                    let g = (c - v.get(p[0], p[1], p[2]) as f64).abs();
                    if is_edge[a][idx[a]] {
                        seam += g;
                        n_seam += 1;
                    } else {
                        inner += g;
                        n_inner += 1;
                    }
                }
            }
        }
    }
    if n_seam == 0 || n_inner == 0 || inner == 0.0 {
        return Err(Error::UndefinedMetric("seam ratio needs both seam and interior faces".into()));
    }
    Ok((seam / n_seam as f64) / (inner / n_inner as f64))
}
