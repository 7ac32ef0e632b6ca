//! Image-quality and detection metrics for volumes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxgrid::{Shape3, Volume};

/// SSIM window edge length.
pub const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    /// Non-finite values (identical inputs for PSNR) serialize as `null`.
    pub value: f64,
    pub case_id: String,
    pub params: serde_json::Value,
}

fn check_range(data_range: f64) -> Result<()> {
    if data_range > 0.0 && data_range.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("data range must be positive, got {data_range}")))
    }
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable Gaussian filter.
fn filter_valid(x: &[f64], dims: Shape3) -> (Vec<f64>, Shape3) {
    let g = gaussian_taps();
    let k = SSIM_WINDOW;
    let [d, h, w] = dims;
    let w2 = w + 1 - k;
    let mut bx = vec![0.0; d * h * w2];
    for r in 0..d * h {
        let row = &x[r * w..(r + 1) * w];
        for xo in 0..w2 {
            bx[r * w2 + xo] = (0..k).map(|i| g[i] * row[xo + i]).sum();
        }
    }
    let h2 = h + 1 - k;
    let mut by = vec![0.0; d * h2 * w2];
    for z in 0..d {
        for yo in 0..h2 {
            for xo in 0..w2 {
                by[(z * h2 + yo) * w2 + xo] = (0..k).map(|i| g[i] * bx[(z * h + yo + i) * w2 + xo]).sum();
            }
        }
    }
    let d2 = d + 1 - k;
    let mut bz = vec![0.0; d2 * h2 * w2];
    for zo in 0..d2 {
        for yo in 0..h2 {
            for xo in 0..w2 {
                bz[(zo * h2 + yo) * w2 + xo] = (0..k).map(|i| g[i] * by[((zo + i) * h2 + yo) * w2 + xo]).sum();
            }
        }
    }
    (bz, [d2, h2, w2])
}

/// Mean SSIM and mean contrast-structure term.
pub fn ssim_components(a: &Volume, b: &Volume, data_range: f64) -> Result<(f64, f64)> {
    check_range(data_range)?;
    a.check_same_shape(b)?;
    let dims = a.shape();
    if dims.iter().any(|&n| n < SSIM_WINDOW) {
        return Err(Error::InvalidSize(format!("SSIM needs at least {SSIM_WINDOW}^3 voxels, got {dims:?}")));
    }
    let xa: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let xb: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = xa.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = xb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = xa.iter().zip(&xb).map(|(u, v)| u * v).collect();
    let (mu_a, _) = filter_valid(&xa, dims);
    let (mu_b, _) = filter_valid(&xb, dims);
    let (e_aa, _) = filter_valid(&aa, dims);
    let (e_bb, _) = filter_valid(&bb, dims);
    let (e_ab, _) = filter_valid(&ab, dims);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        cs_sum += cs;
        s_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs;
    }
    let n = mu_a.len() as f64;
    Ok((s_sum / n, cs_sum / n))
}

/// Mean local SSIM over Gaussian-weighted 7^3 windows (sigma 1.5).
pub fn ssim3d(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    ssim_components(a, b, data_range).map(|(s, _)| s)
}

/// 2x2x2 average pooling; odd trailing slices are dropped.
pub fn downsample2(v: &Volume) -> Result<Volume> {
    let [d, h, w] = v.shape();
    let (d2, h2, w2) = (d / 2, h / 2, w / 2);
    if d2 == 0 || h2 == 0 || w2 == 0 {
        return Err(Error::InvalidSize(format!("cannot halve {:?}", v.shape())));
    }
    let mut out = Vec::with_capacity(d2 * h2 * w2);
    for z in 0..d2 {
        for y in 0..h2 {
            for x in 0..w2 {
                let mut s = 0.0f64;
                for (dz, dy, dx) in (0..8).map(|k| (k >> 2, (k >> 1) & 1, k & 1)) {
                    s += v.get(2 * z + dz, 2 * y + dy, 2 * x + dx) as f64;
                }
                out.push((s / 8.0) as f32);
            }
        }
    }
    Volume::new([d2, h2, w2], out)
}

/// Number of scales usable for a shape: halving continues while every axis
/// still holds an SSIM window.
pub fn ms_ssim_scales(shape: Shape3, max_scales: usize) -> usize {
    let mut s = shape;
    let mut n = 0;
    while n < max_scales && s.iter().all(|&e| e >= SSIM_WINDOW) {
        n += 1;
        s = [s[0] / 2, s[1] / 2, s[2] / 2];
    }
    n
}

pub fn ms_ssim3d(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    ms_ssim3d_weighted(a, b, data_range, &MS_SSIM_WEIGHTS)
}

/// Multi-scale SSIM. When the extent allows fewer scales than weights, the
/// leading weights are kept and renormalized. Per-scale terms are clamped at
/// zero before exponentiation; a single scale returns plain SSIM.
pub fn ms_ssim3d_weighted(a: &Volume, b: &Volume, data_range: f64, weights: &[f64]) -> Result<f64> {
    a.check_same_shape(b)?;
    let m = ms_ssim_scales(a.shape(), weights.len());
    if m == 0 {
        return Err(Error::InvalidSize(format!("MS-SSIM needs at least {SSIM_WINDOW}^3 voxels, got {:?}", a.shape())));
    }
    if m == 1 {
        return ssim3d(a, b, data_range);
    }
    let total: f64 = weights[..m].iter().sum();
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut out = 1.0;
    for (j, &w) in weights[..m].iter().enumerate() {
        let (s, cs) = ssim_components(&x, &y, data_range)?;
        let term = if j + 1 == m { s } else { cs };
        out *= term.max(0.0).powf(w / total);
        if j + 1 < m {
            x = downsample2(&x)?;
            y = downsample2(&y)?;
        }
    }
    Ok(out)
}

fn check_mask(v: &Volume) -> Result<()> {
    match v.data().iter().find(|&&x| x != 0.0 && x != 1.0) {
        Some(x) => Err(Error::InvalidMask(format!("mask value {x} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// `2|A n B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64> {
    a.check_same_shape(b)?;
    check_mask(a)?;
    check_mask(b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += (x == 1.0) as usize;
        nb += (y == 1.0) as usize;
        inter += (x == 1.0 && y == 1.0) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Rescales to `[0, 1]` by the volume's own min and max; constant volumes map to 0.
pub fn normalize_unit(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    if hi <= lo {
        return v.map(|_| 0.0);
    }
    let span = (hi - lo) as f64;
    v.map(|x| ((x - lo) as f64 / span) as f32)
}

/// Area under the ROC curve via the rank-sum statistic; tied pairs count 1/2.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both positive and negative labels".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// 6-connected components of a binary mask. Labels start at 1; 0 is background.
pub fn connected_components(mask: &Volume) -> Result<(Vec<u32>, usize)> {
    check_mask(mask)?;
    let [d, h, w] = mask.shape();
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask.data()[start] != 1.0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if mask.data()[j] == 1.0 && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    Ok((labels, next as usize))
}

/// Trapezoid area under `(fpr, value)` points up to `limit`, divided by `limit`.
/// Points must be sorted by non-decreasing fpr.
pub fn normalized_area(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((f0, p0), (f1, p1)) = (w[0], w[1]);
        if f0 >= limit {
            break;
        }
        if f1 <= limit {
            area += (f1 - f0) * (p0 + p1) / 2.0;
        } else {
            let p_lim = p0 + (p1 - p0) * (limit - f0) / (f1 - f0);
            area += (limit - f0) * (p0 + p_lim) / 2.0;
            break;
        }
    }
    area / limit
}

/// Per-region overlap integrated over false-positive rates in `[0, fpr_limit]`.
///
/// Every distinct score is used as a threshold (`score >= threshold` counts as
/// detected); the overlap is averaged over all connected ground-truth regions
/// of all volumes.
pub fn pro(abs_maps: &[Volume], gt_masks: &[Volume], fpr_limit: f64) -> Result<f64> {
    if abs_maps.len() != gt_masks.len() || abs_maps.is_empty() {
        return Err(Error::ShapeMismatch("need equally many maps and masks".into()));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidArgument(format!("FPR limit must lie in (0, 1], got {fpr_limit}")));
    }
    // Entry kind: u32::MAX marks a negative voxel, otherwise a region id.
    let mut entries: Vec<(f32, u32)> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for (map, gt) in abs_maps.iter().zip(gt_masks) {
        map.check_same_shape(gt)?;
        let (labels, n) = connected_components(gt)?;
        let base = sizes.len() as u32;
        sizes.resize(sizes.len() + n, 0);
        for (&score, &l) in map.data().iter().zip(&labels) {
            if l == 0 {
                entries.push((score, u32::MAX));
            } else {
                let id = base + l - 1;
                sizes[id as usize] += 1;
                entries.push((score, id));
            }
        }
    }
    if sizes.is_empty() {
        return Err(Error::UndefinedMetric("PRO needs at least one ground-truth region".into()));
    }
    let total_neg = entries.iter().filter(|e| e.1 == u32::MAX).count();
    if total_neg == 0 {
        return Err(Error::UndefinedMetric("PRO needs negative voxels".into()));
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_regions = sizes.len() as f64;
    let mut hits = vec![0usize; sizes.len()];
    let (mut neg, mut overlap_sum) = (0usize, 0.0f64);
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < entries.len() {
        let thr = entries[i].0;
        while i < entries.len() && entries[i].0 == thr {
            match entries[i].1 {
                u32::MAX => neg += 1,
                id => {
                    hits[id as usize] += 1;
                    overlap_sum += 1.0 / sizes[id as usize] as f64;
                }
            }
            i += 1;
        }
        let fpr = neg as f64 / total_neg as f64;
        points.push((fpr, overlap_sum / n_regions));
        if fpr >= fpr_limit {
            break;
        }
    }
    Ok(normalized_area(&points, fpr_limit))
}
