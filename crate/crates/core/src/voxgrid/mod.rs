//! Dense volumes, HU windowing, resampling, cropping and multi-level patch
//! sampling.
//!
//! Storage is row-major with `x` fastest: voxel `(z, y, x)` lives at
//! `(z * H + y) * W + x`.

mod io;

pub use io::{read_vvol, vvol_from_bytes, vvol_to_bytes, write_vvol, VVOL_MAGIC};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts `(D, H, W)`.
pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// Anatomical region of a scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionClass {
    HaN,
    Chest,
    Abdomen,
}

impl RegionClass {
    pub const ALL: [RegionClass; 3] = [RegionClass::HaN, RegionClass::Chest, RegionClass::Abdomen];

    pub fn index(self) -> usize {
        match self {
            RegionClass::HaN => 0,
            RegionClass::Chest => 1,
            RegionClass::Abdomen => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegionClass::HaN => "HaN",
            RegionClass::Chest => "Chest",
            RegionClass::Abdomen => "Abdomen",
        }
    }
}

impl fmt::Display for RegionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HaN" | "han" => Ok(RegionClass::HaN),
            "Chest" | "chest" => Ok(RegionClass::Chest),
            "Abdomen" | "abdomen" => Ok(RegionClass::Abdomen),
            other => Err(Error::InvalidArgument(format!("unknown region {other:?}"))),
        }
    }
}

/// CT display window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub level: f64,
    pub width: f64,
}

impl WindowSpec {
    pub const HAN: WindowSpec = WindowSpec { level: 50.0, width: 400.0 };
    pub const CHEST: WindowSpec = WindowSpec { level: -500.0, width: 1800.0 };
    pub const ABDOMEN: WindowSpec = WindowSpec { level: 60.0, width: 360.0 };

    pub fn new(level: f64, width: f64) -> Result<Self> {
        let w = WindowSpec { level, width };
        w.validate()?;
        Ok(w)
    }

    pub fn for_region(region: RegionClass) -> Self {
        match region {
            RegionClass::HaN => Self::HAN,
            RegionClass::Chest => Self::CHEST,
            RegionClass::Abdomen => Self::ABDOMEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width > 0.0 && self.width.is_finite() && self.level.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidWindow(self.width))
        }
    }

    fn lower(&self) -> f64 {
        self.level - self.width / 2.0
    }
}

/// A dense 3D scalar grid with acquisition metadata.
///
/// Volumes are treated as values: every operation returns a new volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing: [f64; 3],
    data: Vec<f32>,
    window: WindowSpec,
    region: RegionClass,
}

impl Volume {
    /// Volume with unit spacing, the HaN window and HaN region.
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Volume {
            shape,
            spacing: [1.0; 3],
            data,
            window: WindowSpec::HAN,
            region: RegionClass::HaN,
        })
    }

    pub fn filled(shape: Shape3, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; voxel_count(shape)])
    }

    pub fn zeros(shape: Shape3) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn with_window(mut self, window: WindowSpec) -> Result<Self> {
        window.validate()?;
        self.window = window;
        Ok(self)
    }

    pub fn with_region(mut self, region: RegionClass) -> Self {
        self.region = region;
        self
    }

    /// Copies spacing, window and region from `other`.
    pub fn with_meta_of(mut self, other: &Volume) -> Self {
        self.spacing = other.spacing;
        self.window = other.window;
        self.region = other.region;
        self
    }

    /// Same metadata, new voxel values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Ok(Volume::new(self.shape, data)?.with_meta_of(self))
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    pub fn region(&self) -> RegionClass {
        self.region
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        self.same_meta(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination; metadata is taken from `self`.
    pub fn zip_map(&self, other: &Volume, f: impl Fn(f32, f32) -> f32) -> Result<Volume> {
        self.check_same_shape(other)?;
        Ok(self.same_meta(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    fn same_meta(&self, data: Vec<f32>) -> Volume {
        debug_assert_eq!(data.len(), self.data.len());
        Volume { shape: self.shape, spacing: self.spacing, data, window: self.window, region: self.region }
    }

    pub fn check_same_shape(&self, other: &Volume) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Writes `patch` into this volume at `origin`.
    pub fn paste(&mut self, patch: &Volume, origin: Shape3) -> Result<()> {
        check_box(self.shape, origin, patch.shape)?;
        let [pd, ph, pw] = patch.shape;
        for z in 0..pd {
            for y in 0..ph {
                let dst = self.index(origin[0] + z, origin[1] + y, origin[2]);
                let src = patch.index(z, y, 0);
                self.data[dst..dst + pw].copy_from_slice(&patch.data[src..src + pw]);
            }
        }
        Ok(())
    }
}

fn check_box(shape: Shape3, origin: Shape3, size: Shape3) -> Result<()> {
    if size.iter().any(|&n| n == 0) {
        return Err(Error::InvalidShape(format!("zero extent in crop size {size:?}")));
    }
    for a in 0..3 {
        if origin[a] + size[a] > shape[a] {
            return Err(Error::Bounds(format!(
                "box origin {origin:?} size {size:?} exceeds volume {shape:?}"
            )));
        }
    }
    Ok(())
}

/// Maps HU to `[-1, 1]` through the window, saturating at its edges.
pub fn hu_normalize(v: &Volume, w: WindowSpec) -> Result<Volume> {
    w.validate()?;
    let lower = w.lower();
    let out = v.map(|hu| {
        let u = ((hu as f64 - lower) / w.width).clamp(0.0, 1.0);
        (u * 2.0 - 1.0) as f32
    });
    Ok(Volume { window: w, ..out })
}

/// Inverse of [`hu_normalize`] on the unsaturated range.
pub fn hu_denormalize(v: &Volume, w: WindowSpec) -> Result<Volume> {
    w.validate()?;
    let lower = w.lower();
    let out = v.map(|n| ((n as f64 + 1.0) / 2.0 * w.width + lower) as f32);
    Ok(Volume { window: w, ..out })
}

/// Linear resampling along one axis with half-voxel-aligned corners.
fn resize_axis(src: &[f32], shape: Shape3, axis: usize, n_out: usize) -> Vec<f32> {
    let n_in = shape[axis];
    let mut out_shape = shape;
    out_shape[axis] = n_out;
    let scale = n_in as f64 / n_out as f64;
    let taps: Vec<(usize, usize, f64)> = (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut out = Vec::with_capacity(voxel_count(out_shape));
    for z in 0..out_shape[0] {
        for y in 0..out_shape[1] {
            for x in 0..out_shape[2] {
                let mut pos = [z, y, x];
                let (lo, hi, f) = taps[pos[axis]];
                pos[axis] = lo;
                let a = src[pos[0] * strides[0] + pos[1] * strides[1] + pos[2]] as f64;
                pos[axis] = hi;
                let b = src[pos[0] * strides[0] + pos[1] * strides[1] + pos[2]] as f64;
                out.push((a + (b - a) * f) as f32);
            }
        }
    }
    out
}

/// Trilinear resize to `target`; spacing is rescaled so the physical extent is kept.
pub fn resize_trilinear(v: &Volume, target: Shape3) -> Result<Volume> {
    if target.iter().any(|&n| n == 0) {
        return Err(Error::InvalidShape(format!("zero target dimension in {target:?}")));
    }
    if target == v.shape {
        return Ok(v.clone());
    }
    let mut shape = v.shape;
    let mut data = v.data.clone();
    for axis in 0..3 {
        if shape[axis] != target[axis] {
            data = resize_axis(&data, shape, axis, target[axis]);
            shape[axis] = target[axis];
        }
    }
    let mut spacing = v.spacing;
    for a in 0..3 {
        spacing[a] *= v.shape[a] as f64 / target[a] as f64;
    }
    Ok(Volume { shape, spacing, data, window: v.window, region: v.region })
}

/// Copies the box `[origin, origin + size)`.
pub fn crop(v: &Volume, origin: Shape3, size: Shape3) -> Result<Volume> {
    check_box(v.shape, origin, size)?;
    let mut data = Vec::with_capacity(voxel_count(size));
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = v.index(origin[0] + z, origin[1] + y, origin[2]);
            data.extend_from_slice(&v.data[start..start + size[2]]);
        }
    }
    Ok(Volume { shape: size, spacing: v.spacing, data, window: v.window, region: v.region })
}

/// Which of the three multi-level operations produced a training patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleBranch {
    /// Whole image resized to the patch.
    WholeResize,
    /// Random crop of twice the patch size, resized to the patch.
    DoubleCropResize,
    /// Random crop of exactly the patch size.
    Crop,
}

/// Extent of the original volume that a patch represents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub volume_shape: Shape3,
    pub origin: Shape3,
    pub extent: Shape3,
    pub branch: SampleBranch,
    /// Set when the requested branch did not fit and the whole image was used.
    pub fell_back: bool,
}

impl CropRecord {
    pub fn whole(volume_shape: Shape3) -> Self {
        CropRecord {
            volume_shape,
            origin: [0; 3],
            extent: volume_shape,
            branch: SampleBranch::WholeResize,
            fell_back: false,
        }
    }

    pub fn window(volume_shape: Shape3, origin: Shape3, extent: Shape3) -> Self {
        CropRecord { volume_shape, origin, extent, branch: SampleBranch::Crop, fell_back: false }
    }
}

fn random_origin<R: Rng + ?Sized>(rng: &mut R, shape: Shape3, size: Shape3) -> Shape3 {
    let mut o = [0; 3];
    for a in 0..3 {
        o[a] = rng.random_range(0..=shape[a] - size[a]);
    }
    o
}

/// Draws one of the three multi-level views of `v` with equal probability.
pub fn multi_level_sample<R: Rng + ?Sized>(
    v: &Volume,
    patch: Shape3,
    rng: &mut R,
) -> Result<(Volume, CropRecord)> {
    if patch.iter().any(|&n| n == 0) {
        return Err(Error::InvalidShape(format!("zero patch extent in {patch:?}")));
    }
    let branch = match rng.random_range(0..3u32) {
        0 => SampleBranch::WholeResize,
        1 => SampleBranch::DoubleCropResize,
        _ => SampleBranch::Crop,
    };
    sample_branch(v, patch, branch, rng)
}

/// Applies a specific multi-level branch.
pub fn sample_branch<R: Rng + ?Sized>(
    v: &Volume,
    patch: Shape3,
    branch: SampleBranch,
    rng: &mut R,
) -> Result<(Volume, CropRecord)> {
    let shape = v.shape;
    let whole = |fell_back: bool| -> Result<(Volume, CropRecord)> {
        let out = resize_trilinear(v, patch)?;
        Ok((out, CropRecord { fell_back, ..CropRecord::whole(shape) }))
    };
    match branch {
        SampleBranch::WholeResize => whole(false),
        SampleBranch::DoubleCropResize => {
            let size = [patch[0] * 2, patch[1] * 2, patch[2] * 2];
            if (0..3).any(|a| shape[a] < size[a]) {
                return whole(true);
            }
            let origin = random_origin(rng, shape, size);
            let out = resize_trilinear(&crop(v, origin, size)?, patch)?;
            Ok((out, CropRecord { volume_shape: shape, origin, extent: size, branch, fell_back: false }))
        }
        SampleBranch::Crop => {
            if (0..3).any(|a| shape[a] < patch[a]) {
                return whole(true);
            }
            let origin = random_origin(rng, shape, patch);
            let out = crop(v, origin, patch)?;
            Ok((out, CropRecord { volume_shape: shape, origin, extent: patch, branch, fell_back: false }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn index_volume(n: usize) -> Volume {
        Volume::new([n; 3], (0..n * n * n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn normalize_center_and_saturation() {
        let w = WindowSpec::new(50.0, 400.0).unwrap();
        let v = Volume::new([1, 1, 5], vec![50.0, -150.0, -1000.0, 250.0, 3000.0]).unwrap();
        let n = hu_normalize(&v, w).unwrap();
        assert_eq!(n.data(), &[0.0, -1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalize_han_150_is_half() {
        let v = Volume::new([1, 1, 1], vec![150.0]).unwrap();
        let n = hu_normalize(&v, WindowSpec::HAN).unwrap();
        assert!((n.data()[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn normalize_rejects_bad_window() {
        let v = Volume::zeros([1, 1, 1]).unwrap();
        let err = hu_normalize(&v, WindowSpec { level: 0.0, width: 0.0 }).unwrap_err();
        assert!(matches!(err, Error::InvalidWindow(_)));
        assert!(WindowSpec::new(0.0, -3.0).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let v = Volume::new([1, 1, 2], vec![0.0, 0.5]).unwrap();
        let hu = hu_denormalize(&v, WindowSpec::HAN).unwrap();
        assert_eq!(hu.data(), &[50.0, 150.0]);
    }

    #[test]
    fn normalize_round_trip_inside_window() {
        let v = Volume::new([1, 1, 4], vec![-600.0, -500.0, 100.0, 350.0]).unwrap();
        let w = WindowSpec::CHEST;
        let back = hu_denormalize(&hu_normalize(&v, w).unwrap(), w).unwrap();
        for (a, b) in v.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Volume::filled([3, 5, 4], 0.7).unwrap();
        let r = resize_trilinear(&c, [7, 2, 9]).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.7));
        let v = index_volume(4);
        assert_eq!(resize_trilinear(&v, [4, 4, 4]).unwrap(), v);
        assert!(matches!(resize_trilinear(&v, [0, 4, 4]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn resize_ramp_matches_scalar_oracle() {
        // Independent oracle: source coordinate (i + 0.5) * in/out - 0.5, then
        // plain linear interpolation on the 1D ramp.
        let ramp = [0.0f64, 1.0, 2.0, 3.0];
        let oracle = |i: usize, n_out: usize| {
            let s = ((i as f64 + 0.5) * 4.0 / n_out as f64 - 0.5).clamp(0.0, 3.0);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(3);
            ramp[lo] * (1.0 - (s - lo as f64)) + ramp[hi] * (s - lo as f64)
        };
        let v = Volume::new([1, 1, 4], ramp.iter().map(|&r| r as f32).collect()).unwrap();
        let r = resize_trilinear(&v, [1, 1, 2]).unwrap();
        assert_eq!(r.data(), &[oracle(0, 2) as f32, oracle(1, 2) as f32]);
        assert_eq!(r.data(), &[0.5, 2.5]);
    }

    #[test]
    fn crop_examples() {
        let v = index_volume(4);
        assert_eq!(crop(&v, [0, 0, 0], [4, 4, 4]).unwrap(), v);
        let c = crop(&v, [1, 2, 1], [2, 2, 2]).unwrap();
        let mut expected = Vec::new();
        for z in 1..3 {
            for y in 2..4 {
                for x in 1..3 {
                    expected.push((z * 16 + y * 4 + x) as f32);
                }
            }
        }
        assert_eq!(c.data(), expected.as_slice());
        assert!(matches!(crop(&v, [3, 0, 0], [2, 1, 1]), Err(Error::Bounds(_))));
    }

    #[test]
    fn whole_branch_record_is_full_extent() {
        let v = index_volume(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, rec) = sample_branch(&v, [4; 3], SampleBranch::WholeResize, &mut rng).unwrap();
        assert_eq!(p.shape(), [4; 3]);
        assert_eq!(rec.origin, [0; 3]);
        assert_eq!(rec.extent, [8; 3]);
    }

    #[test]
    fn crop_branch_is_deterministic() {
        let v = index_volume(12);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            sample_branch(&v, [4; 3], SampleBranch::Crop, &mut rng).unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn double_crop_branch_extent() {
        let v = Volume::zeros([64; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, rec) = sample_branch(&v, [16; 3], SampleBranch::DoubleCropResize, &mut rng).unwrap();
        // Replay the origin draw with the same seed.
        let mut replay = ChaCha8Rng::seed_from_u64(5);
        let expected: Vec<usize> = (0..3).map(|_| replay.random_range(0..=32usize)).collect();
        assert_eq!(rec.extent, [32; 3]);
        assert_eq!(rec.origin.to_vec(), expected);
        assert_eq!(p.shape(), [16; 3]);
        assert!(!rec.fell_back);
    }

    #[test]
    fn small_volume_falls_back_to_whole() {
        let v = Volume::zeros([20, 40, 40]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, rec) = sample_branch(&v, [16; 3], SampleBranch::DoubleCropResize, &mut rng).unwrap();
        assert!(rec.fell_back);
        assert_eq!(rec.branch, SampleBranch::WholeResize);
        assert_eq!(rec.extent, [20, 40, 40]);
        assert_eq!(p.shape(), [16; 3]);
    }

    #[test]
    fn branch_frequencies_are_uniform() {
        let v = Volume::zeros([8; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let (_, rec) = multi_level_sample(&v, [2; 3], &mut rng).unwrap();
            let i = match rec.branch {
                SampleBranch::WholeResize => 0,
                SampleBranch::DoubleCropResize => 1,
                SampleBranch::Crop => 2,
            };
            counts[i] += 1;
        }
        let p = 1.0 / 3.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn normalize_is_monotone(a in -3000.0f32..3000.0, b in -3000.0f32..3000.0) {
            let v = Volume::new([1, 1, 2], vec![a.min(b), a.max(b)]).unwrap();
            let n = hu_normalize(&v, WindowSpec::ABDOMEN).unwrap();
            prop_assert!(n.data()[0] <= n.data()[1]);
            prop_assert!(n.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn resize_preserves_bounds(
            vals in proptest::collection::vec(-5.0f32..5.0, 27),
            d in 1usize..7, h in 1usize..7, w in 1usize..7,
        ) {
            let v = Volume::new([3, 3, 3], vals).unwrap();
            let (lo, hi) = v.min_max();
            let r = resize_trilinear(&v, [d, h, w]).unwrap();
            prop_assert!(r.data().iter().all(|&x| x >= lo && x <= hi));
        }

        #[test]
        fn crop_composes(
            o1 in proptest::array::uniform3(0usize..3),
            o2 in proptest::array::uniform3(0usize..3),
        ) {
            let v = index_volume(8);
            let inner = crop(&crop(&v, o1, [5; 3]).unwrap(), o2, [3; 3]).unwrap();
            let composed = [o1[0] + o2[0], o1[1] + o2[1], o1[2] + o2[2]];
            prop_assert_eq!(inner, crop(&v, composed, [3; 3]).unwrap());
        }
    }
}
