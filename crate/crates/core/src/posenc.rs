//! Global coordinate channels and their Fourier embedding.
//!
//! Coordinates are normalized against the *whole* volume, so a crop, a
//! resized crop and the resized whole image of the same scan agree on where
//! every voxel sits.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::voxgrid::{voxel_count, CropRecord, Shape3};

/// Three coordinate channels ordered `x, y, z`, each shaped like the patch.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    shape: Shape3,
    data: Vec<f32>,
}

impl CoordGrid {
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    /// Channel-major data: `[x..., y..., z...]`.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel 0 is `x`, 1 is `y`, 2 is `z`.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.shape);
        &self.data[c * n..(c + 1) * n]
    }
}

/// Sinusoidal features of a [`CoordGrid`]: `6 * L` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbedding {
    shape: Shape3,
    freqs: usize,
    data: Vec<f32>,
}

impl PositionEmbedding {
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    /// Maximum frequency `L`.
    pub fn freqs(&self) -> usize {
        self.freqs
    }

    pub fn channels(&self) -> usize {
        6 * self.freqs
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.shape);
        &self.data[c * n..(c + 1) * n]
    }
}

/// Normalized global coordinate of patch index `j` along one axis.
fn axis_coords(volume_extent: usize, origin: usize, extent: usize, patch: usize) -> Vec<f64> {
    let normalize = |src: f64| {
        if volume_extent == 1 {
            0.0
        } else {
            2.0 * src / (volume_extent - 1) as f64 - 1.0
        }
    };
    (0..patch)
        .map(|j| {
            let src = if extent == patch {
                (origin + j) as f64
            } else if patch == 1 {
                origin as f64 + (extent - 1) as f64 / 2.0
            } else {
                origin as f64 + j as f64 * (extent - 1) as f64 / (patch - 1) as f64
            };
            normalize(src)
        })
        .collect()
}

/// Coordinate channels for a patch cut from a volume as described by `record`.
pub fn coord_grid_for_window(volume_shape: Shape3, record: &CropRecord, patch: Shape3) -> Result<CoordGrid> {
    if patch.iter().any(|&n| n == 0) {
        return Err(Error::InvalidShape(format!("zero patch extent in {patch:?}")));
    }
    for a in 0..3 {
        if record.extent[a] == 0 || record.origin[a] + record.extent[a] > volume_shape[a] {
            return Err(Error::Bounds(format!(
                "record origin {:?} extent {:?} outside volume {:?}",
                record.origin, record.extent, volume_shape
            )));
        }
    }
    // Per-axis coordinates indexed by shape axis (z, y, x).
    let per_axis: Vec<Vec<f64>> = (0..3)
        .map(|a| axis_coords(volume_shape[a], record.origin[a], record.extent[a], patch[a]))
        .collect();
    let n = voxel_count(patch);
    let mut data = vec![0.0f32; 3 * n];
    let (xs, rest) = data.split_at_mut(n);
    let (ys, zs) = rest.split_at_mut(n);
    let mut i = 0;
    for z in 0..patch[0] {
        for y in 0..patch[1] {
            for x in 0..patch[2] {
                xs[i] = per_axis[2][x] as f32;
                ys[i] = per_axis[1][y] as f32;
                zs[i] = per_axis[0][z] as f32;
                i += 1;
            }
        }
    }
    Ok(CoordGrid { shape: patch, data })
}

/// `(sin(2^k pi p), cos(2^k pi p))` for `k = 0..L`, per coordinate channel.
pub fn fourier_encode(grid: &CoordGrid, freqs: usize) -> Result<PositionEmbedding> {
    if freqs == 0 {
        return Err(Error::InvalidArgument("position encoding needs L >= 1".into()));
    }
    let n = voxel_count(grid.shape);
    let mut data = Vec::with_capacity(6 * freqs * n);
    for c in 0..3 {
        let coords = grid.channel(c);
        for k in 0..freqs {
            let w = (1u64 << k) as f64 * PI;
            data.extend(coords.iter().map(|&p| (w * p as f64).sin() as f32));
            data.extend(coords.iter().map(|&p| (w * p as f64).cos() as f32));
        }
    }
    Ok(PositionEmbedding { shape: grid.shape, freqs, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxgrid::{resize_trilinear, sample_branch, SampleBranch, Volume};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn whole_image_spans_unit_cube() {
        let g = coord_grid_for_window([9, 12, 7], &CropRecord::whole([9, 12, 7]), [4, 5, 6]).unwrap();
        for c in 0..3 {
            let ch = g.channel(c);
            let lo = ch.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!((lo, hi), (-1.0, 1.0));
        }
        // First voxel is the (-1, -1, -1) corner, last voxel (1, 1, 1).
        let last = voxel_count([4, 5, 6]) - 1;
        for c in 0..3 {
            assert_eq!(g.channel(c)[0], -1.0);
            assert_eq!(g.channel(c)[last], 1.0);
        }
    }

    #[test]
    fn center_voxel_is_origin() {
        let rec = CropRecord::window([9, 9, 9], [4, 4, 4], [1, 1, 1]);
        let g = coord_grid_for_window([9, 9, 9], &rec, [1, 1, 1]).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn corner_crop_x_span() {
        let rec = CropRecord::window([64; 3], [0; 3], [16; 3]);
        let g = coord_grid_for_window([64; 3], &rec, [16; 3]).unwrap();
        let x = g.channel(0);
        assert_eq!(x[0], -1.0);
        let expected = (-1.0 + 2.0 * 15.0 / 63.0) as f32;
        assert!((x[15] - expected).abs() < 1e-7);
        assert!(x.iter().all(|&v| v >= -1.0 && v <= expected + 1e-7));
    }

    #[test]
    fn record_outside_volume_is_rejected() {
        let rec = CropRecord::window([8; 3], [6, 0, 0], [4, 4, 4]);
        assert!(matches!(coord_grid_for_window([8; 3], &rec, [4; 3]), Err(Error::Bounds(_))));
    }

    #[test]
    fn fourier_examples() {
        let rec = CropRecord::window([3; 3], [1; 3], [1; 3]);
        let g = coord_grid_for_window([3; 3], &rec, [1; 3]).unwrap();
        let pe = fourier_encode(&g, 4).unwrap();
        assert_eq!(pe.channels(), 24);
        for c in 0..24 {
            let expect = if c % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.channel(c)[0], expect);
        }
        // p = 1 at k = 0 and p = 0.5 at k = 1 both land on angle pi.
        let whole = coord_grid_for_window([5; 3], &CropRecord::whole([5; 3]), [5; 3]).unwrap();
        let pe = fourier_encode(&whole, 2).unwrap();
        let x_last = 4; // x = 1 for voxel (0, 0, 4)
        assert!(pe.channel(0)[x_last].abs() < 1e-6);
        assert_eq!(pe.channel(1)[x_last], -1.0);
        let x_three_quarters = 3; // x = 0.5
        assert!(pe.channel(2)[x_three_quarters].abs() < 1e-6);
        assert_eq!(pe.channel(3)[x_three_quarters], -1.0);
        assert!(fourier_encode(&whole, 0).is_err());
    }

    #[test]
    fn crop_and_whole_grids_agree() {
        let shape = [20, 24, 28];
        let vol = Volume::zeros(shape).unwrap();
        let whole = coord_grid_for_window(shape, &CropRecord::whole(shape), shape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, rec) = sample_branch(&vol, [6, 6, 6], SampleBranch::Crop, &mut rng).unwrap();
        let crop = coord_grid_for_window(shape, &rec, [6; 3]).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let ci = (z * 6 + y) * 6 + x;
                    let wi = ((rec.origin[0] + z) * shape[1] + rec.origin[1] + y) * shape[2] + rec.origin[2] + x;
                    for c in 0..3 {
                        assert_eq!(crop.channel(c)[ci], whole.channel(c)[wi]);
                    }
                }
            }
        }
        // A resized double crop agrees with the whole grid to within one voxel width.
        let (_, rec2) = sample_branch(&vol, [5, 6, 7], SampleBranch::DoubleCropResize, &mut rng).unwrap();
        let resized = coord_grid_for_window(shape, &rec2, [5, 6, 7]).unwrap();
        let cropped_whole = resize_trilinear(
            &crate::voxgrid::crop(
                &Volume::new(shape, whole.channel(0).to_vec()).unwrap(),
                rec2.origin,
                rec2.extent,
            )
            .unwrap(),
            [5, 6, 7],
        )
        .unwrap();
        let voxel_width = 2.0 / (shape[2] - 1) as f32;
        for (a, b) in resized.channel(0).iter().zip(cropped_whole.data()) {
            assert!((a - b).abs() <= voxel_width + 1e-6);
        }
    }

    proptest! {
        #[test]
        fn embedding_values_bounded(freqs in 1usize..8, o in 0usize..4, e in 1usize..5) {
            let rec = CropRecord::window([8; 3], [o; 3], [e; 3]);
            let g = coord_grid_for_window([8; 3], &rec, [3; 3]).unwrap();
            prop_assert!(g.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let pe = fourier_encode(&g, freqs).unwrap();
            prop_assert_eq!(pe.data().len(), 6 * freqs * 27);
            prop_assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
