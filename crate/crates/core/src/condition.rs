//! Conditioning signals and their assembly into denoiser input channels.
//!
//! Spatial conditions become channels in a fixed order: anatomy label
//! (scaled to `[0, 1]`), raw coordinates `x, y, z`, then the Fourier
//! embedding. The region class is not spatial; it travels as an index that
//! the network adds to its timestep embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posenc::{coord_grid_for_window, fourier_encode, CoordGrid, PositionEmbedding};
use crate::voxgrid::{crop, voxel_count, CropRecord, RegionClass, Shape3, Volume};

/// Integer anatomy labels `0..K` (0 is background).
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomyMask {
    shape: Shape3,
    classes: usize,
    labels: Vec<u8>,
}

impl AnatomyMask {
    pub fn new(shape: Shape3, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if classes == 0 || classes > 256 {
            return Err(Error::InvalidArgument(format!("label count {classes} outside 1..=256")));
        }
        if labels.len() != voxel_count(shape) {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for shape {shape:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= class count {classes}")));
        }
        Ok(AnatomyMask { shape, classes, labels })
    }

    pub fn background(shape: Shape3, classes: usize) -> Result<Self> {
        Self::new(shape, classes, vec![0; voxel_count(shape)])
    }

    /// Reads labels stored as float voxel values.
    pub fn from_volume(v: &Volume, classes: usize) -> Result<Self> {
        let labels = v
            .data()
            .iter()
            .map(|&x| {
                let r = x.round();
                if (0.0..=255.0).contains(&r) && (x - r).abs() < 1e-3 {
                    Ok(r as u8)
                } else {
                    Err(Error::InvalidArgument(format!("{x} is not an anatomy label")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(v.shape(), classes, labels)
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.shape, self.labels.iter().map(|&l| l as f32).collect())
            .expect("mask shape is valid")
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn crop(&self, origin: Shape3, size: Shape3) -> Result<AnatomyMask> {
        let v = crop(&self.to_volume(), origin, size)?;
        AnatomyMask::from_volume(&v, self.classes)
    }

    /// Labels of the region `record` covers, nearest-neighbour resampled to `patch`.
    pub fn view(&self, record: &CropRecord, patch: Shape3) -> Result<AnatomyMask> {
        let src = if record.extent == self.shape { self.clone() } else { self.crop(record.origin, record.extent)? };
        if patch == record.extent {
            return Ok(src);
        }
        let [d, h, w] = record.extent;
        let pick = |i: usize, n_out: usize, n_in: usize| ((2 * i + 1) * n_in / (2 * n_out)).min(n_in - 1);
        let mut labels = Vec::with_capacity(voxel_count(patch));
        for z in 0..patch[0] {
            let sz = pick(z, patch[0], d);
            for y in 0..patch[1] {
                let sy = pick(y, patch[1], h);
                for x in 0..patch[2] {
                    labels.push(src.labels[(sz * h + sy) * w + pick(x, patch[2], w)]);
                }
            }
        }
        AnatomyMask::new(patch, self.classes, labels)
    }

    /// Binary volume of voxels with label > 0.
    pub fn foreground(&self) -> Volume {
        Volume::new(self.shape, self.labels.iter().map(|&l| (l > 0) as u8 as f32).collect())
            .expect("mask shape is valid")
    }
}

/// Declared input-channel layout of a denoiser; part of the checkpoint contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    /// Anatomy label count `K`.
    pub anatomy_classes: usize,
    /// Whether raw coordinate channels are included.
    pub raw_coords: bool,
    /// Fourier frequencies `L`; 0 disables the embedding.
    pub pos_freqs: usize,
}

impl Default for ChannelLayout {
    fn default() -> Self {
        ChannelLayout { anatomy_classes: 6, raw_coords: true, pos_freqs: 6 }
    }
}

impl ChannelLayout {
    pub fn condition_channels(&self) -> usize {
        1 + if self.raw_coords { 3 } else { 0 } + 6 * self.pos_freqs
    }

    /// Image channel plus condition channels.
    pub fn input_channels(&self) -> usize {
        1 + self.condition_channels()
    }

    pub fn check_compatible(&self, other: &ChannelLayout) -> Result<()> {
        if self != other {
            return Err(Error::Layout(format!("model expects {self:?}, input has {other:?}")));
        }
        Ok(())
    }
}

/// Everything the denoiser is conditioned on for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub region: RegionClass,
    pub anatomy: AnatomyMask,
    pub coords: Option<CoordGrid>,
    pub pos_embed: Option<PositionEmbedding>,
    /// Task-specific target condition (low-resolution image, lesion mask, ...).
    pub target: Option<Volume>,
}

impl ConditionBundle {
    /// Builds the conditions for a patch described by `record` under `layout`.
    pub fn for_record(
        region: RegionClass,
        anatomy: AnatomyMask,
        record: &CropRecord,
        layout: &ChannelLayout,
    ) -> Result<Self> {
        if anatomy.classes() != layout.anatomy_classes {
            return Err(Error::Layout(format!(
                "anatomy has {} classes, layout declares {}",
                anatomy.classes(),
                layout.anatomy_classes
            )));
        }
        let patch = anatomy.shape();
        let grid = coord_grid_for_window(record.volume_shape, record, patch)?;
        let pos_embed = if layout.pos_freqs > 0 { Some(fourier_encode(&grid, layout.pos_freqs)?) } else { None };
        let coords = layout.raw_coords.then_some(grid);
        Ok(ConditionBundle { region, anatomy, coords, pos_embed, target: None })
    }

    /// Conditions for a whole volume processed as a single patch.
    pub fn whole(region: RegionClass, anatomy: AnatomyMask, layout: &ChannelLayout) -> Result<Self> {
        let record = CropRecord::whole(anatomy.shape());
        Self::for_record(region, anatomy, &record, layout)
    }

    pub fn with_target(mut self, target: Volume) -> Self {
        self.target = Some(target);
        self
    }

    pub fn shape(&self) -> Shape3 {
        self.anatomy.shape()
    }

    pub fn layout(&self) -> ChannelLayout {
        ChannelLayout {
            anatomy_classes: self.anatomy.classes(),
            raw_coords: self.coords.is_some(),
            pos_freqs: self.pos_embed.as_ref().map_or(0, |p| p.freqs()),
        }
    }
}

/// Stacked condition channels plus the non-spatial region index.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionChannels {
    pub layout: ChannelLayout,
    pub shape: Shape3,
    pub channels: usize,
    /// Channel-major, `channels * D * H * W` values.
    pub data: Vec<f32>,
    pub region_index: usize,
}

pub fn region_embedding_index(r: RegionClass) -> usize {
    r.index()
}

/// Concatenates anatomy, coordinates and position embedding in layout order.
pub fn assemble_condition_channels(b: &ConditionBundle) -> Result<ConditionChannels> {
    let shape = b.anatomy.shape();
    if let Some(c) = &b.coords {
        if c.shape() != shape {
            return Err(Error::ShapeMismatch(format!("coords {:?} vs anatomy {:?}", c.shape(), shape)));
        }
    }
    if let Some(p) = &b.pos_embed {
        if p.shape() != shape {
            return Err(Error::ShapeMismatch(format!("embedding {:?} vs anatomy {:?}", p.shape(), shape)));
        }
    }
    if let Some(t) = &b.target {
        if t.shape() != shape {
            return Err(Error::ShapeMismatch(format!("target {:?} vs anatomy {:?}", t.shape(), shape)));
        }
    }
    let layout = b.layout();
    let n = voxel_count(shape);
    let mut data = Vec::with_capacity(layout.condition_channels() * n);
    let scale = if b.anatomy.classes() > 1 { 1.0 / (b.anatomy.classes() - 1) as f32 } else { 0.0 };
    data.extend(b.anatomy.labels().iter().map(|&l| l as f32 * scale));
    if let Some(c) = &b.coords {
        data.extend_from_slice(c.data());
    }
    if let Some(p) = &b.pos_embed {
        data.extend_from_slice(p.data());
    }
    Ok(ConditionChannels {
        layout,
        shape,
        channels: layout.condition_channels(),
        data,
        region_index: region_embedding_index(b.region),
    })
}

/// Whole-volume conditions from which per-window bundles are cut.
#[derive(Clone, Debug)]
pub struct ConditionSource {
    pub region: RegionClass,
    pub anatomy: AnatomyMask,
    pub layout: ChannelLayout,
    pub target: Option<Volume>,
}

impl ConditionSource {
    pub fn new(region: RegionClass, anatomy: AnatomyMask, layout: ChannelLayout) -> Self {
        ConditionSource { region, anatomy, layout, target: None }
    }

    pub fn with_target(mut self, target: Volume) -> Self {
        self.target = Some(target);
        self
    }

    pub fn volume_shape(&self) -> Shape3 {
        self.anatomy.shape()
    }

    /// Conditions for the window at `origin` with extent `size`.
    pub fn window(&self, origin: Shape3, size: Shape3) -> Result<ConditionBundle> {
        let shape = self.volume_shape();
        let record = CropRecord::window(shape, origin, size);
        let anatomy = if size == shape { self.anatomy.clone() } else { self.anatomy.crop(origin, size)? };
        let mut b = ConditionBundle::for_record(self.region, anatomy, &record, &self.layout)?;
        if let Some(t) = &self.target {
            b.target = Some(if size == shape { t.clone() } else { crop(t, origin, size)? });
        }
        Ok(b)
    }

    pub fn whole(&self) -> Result<ConditionBundle> {
        self.window([0; 3], self.volume_shape())
    }
}
