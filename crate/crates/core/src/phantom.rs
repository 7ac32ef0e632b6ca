//! Synthetic CT stand-ins: region-styled backgrounds, labelled ellipsoids,
//! lesions, and the degradations the restoration tasks undo.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::AnatomyMask;
use crate::error::{Error, Result};
use crate::inverse::slab_mean;
use crate::sampler::standard_normal_like;
use crate::voxgrid::{resize_trilinear, write_vvol, RegionClass, Shape3, Volume};

/// Background intensity per region, in normalized units.
pub fn background_level(region: RegionClass) -> f32 {
    match region {
        RegionClass::HaN => 0.0,
        RegionClass::Chest => -0.5,
        RegionClass::Abdomen => 0.2,
    }
}

/// Edge length of the noise lattice that is upsampled into the texture.
const TEXTURE_LATTICE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub label: u8,
    /// Voxel coordinates `[z, y, x]`.
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f32,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    /// Label of the component the lesion lives in.
    pub host: u8,
    pub center: [f64; 3],
    pub radius: f64,
    /// Added to the host intensity.
    pub offset: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub region: RegionClass,
    /// Anatomy label count including background.
    pub classes: usize,
    /// Rendered in order; later components overwrite earlier ones.
    pub components: Vec<Ellipsoid>,
    pub lesion: Option<LesionSpec>,
    pub texture_amplitude: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// A plain background with no components.
    pub fn empty(shape: Shape3, region: RegionClass, seed: u64) -> Self {
        PhantomSpec { shape, region, classes: 1, components: Vec::new(), lesion: None, texture_amplitude: 0.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n == 0) {
            return Err(Error::Spec(format!("empty phantom shape {:?}", self.shape)));
        }
        if !(self.texture_amplitude >= 0.0) {
            return Err(Error::Spec("texture amplitude must be >= 0".into()));
        }
        let mut seen = Vec::new();
        for c in &self.components {
            if c.label == 0 || c.label as usize >= self.classes {
                return Err(Error::Spec(format!("label {} outside 1..{}", c.label, self.classes)));
            }
            if seen.contains(&c.label) {
                return Err(Error::Spec(format!("duplicate label {}", c.label)));
            }
            seen.push(c.label);
            if !(-1.0..=1.0).contains(&c.intensity) {
                return Err(Error::Spec(format!("intensity {} outside [-1, 1]", c.intensity)));
            }
            for a in 0..3 {
                let (lo, hi) = (c.center[a] - c.radii[a], c.center[a] + c.radii[a]);
                if !(c.radii[a] > 0.0) || lo < 0.0 || hi > (self.shape[a] - 1) as f64 {
                    return Err(Error::Spec(format!("component {} leaves the volume on axis {a}", c.label)));
                }
            }
        }
        if let Some(l) = &self.lesion {
            let host = self
                .components
                .iter()
                .find(|c| c.label == l.host)
                .ok_or_else(|| Error::Spec(format!("lesion host {} is not a component", l.host)))?;
            if !host.contains(l.center) || !(l.radius > 0.0) {
                return Err(Error::Spec("lesion center must lie inside its host".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub anatomy: AnatomyMask,
    /// Binary; always a subset of the host component's voxels.
    pub lesion: Volume,
}

/// Smooth random field: uniform noise on a 4^3 lattice, trilinearly upsampled.
fn texture(shape: Shape3, amplitude: f32, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let n = TEXTURE_LATTICE;
    let lattice = Volume::from_fn([n, n, n], |_, _, _| amplitude * rng.random_range(-1.0f32..=1.0))?;
    resize_trilinear(&lattice, shape)?.with_spacing([1.0; 3])
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tex = texture(spec.shape, spec.texture_amplitude, &mut rng)?;
    let [d, h, w] = spec.shape;
    let mut labels = vec![0u8; d * h * w];
    let mut base = vec![background_level(spec.region); d * h * w];
    for c in &spec.components {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if c.contains([z as f64, y as f64, x as f64]) {
                        let i = (z * h + y) * w + x;
                        labels[i] = c.label;
                        base[i] = c.intensity;
                    }
                }
            }
        }
    }
    let mut lesion = vec![0.0f32; d * h * w];
    if let Some(l) = &spec.lesion {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let r2: f64 = [z, y, x].iter().zip(l.center).map(|(&p, c)| (p as f64 - c).powi(2)).sum();
                    if labels[i] == l.host && r2 <= l.radius * l.radius {
                        lesion[i] = 1.0;
                        base[i] += l.offset;
                    }
                }
            }
        }
    }
    let data = base.iter().zip(tex.data()).map(|(&b, &t)| (b + t).clamp(-1.0, 1.0)).collect();
    Ok(Phantom {
        image: Volume::new(spec.shape, data)?.with_region(spec.region),
        anatomy: AnatomyMask::new(spec.shape, spec.classes, labels)?,
        lesion: Volume::new(spec.shape, lesion)?,
    })
}

/// `y = x + sigma_n z`.
pub fn simulate_low_dose<R: Rng + ?Sized>(v: &Volume, sigma_n: f64, rng: &mut R) -> Result<Volume> {
    if !(sigma_n >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level must be >= 0, got {sigma_n}")));
    }
    let z = standard_normal_like(v, rng);
    v.zip_map(&z, |a, b| (a as f64 + sigma_n * b as f64) as f32)
}

/// Pads the depth up to a multiple of `multiple` by mirroring about the last
/// slice (without repeating it).
pub fn reflect_pad_depth(v: &Volume, multiple: usize) -> Result<Volume> {
    if multiple == 0 {
        return Err(Error::InvalidArgument("padding multiple must be >= 1".into()));
    }
    let [d, h, w] = v.shape();
    let rem = d % multiple;
    if rem == 0 {
        return Ok(v.clone());
    }
    let plane = h * w;
    let mut data = v.data().to_vec();
    for k in 0..multiple - rem {
        let src = if d > 1 { (d - 2).saturating_sub(k % (d - 1)) } else { 0 };
        data.extend_from_slice(&v.data()[src * plane..(src + 1) * plane]);
    }
    Ok(Volume::new([d + multiple - rem, h, w], data)?.with_meta_of(v))
}

/// Thick-slice acquisition: slab means of `sf` slices. Depths that are not a
/// multiple of `sf` are reflect-padded first; the flag reports that.
pub fn simulate_thick_slice(v: &Volume, sf: usize) -> Result<(Volume, bool)> {
    let padded = reflect_pad_depth(v, sf)?;
    let was_padded = padded.shape() != v.shape();
    Ok((slab_mean(&padded, sf)?, was_padded))
}

/// `x_0 ~ N(mu0, var0 I)`.
pub fn gaussian_phantom<R: Rng + ?Sized>(shape: Shape3, mu0: f64, var0: f64, rng: &mut R) -> Result<Volume> {
    if !(var0 >= 0.0) {
        return Err(Error::InvalidArgument(format!("variance must be >= 0, got {var0}")));
    }
    let z = standard_normal_like(&Volume::zeros(shape)?, rng);
    let sd = var0.sqrt();
    Ok(z.map(|v| (mu0 + sd * v as f64) as f32))
}

/// Distribution that random phantom specs are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomRecipe {
    pub shape: Shape3,
    pub classes: usize,
    pub min_components: usize,
    pub max_components: usize,
    /// As a fraction of the shortest axis.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Characteristic intensity of labels `1..classes`, like organ HU values.
    pub label_intensities: Vec<f32>,
    /// Per-case uniform perturbation of the label intensity.
    pub intensity_jitter: f32,
    pub texture_amplitude: f32,
    /// Share of cases that carry a lesion, rounded to a whole count.
    pub lesion_fraction: f64,
    /// Lesion contrast against its host; the sign is chosen per case.
    pub lesion_offset: f32,
    pub regions: Vec<RegionClass>,
}

impl Default for PhantomRecipe {
    fn default() -> Self {
        PhantomRecipe {
            shape: [32, 32, 32],
            classes: 6,
            min_components: 1,
            max_components: 3,
            min_radius: 0.15,
            max_radius: 0.3,
            label_intensities: vec![0.6, -0.3, 0.4, -0.75, 0.8],
            intensity_jitter: 0.05,
            texture_amplitude: 0.05,
            lesion_fraction: 0.1,
            lesion_offset: 0.6,
            regions: RegionClass::ALL.to_vec(),
        }
    }
}

impl PhantomRecipe {
    pub fn validate(&self) -> Result<()> {
        let ok = self.classes >= 2
            && self.classes <= 256
            && self.min_components >= 1
            && self.min_components <= self.max_components
            && self.max_components < self.classes
            && self.min_radius > 0.0
            && self.min_radius <= self.max_radius
            && self.max_radius < 0.5
            && self.label_intensities.len() + 1 == self.classes
            && self.label_intensities.iter().all(|v| (-1.0..=1.0).contains(v))
            && self.intensity_jitter >= 0.0
            && (0.0..=1.0).contains(&self.lesion_fraction)
            && !self.regions.is_empty()
            && self.shape.iter().all(|&n| n >= 4);
        if ok {
            Ok(())
        } else {
            Err(Error::Spec(format!("invalid phantom recipe {self:?}")))
        }
    }

    /// Draws one spec; the last component hosts the lesion so nothing
    /// renders over it.
    pub fn draw<R: Rng + ?Sized>(&self, with_lesion: bool, rng: &mut R) -> Result<PhantomSpec> {
        self.validate()?;
        let region = self.regions[rng.random_range(0..self.regions.len())];
        let n = rng.random_range(self.min_components..=self.max_components);
        let short = *self.shape.iter().min().unwrap() as f64;
        let mut labels: Vec<u8> = (1..self.classes as u8).collect();
        let mut components = Vec::with_capacity(n);
        for _ in 0..n {
            let label = labels.remove(rng.random_range(0..labels.len()));
            let radii: [f64; 3] = std::array::from_fn(|_| short * rng.random_range(self.min_radius..=self.max_radius));
            let center: [f64; 3] = std::array::from_fn(|a| {
                let (lo, hi) = (radii[a], (self.shape[a] - 1) as f64 - radii[a]);
                rng.random_range(lo..=hi)
            });
            let base = self.label_intensities[label as usize - 1];
            let intensity = (base + self.intensity_jitter * rng.random_range(-1.0f32..=1.0)).clamp(-1.0, 1.0);
            components.push(Ellipsoid { label, center, radii, intensity });
        }
        let lesion = if with_lesion {
            let host = components.last().unwrap();
            let rmin = host.radii.iter().cloned().fold(f64::INFINITY, f64::min);
            let radius = rmin * rng.random_range(0.3..=0.5);
            let center: [f64; 3] = std::array::from_fn(|a| host.center[a] + rmin * rng.random_range(-0.3..=0.3));
            // Push the lesion towards the middle of the range so it never clips.
            let offset = if host.intensity > 0.0 { -self.lesion_offset } else { self.lesion_offset };
            Some(LesionSpec { host: host.label, center, radius, offset })
        } else {
            None
        };
        Ok(PhantomSpec {
            shape: self.shape,
            region,
            classes: self.classes,
            components,
            lesion,
            texture_amplitude: self.texture_amplitude,
            seed: rng.random(),
        })
    }
}

/// Independent Gaussian voxels; the closed-form reference denoisers are exact for these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianRecipe {
    pub shape: Shape3,
    pub mu0: f64,
    pub var0: f64,
    /// Anatomy label count of the (all-background) masks.
    pub classes: usize,
    pub region: RegionClass,
}

impl Default for GaussianRecipe {
    fn default() -> Self {
        GaussianRecipe { shape: [32, 32, 32], mu0: 0.3, var0: 0.04, classes: 6, region: RegionClass::Chest }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetRecipe {
    Anatomy(PhantomRecipe),
    Gaussian(GaussianRecipe),
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        DatasetRecipe::Anatomy(PhantomRecipe::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianCase {
    pub recipe: GaussianRecipe,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CaseSpec {
    Anatomy(PhantomSpec),
    Gaussian(GaussianCase),
}

impl CaseSpec {
    pub fn generate(&self) -> Result<Phantom> {
        match self {
            CaseSpec::Anatomy(spec) => generate_phantom(spec),
            CaseSpec::Gaussian(g) => {
                let r = &g.recipe;
                let image = gaussian_phantom(r.shape, r.mu0, r.var0, &mut ChaCha8Rng::seed_from_u64(g.seed))?;
                Ok(Phantom {
                    image: image.with_region(r.region),
                    anatomy: AnatomyMask::background(r.shape, r.classes)?,
                    lesion: Volume::zeros(r.shape)?,
                })
            }
        }
    }

    pub fn region(&self) -> RegionClass {
        match self {
            CaseSpec::Anatomy(spec) => spec.region,
            CaseSpec::Gaussian(g) => g.recipe.region,
        }
    }

    pub fn has_lesion(&self) -> bool {
        matches!(self, CaseSpec::Anatomy(PhantomSpec { lesion: Some(_), .. }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub spec: CaseSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub recipe: DatasetRecipe,
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Case counts `(train, val, test)`: val and test each get `floor(n / 20)`.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let held = n / 20;
    (n - 2 * held, held, held)
}

/// Draws `n` case specs and the split assignment without touching the disk.
pub fn plan_dataset(n: usize, recipe: &DatasetRecipe, seed: u64) -> Result<Manifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n);
    match recipe {
        DatasetRecipe::Anatomy(r) => {
            r.validate()?;
            let n_lesion = (r.lesion_fraction * n as f64).round() as usize;
            for i in 0..n {
                let spec = CaseSpec::Anatomy(r.draw(i < n_lesion, &mut rng)?);
                cases.push(CaseEntry { id: format!("case_{i:04}"), split: Split::Train, spec });
            }
        }
        DatasetRecipe::Gaussian(r) => {
            if !(r.var0 >= 0.0) || r.classes == 0 || r.shape.iter().any(|&n| n == 0) {
                return Err(Error::Spec(format!("invalid Gaussian recipe {r:?}")));
            }
            for i in 0..n {
                let spec = CaseSpec::Gaussian(GaussianCase { recipe: r.clone(), seed: rng.random() });
                cases.push(CaseEntry { id: format!("case_{i:04}"), split: Split::Train, spec });
            }
        }
    }
    // Shuffled split so lesion and healthy cases land in every split.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let (_, val, test) = split_counts(n);
    for &i in &order[..val] {
        cases[i].split = Split::Val;
    }
    for &i in &order[val..val + test] {
        cases[i].split = Split::Test;
    }
    Ok(Manifest { seed, recipe: recipe.clone(), cases })
}

/// Writes `out/case_####/{image,anatomy,lesion}.vvol` and `out/manifest.json`.
pub fn build_dataset(out: impl AsRef<Path>, n: usize, recipe: &DatasetRecipe, seed: u64) -> Result<Manifest> {
    let out = out.as_ref();
    let manifest = plan_dataset(n, recipe, seed)?;
    fs::create_dir_all(out)?;
    for case in &manifest.cases {
        let p = case.spec.generate()?;
        let dir = out.join(&case.id);
        fs::create_dir_all(&dir)?;
        write_vvol(dir.join("image.vvol"), &p.image)?;
        write_vvol(dir.join("anatomy.vvol"), &p.anatomy.to_volume())?;
        write_vvol(dir.join("lesion.vvol"), &p.lesion)?;
    }
    fs::write(out.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
