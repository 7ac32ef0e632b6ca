//! Checkpoint file: one JSON header line, then little-endian f32 arrays.
//!
//! ```text
//! {"magic":"VDCK1","version":1,"kind":"unet",...,"arrays":[{"name":..,"offset":..,"len":..}]}\n
//! <f32 LE payload>
//! ```
//! Offsets are in bytes from the start of the payload.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::control::ControlAdapter;
use super::unet::{ToyUNet, UNetConfig};
use super::Denoiser;
use crate::condition::{ChannelLayout, ConditionBundle};
use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;
use crate::voxgrid::Volume;

const MAGIC: &str = "VDCK1";
const VERSION: u32 = 1;

/// A loadable network.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    UNet(ToyUNet<f32>),
    Control(ControlAdapter<f32>),
}

impl Model {
    pub fn layout(&self) -> ChannelLayout {
        match self {
            Model::UNet(m) => m.layout,
            Model::Control(a) => a.base.layout,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::UNet(_) => "unet",
            Model::Control(_) => "control",
        }
    }

    fn config(&self) -> UNetConfig {
        match self {
            Model::UNet(m) => m.config,
            Model::Control(a) => a.base.config,
        }
    }

    fn tensors(&self) -> Vec<(String, &Vec<f32>)> {
        match self {
            Model::UNet(m) => m.tensors(),
            Model::Control(a) => {
                let mut v: Vec<_> = a.base.tensors().into_iter().map(|(n, t)| (format!("base.{n}"), t)).collect();
                v.extend(a.branch.tensors().into_iter().map(|(n, t)| (format!("control.{n}"), t)));
                v
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        match self {
            Model::UNet(m) => m.tensors_mut(),
            Model::Control(a) => {
                let mut v = a.base.tensors_mut();
                v.extend(a.branch.tensors_mut());
                v
            }
        }
    }

    /// Freshly initialized model of the given kind, used as a template for loading.
    fn skeleton(kind: &str, config: UNetConfig, layout: ChannelLayout) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = ToyUNet::<f32>::new(config, layout, &mut rng)?;
        match kind {
            "unet" => Ok(Model::UNet(base)),
            "control" => Ok(Model::Control(ControlAdapter::new(base, &mut rng))),
            other => Err(Error::Format(format!("unknown checkpoint kind {other:?}"))),
        }
    }
}

impl Denoiser for Model {
    fn predict_noise(&self, x_t: &Volume, t: usize, cond: &ConditionBundle) -> Result<Volume> {
        match self {
            Model::UNet(m) => m.predict_noise(x_t, t, cond),
            Model::Control(a) => a.predict_noise(x_t, t, cond),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    kind: String,
    layout: ChannelLayout,
    network: UNetConfig,
    schedule: ScheduleParams,
    arrays: Vec<ArrayEntry>,
}

pub fn checkpoint_to_bytes(model: &Model, schedule: ScheduleParams) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut offset = 0;
    for (name, t) in model.tensors() {
        arrays.push(ArrayEntry { name, offset, len: t.len() });
        offset += 4 * t.len();
    }
    let header = Header {
        magic: MAGIC.into(),
        version: VERSION,
        kind: model.kind().into(),
        layout: model.layout(),
        network: model.config(),
        schedule,
        arrays,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset);
    for (_, t) in model.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Model, ScheduleParams)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", header.magic)));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    header.network.validate()?;
    let payload = &bytes[nl + 1..];
    let mut model = Model::skeleton(&header.kind, header.network, header.layout)?;
    let expected: Vec<(String, usize)> = model.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    if expected.len() != header.arrays.len() {
        return Err(Error::Format(format!("expected {} arrays, found {}", expected.len(), header.arrays.len())));
    }
    for ((dst, (name, len)), entry) in model.tensors_mut().into_iter().zip(expected).zip(&header.arrays) {
        if entry.name != name || entry.len != len {
            return Err(Error::Format(format!("array {:?}[{}] does not match expected {name:?}[{len}]", entry.name, entry.len)));
        }
        let end = entry.offset.checked_add(4 * len).filter(|&e| e <= payload.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated in array {name:?}")));
        };
        for (d, chunk) in dst.iter_mut().zip(payload[entry.offset..end].chunks_exact(4)) {
            *d = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    Ok((model, header.schedule))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, schedule: ScheduleParams) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(model, schedule)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, ScheduleParams)> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// Loads and insists on a particular condition-channel layout.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, layout: &ChannelLayout) -> Result<(Model, ScheduleParams)> {
    let (model, schedule) = load_checkpoint(path)?;
    layout.check_compatible(&model.layout())?;
    Ok((model, schedule))
}
