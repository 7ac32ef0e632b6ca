//! VVOL: one JSON header line, a newline, then little-endian float32 voxels
//! with `x` fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{voxel_count, RegionClass, Shape3, Volume, WindowSpec};
use crate::error::{Error, Result};

pub const VVOL_MAGIC: &str = "VVOL1";

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    shape: Shape3,
    spacing: [f64; 3],
    window: WindowSpec,
    region: RegionClass,
}

pub fn vvol_to_bytes(v: &Volume) -> Result<Vec<u8>> {
    let header = Header {
        magic: VVOL_MAGIC.to_string(),
        shape: v.shape(),
        spacing: v.spacing(),
        window: v.window(),
        region: v.region(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(v.len() * 4);
    for &x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn vvol_from_bytes(bytes: &[u8]) -> Result<Volume> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("VVOL header line is not terminated".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad VVOL header: {e}")))?;
    if header.magic != VVOL_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", header.magic)));
    }
    let body = &bytes[nl + 1..];
    let n = voxel_count(header.shape);
    if body.len() != n * 4 {
        return Err(Error::Format(format!(
            "expected {} payload bytes for shape {:?}, found {}",
            n * 4,
            header.shape,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume::new(header.shape, data)?
        .with_spacing(header.spacing)?
        .with_window(header.window)?
        .with_region(header.region))
}

pub fn write_vvol(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&vvol_to_bytes(v)?)?;
    Ok(())
}

pub fn read_vvol(path: impl AsRef<Path>) -> Result<Volume> {
    vvol_from_bytes(&fs::read(path)?)
}
