//! Binary grid and flow dumps, text exports for visualization.
//!
//! Occupancy dump (`.odtv`), little-endian:
//!
//! | offset | field |
//! |---|---|
//! | 0 | magic `ODTV` |
//! | 4 | version `u32` |
//! | 8 | level `u32` |
//! | 12 | dims `3 x u32` |
//! | 24 | voxel side `f32`, meters |
//! | 28 | reserved, zero |
//! | 32 | one byte per voxel, row-major `(x, y, z)`, 0 or 1 |
//!
//! Flow dump (`.odtf`): magic `ODTF`, version, dims `3 x u32`, finest side
//! `f32`, record count `u32`, 4 reserved bytes, then per occupied source
//! voxel `ix, iy, iz` as `u32` and the motion `mx, my, mz` in voxel units as
//! `f32`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;
use crate::grid::OccupancyGrid;
use crate::tracker::VoxelFlowField;

pub const ODTV_MAGIC: &[u8; 4] = b"ODTV";
pub const ODTF_MAGIC: &[u8; 4] = b"ODTF";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn dims_u32(dims: [usize; 3]) -> [u32; 3] {
    dims.map(|d| u32::try_from(d).expect("grid dimension exceeds u32"))
}

/// An occupancy dump's contents.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyDump {
    pub level: u32,
    pub voxel_size: f32,
    pub grid: OccupancyGrid,
}

pub fn encode_occupancy(grid: &OccupancyGrid, level: usize, voxel_size: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.len());
    out.extend_from_slice(ODTV_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(level as u32).to_le_bytes());
    for d in dims_u32(grid.dims) {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(voxel_size as f32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend(grid.data.iter().map(|&b| b as u8));
    out
}

pub fn decode_occupancy(bytes: &[u8], path: &Path) -> Result<OccupancyDump> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != ODTV_MAGIC {
        return Err(Error::format(path, "not an ODTV occupancy dump"));
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported ODTV version {version}")));
    }
    let dims = [u32_at(bytes, 12), u32_at(bytes, 16), u32_at(bytes, 20)].map(|d| d as usize);
    let n: usize = dims.iter().product();
    if bytes.len() != HEADER_LEN + n {
        return Err(Error::format(path, format!("expected {} voxel bytes, found {}", n, bytes.len() - HEADER_LEN)));
    }
    let mut data = Vec::with_capacity(n);
    for &b in &bytes[HEADER_LEN..] {
        match b {
            0 => data.push(false),
            1 => data.push(true),
            _ => return Err(Error::format(path, format!("voxel byte {b} is not 0 or 1"))),
        }
    }
    Ok(OccupancyDump { level: u32_at(bytes, 8), voxel_size: f32_at(bytes, 24), grid: OccupancyGrid::from_vec(dims, data) })
}

pub fn write_occupancy(path: &Path, grid: &OccupancyGrid, level: usize, voxel_size: f64) -> Result<()> {
    write_atomic(path, &encode_occupancy(grid, level, voxel_size))
}

pub fn read_occupancy(path: &Path) -> Result<OccupancyDump> {
    decode_occupancy(&read_bytes(path)?, path)
}

/// One source voxel of a flow dump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowRecord {
    pub index: [u32; 3],
    pub motion: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowDump {
    pub dims: [usize; 3],
    pub voxel_size: f32,
    pub records: Vec<FlowRecord>,
}

impl FlowDump {
    pub fn from_field(flow: &VoxelFlowField, l4: f64) -> Self {
        let records = flow
            .source_indices
            .iter()
            .zip(&flow.motions)
            .map(|(&s, m)| FlowRecord {
                index: dims_u32(flow.mask.coords(s)),
                motion: m.map(|v| v as f32),
            })
            .collect();
        FlowDump { dims: flow.dims, voxel_size: l4 as f32, records }
    }

    /// Dense voxel-unit field; voxels without a record carry zero.
    pub fn dense(&self) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; self.dims.iter().product()];
        for r in &self.records {
            let [x, y, z] = r.index.map(|v| v as usize);
            out[(x * self.dims[1] + y) * self.dims[2] + z] = r.motion.map(f64::from);
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 24 * self.records.len());
        out.extend_from_slice(ODTF_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for d in dims_u32(self.dims) {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.voxel_size.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&[0; 4]);
        for r in &self.records {
            for v in r.index {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in r.motion {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != ODTF_MAGIC {
            return Err(Error::format(path, "not an ODTF flow dump"));
        }
        let version = u32_at(bytes, 4);
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported ODTF version {version}")));
        }
        let dims = [u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16)].map(|d| d as usize);
        let count = u32_at(bytes, 24) as usize;
        if bytes.len() != HEADER_LEN + 24 * count {
            return Err(Error::format(path, format!("expected {count} flow records")));
        }
        let records = (0..count)
            .map(|i| {
                let o = HEADER_LEN + 24 * i;
                FlowRecord {
                    index: [u32_at(bytes, o), u32_at(bytes, o + 4), u32_at(bytes, o + 8)],
                    motion: [f32_at(bytes, o + 12), f32_at(bytes, o + 16), f32_at(bytes, o + 20)],
                }
            })
            .collect::<Vec<_>>();
        if let Some(r) = records.iter().find(|r| (0..3).any(|a| r.index[a] as usize >= dims[a])) {
            return Err(Error::format(path, format!("record index {:?} outside dims {dims:?}", r.index)));
        }
        Ok(FlowDump { dims, voxel_size: f32_at(bytes, 20), records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?, path)
    }
}

/// One `x y z` line per occupied-voxel centroid.
pub fn occupancy_points_text(grid: &OccupancyGrid, spec: &VoxelGridSpec, level: usize) -> String {
    let mut s = String::new();
    for f in grid.occupied() {
        let c = spec.centroid(level, grid.coords(f));
        writeln!(s, "{} {} {}", c.x, c.y, c.z).unwrap();
    }
    s
}

/// One `x y z dx dy dz` line (meters) per flow record.
pub fn flow_arrows_text(dump: &FlowDump, spec: &VoxelGridSpec) -> String {
    let level = spec.num_levels();
    let l = spec.voxel_size(level);
    let mut s = String::new();
    for r in &dump.records {
        let c = spec.centroid(level, r.index.map(|v| v as usize));
        let m = r.motion.map(|v| f64::from(v) * l);
        writeln!(s, "{} {} {} {} {} {}", c.x, c.y, c.z, m[0], m[1], m[2]).unwrap();
    }
    s
}
