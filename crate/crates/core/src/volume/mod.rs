//! Bricked multi-resolution multi-channel volume hierarchy: manifest, ingest,
//! brick codec and server-side brick stores.

mod codec;
mod hierarchy;
mod store;

pub use codec::{compress_brick, decompress_brick};
pub use hierarchy::{BuildOptions, Hierarchy, RawChannel, RawVolume};
pub use store::{BrickStore, DiskStore, LevelGrid, MemoryStore, StoreError};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File name of the manifest inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest";

pub const DEFAULT_PATH_PATTERN: &str = "c{c}/l{l}/{x}_{y}_{z}.lz4";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
    U32,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::U32 | Dtype::F32 => 4,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "u16" => Ok(Dtype::U16),
            "u32" => Ok(Dtype::U32),
            "f32" => Ok(Dtype::F32),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelDesc {
    pub dims: [u32; 3],
    pub downsample_from_prev: [u32; 3],
    pub brick_grid: [u32; 3],
}

impl LevelDesc {
    pub fn voxel_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn brick_count(&self) -> u64 {
        self.brick_grid.iter().map(|&d| d as u64).product()
    }
}

/// Dataset description. Level 0 is the finest level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeManifest {
    pub name: String,
    pub channels: u32,
    pub dtype_original: Dtype,
    pub brick_size: [u32; 3],
    pub levels: Vec<LevelDesc>,
    pub compression: String,
    pub path_pattern: String,
    /// Whether the serving side answers region min/max queries.
    #[serde(default)]
    pub metadata_endpoint: bool,
    /// Original per-channel value range mapped onto `0..=255`.
    #[serde(default)]
    pub value_ranges: Vec<[f64; 2]>,
}

impl VolumeManifest {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn brick_voxels(&self) -> usize {
        self.brick_size.iter().map(|&b| b as usize).product()
    }

    pub fn level(&self, l: usize) -> &LevelDesc {
        &self.levels[l]
    }

    /// Relative path of one brick file.
    pub fn brick_path(&self, channel: u32, level: u32, coord: [u32; 3]) -> String {
        self.path_pattern
            .replace("{c}", &channel.to_string())
            .replace("{l}", &level.to_string())
            .replace("{x}", &coord[0].to_string())
            .replace("{y}", &coord[1].to_string())
            .replace("{z}", &coord[2].to_string())
    }

    pub fn contains_brick(&self, channel: u32, level: u32, coord: [u32; 3]) -> bool {
        channel < self.channels
            && (level as usize) < self.levels.len()
            && (0..3).all(|i| coord[i] < self.levels[level as usize].brick_grid[i])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.channels == 0 {
            return bad("channel count must be positive".into());
        }
        if self.compression != "lz4" {
            return bad(format!("unsupported compression `{}`", self.compression));
        }
        for &b in &self.brick_size {
            if b < 2 || !b.is_power_of_two() {
                return bad(format!(
                    "brick size {:?} must be powers of two >= 2",
                    self.brick_size
                ));
            }
        }
        if self.levels.is_empty() {
            return bad("at least one level required".into());
        }
        for (l, lvl) in self.levels.iter().enumerate() {
            for i in 0..3 {
                let grid = lvl.dims[i].div_ceil(self.brick_size[i]);
                if lvl.dims[i] == 0 || lvl.brick_grid[i] != grid {
                    return bad(format!(
                        "level {l}: brick grid {:?} inconsistent with dims",
                        lvl.brick_grid
                    ));
                }
                if grid > 256 {
                    return bad(format!(
                        "level {l}: brick grid {:?} exceeds 256",
                        lvl.brick_grid
                    ));
                }
                let f = lvl.downsample_from_prev[i];
                if l == 0 {
                    if f != 1 {
                        return bad("level 0 must use factor 1".into());
                    }
                } else {
                    if !(1..=2).contains(&f) {
                        return bad(format!("level {l}: factor {f} not in {{1,2}}"));
                    }
                    if lvl.dims[i] != self.levels[l - 1].dims[i].div_ceil(f) {
                        return bad(format!("level {l}: dims do not follow downsample factors"));
                    }
                }
            }
            if l > 0 && lvl.voxel_count() >= self.levels[l - 1].voxel_count() {
                return bad(format!("level {l}: voxel count must strictly decrease"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let m: VolumeManifest = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_text(&text)
    }
}

/// Level descriptors for `levels` levels starting from `dims`.
pub fn level_chain(
    dims: [u32; 3],
    brick: [u32; 3],
    levels: usize,
    factors: [u32; 3],
) -> Vec<LevelDesc> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = dims;
    for l in 0..levels {
        let f = if l == 0 { [1, 1, 1] } else { factors };
        if l > 0 {
            cur = [0, 1, 2].map(|i| cur[i].div_ceil(f[i]));
        }
        out.push(LevelDesc {
            dims: cur,
            downsample_from_prev: f,
            brick_grid: [0, 1, 2].map(|i| cur[i].div_ceil(brick[i])),
        });
    }
    out
}
