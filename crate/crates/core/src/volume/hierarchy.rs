use std::path::Path;

use rayon::prelude::*;

use super::store::LevelGrid;
use super::{
    compress_brick, level_chain, Dtype, VolumeManifest, DEFAULT_PATH_PATTERN, MANIFEST_FILE,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub enum RawChannel {
    U8(Vec<u8>),
    U16(Vec<u16>),
    U32(Vec<u32>),
    F32(Vec<f32>),
}

impl RawChannel {
    fn len(&self) -> usize {
        match self {
            RawChannel::U8(v) => v.len(),
            RawChannel::U16(v) => v.len(),
            RawChannel::U32(v) => v.len(),
            RawChannel::F32(v) => v.len(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            RawChannel::U8(_) => Dtype::U8,
            RawChannel::U16(_) => Dtype::U16,
            RawChannel::U32(_) => Dtype::U32,
            RawChannel::F32(_) => Dtype::F32,
        }
    }

    /// Convert to u8. u8 input is taken as is; wider types are range
    /// normalized (min -> 0, max -> 255).
    fn to_u8(&self) -> (Vec<u8>, [f64; 2]) {
        fn normalize<T: Copy + Into<f64>>(v: &[T]) -> (Vec<u8>, [f64; 2]) {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &x in v {
                let x: f64 = x.into();
                if x.is_finite() {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
            if !lo.is_finite() {
                return (vec![0; v.len()], [0.0, 0.0]);
            }
            let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
            let out = v
                .iter()
                .map(|&x| {
                    let x: f64 = x.into();
                    if x.is_finite() {
                        ((x - lo) * scale).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    }
                })
                .collect();
            (out, [lo, hi])
        }
        match self {
            RawChannel::U8(v) => (v.clone(), [0.0, 255.0]),
            RawChannel::U16(v) => normalize(v),
            RawChannel::U32(v) => normalize(v),
            RawChannel::F32(v) => normalize(v),
        }
    }
}

/// Dense multi-channel input volume, x-fastest.
#[derive(Clone, Debug)]
pub struct RawVolume {
    pub dims: [u32; 3],
    pub channels: Vec<RawChannel>,
}

impl RawVolume {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    /// Parse little-endian raw data. `bytes` holds `channels` consecutive
    /// channel blocks.
    pub fn from_bytes(bytes: &[u8], dims: [u32; 3], dtype: Dtype, channels: u32) -> Result<Self> {
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let expected = n * dtype.size() * channels as usize;
        if bytes.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "expected {expected} bytes for {dims:?} x {channels} {dtype:?}, got {}",
                bytes.len()
            )));
        }
        let block = n * dtype.size();
        let chans = bytes
            .chunks_exact(block)
            .map(|b| match dtype {
                Dtype::U8 => RawChannel::U8(b.to_vec()),
                Dtype::U16 => RawChannel::U16(
                    b.chunks_exact(2)
                        .map(|c| u16::from_le_bytes([c[0], c[1]]))
                        .collect(),
                ),
                Dtype::U32 => RawChannel::U32(
                    b.chunks_exact(4)
                        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
                Dtype::F32 => RawChannel::F32(
                    b.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
            })
            .collect();
        Ok(Self {
            dims,
            channels: chans,
        })
    }

    fn validate(&self) -> Result<Dtype> {
        if self.channels.is_empty() {
            return Err(Error::InvalidVolume("no channels".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("zero extent {:?}", self.dims)));
        }
        let dtype = self.channels[0].dtype();
        for c in &self.channels {
            if c.len() != self.voxel_count() {
                return Err(Error::InvalidVolume(
                    "channel length does not match dims".into(),
                ));
            }
            if c.dtype() != dtype {
                return Err(Error::InvalidVolume("mixed channel dtypes".into()));
            }
        }
        Ok(dtype)
    }
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub name: String,
    pub brick_size: [u32; 3],
    pub levels: usize,
    pub factors: [u32; 3],
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            name: "volume".into(),
            brick_size: [32; 3],
            levels: 4,
            factors: [2, 2, 2],
        }
    }
}

/// In-memory bricked hierarchy: u8 level grids per channel.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    manifest: VolumeManifest,
    grids: Vec<Vec<LevelGrid>>,
}

impl Hierarchy {
    pub fn build(raw: &RawVolume, opts: &BuildOptions) -> Result<Self> {
        let dtype = raw.validate()?;
        if opts.levels == 0 {
            return Err(Error::InvalidVolume("at least one level required".into()));
        }
        let mut value_ranges = Vec::new();
        let mut grids = Vec::new();
        for ch in &raw.channels {
            let (data, range) = ch.to_u8();
            value_ranges.push(range);
            let mut levels = vec![LevelGrid::new(raw.dims, data)];
            for _ in 1..opts.levels {
                let next = downsample(levels.last().unwrap(), opts.factors);
                levels.push(next);
            }
            grids.push(levels);
        }
        let manifest = VolumeManifest {
            name: opts.name.clone(),
            channels: raw.channels.len() as u32,
            dtype_original: dtype,
            brick_size: opts.brick_size,
            levels: level_chain(raw.dims, opts.brick_size, opts.levels, opts.factors),
            compression: "lz4".into(),
            path_pattern: DEFAULT_PATH_PATTERN.into(),
            metadata_endpoint: true,
            value_ranges,
        };
        manifest.validate()?;
        Ok(Self { manifest, grids })
    }

    pub fn manifest(&self) -> &VolumeManifest {
        &self.manifest
    }

    pub fn grid(&self, channel: u32, level: u32) -> &LevelGrid {
        &self.grids[channel as usize][level as usize]
    }

    /// Copy one brick (x-fastest). Voxels past the volume edge replicate the
    /// nearest in-volume voxel.
    pub fn extract_brick(&self, channel: u32, level: u32, coord: [u32; 3]) -> Result<Vec<u8>> {
        if channel >= self.manifest.channels || level as usize >= self.manifest.levels.len() {
            return Err(Error::BrickOutOfRange {
                coord,
                grid: [0; 3],
            });
        }
        let grid = self.manifest.levels[level as usize].brick_grid;
        if (0..3).any(|i| coord[i] >= grid[i]) {
            return Err(Error::BrickOutOfRange { coord, grid });
        }
        Ok(extract_brick(
            self.grid(channel, level),
            self.manifest.brick_size,
            coord,
        ))
    }

    /// LZ4 bytes for every brick, keyed by `(channel, level, coord)`.
    pub fn compressed_bricks(&self) -> Vec<((u32, u32, [u32; 3]), Vec<u8>)> {
        let keys = self.brick_keys();
        keys.into_par_iter()
            .map(|(c, l, coord)| {
                let payload = extract_brick(self.grid(c, l), self.manifest.brick_size, coord);
                ((c, l, coord), compress_brick(&payload))
            })
            .collect()
    }

    fn brick_keys(&self) -> Vec<(u32, u32, [u32; 3])> {
        let mut keys = Vec::new();
        for c in 0..self.manifest.channels {
            for (l, lvl) in self.manifest.levels.iter().enumerate() {
                let g = lvl.brick_grid;
                for z in 0..g[2] {
                    for y in 0..g[1] {
                        for x in 0..g[0] {
                            keys.push((c, l as u32, [x, y, z]));
                        }
                    }
                }
            }
        }
        keys
    }

    /// Write `<dir>/manifest` and one LZ4 file per brick. The manifest is
    /// written after all bricks.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let keys = self.brick_keys();
        keys.into_par_iter()
            .try_for_each(|(c, l, coord)| -> Result<()> {
                let payload = extract_brick(self.grid(c, l), self.manifest.brick_size, coord);
                let bytes = compress_brick(&payload);
                let path = dir.join(self.manifest.brick_path(c, l, coord));
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
            })?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.manifest.to_text()).map_err(|e| Error::io(&path, e))
    }
}

/// Box-filter downsample; partial footprints at the upper edges average only
/// the in-volume voxels. Rounds half up.
pub(crate) fn downsample(src: &LevelGrid, f: [u32; 3]) -> LevelGrid {
    let sd = src.dims;
    let dims = [0, 1, 2].map(|i| sd[i].div_ceil(f[i]));
    let (sx, sy) = (sd[0] as usize, sd[1] as usize);
    let mut data = vec![0u8; dims.iter().map(|&d| d as usize).product()];
    data.par_chunks_mut(dims[0] as usize * dims[1] as usize)
        .enumerate()
        .for_each(|(z, slab)| {
            let z0 = z as u32 * f[2];
            let z1 = (z0 + f[2]).min(sd[2]);
            for y in 0..dims[1] {
                let y0 = y * f[1];
                let y1 = (y0 + f[1]).min(sd[1]);
                for x in 0..dims[0] {
                    let x0 = x * f[0];
                    let x1 = (x0 + f[0]).min(sd[0]);
                    let mut sum = 0u32;
                    let mut n = 0u32;
                    for zz in z0..z1 {
                        for yy in y0..y1 {
                            let row = (zz as usize * sy + yy as usize) * sx;
                            for xx in x0..x1 {
                                sum += src.data[row + xx as usize] as u32;
                                n += 1;
                            }
                        }
                    }
                    slab[(y * dims[0] + x) as usize] = ((sum + n / 2) / n) as u8;
                }
            }
        });
    LevelGrid::new(dims, data)
}

pub(crate) fn extract_brick(grid: &LevelGrid, brick: [u32; 3], coord: [u32; 3]) -> Vec<u8> {
    let [bx, by, bz] = brick;
    let mut out = Vec::with_capacity((bx * by * bz) as usize);
    let d = grid.dims;
    for z in 0..bz {
        let gz = (coord[2] * bz + z).min(d[2] - 1);
        for y in 0..by {
            let gy = (coord[1] * by + y).min(d[1] - 1);
            let row = (gz as usize * d[1] as usize + gy as usize) * d[0] as usize;
            for x in 0..bx {
                let gx = (coord[0] * bx + x).min(d[0] - 1);
                out.push(grid.data[row + gx as usize]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{decompress_brick, VolumeManifest};

    fn ramp(dims: [u32; 3]) -> RawVolume {
        let mut v = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    v.push(((x + 2 * y + 3 * z) % 256) as u8);
                }
            }
        }
        RawVolume {
            dims,
            channels: vec![RawChannel::U8(v)],
        }
    }

    fn opts(brick: u32, levels: usize, factors: [u32; 3]) -> BuildOptions {
        BuildOptions {
            name: "t".into(),
            brick_size: [brick; 3],
            levels,
            factors,
        }
    }

    /// Brute-force box average over the footprint in the previous level.
    fn oracle_average(src: &LevelGrid, f: [u32; 3], p: [u32; 3]) -> u8 {
        let mut vals = Vec::new();
        for z in p[2] * f[2]..(p[2] * f[2] + f[2]) {
            for y in p[1] * f[1]..(p[1] * f[1] + f[1]) {
                for x in p[0] * f[0]..(p[0] * f[0] + f[0]) {
                    if x < src.dims[0] && y < src.dims[1] && z < src.dims[2] {
                        vals.push(src.get([x, y, z]) as f64);
                    }
                }
            }
        }
        (vals.iter().sum::<f64>() / vals.len() as f64).round() as u8
    }

    #[test]
    fn anisotropic_factors_keep_z() {
        let raw = ramp([96; 3]);
        let h = Hierarchy::build(&raw, &opts(32, 2, [2, 2, 1])).unwrap();
        assert_eq!(h.manifest().levels[1].dims, [48, 48, 96]);
        let l0 = h.grid(0, 0);
        let l1 = h.grid(0, 1);
        for z in (0..96).step_by(7) {
            for y in (0..48).step_by(5) {
                for x in (0..48).step_by(3) {
                    assert_eq!(l1.get([x, y, z]), oracle_average(l0, [2, 2, 1], [x, y, z]));
                }
            }
        }
    }

    #[test]
    fn constant_zero_bricks_decode_to_zero() {
        let raw = RawVolume {
            dims: [64; 3],
            channels: vec![RawChannel::U8(vec![0; 64 * 64 * 64])],
        };
        let h = Hierarchy::build(&raw, &opts(32, 2, [2, 2, 2])).unwrap();
        for ((_, _, _), bytes) in h.compressed_bricks() {
            let p = decompress_brick(&bytes, 32 * 32 * 32).unwrap();
            assert!(p.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn interior_brick_matches_direct_slice() {
        let raw = ramp([96; 3]);
        let h = Hierarchy::build(&raw, &opts(32, 1, [2, 2, 2])).unwrap();
        let b = h.extract_brick(0, 0, [1, 2, 0]).unwrap();
        let g = h.grid(0, 0);
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = b[(z * 32 * 32 + y * 32 + x) as usize];
                    assert_eq!(v, g.get([32 + x, 64 + y, z]));
                }
            }
        }
    }

    #[test]
    fn constant_region_brick() {
        let raw = RawVolume {
            dims: [64; 3],
            channels: vec![RawChannel::U8(vec![5; 64 * 64 * 64])],
        };
        let h = Hierarchy::build(&raw, &opts(32, 1, [2, 2, 2])).unwrap();
        let b = h.extract_brick(0, 0, [1, 1, 1]).unwrap();
        assert_eq!(b.len(), 32768);
        assert!(b.iter().all(|&v| v == 5));
    }

    #[test]
    fn edge_brick_replicates_last_plane() {
        let raw = ramp([40; 3]);
        let h = Hierarchy::build(&raw, &opts(32, 1, [2, 2, 2])).unwrap();
        let b = h.extract_brick(0, 0, [1, 0, 0]).unwrap();
        let g = h.grid(0, 0);
        for z in 0..32u32 {
            for y in 0..32u32 {
                for x in 0..32u32 {
                    let gx = (32 + x).min(39);
                    let v = b[(z * 1024 + y * 32 + x) as usize];
                    assert_eq!(v, g.get([gx, y, z]));
                }
            }
        }
    }

    #[test]
    fn out_of_range_brick_is_rejected() {
        let raw = ramp([40; 3]);
        let h = Hierarchy::build(&raw, &opts(32, 1, [2, 2, 2])).unwrap();
        assert!(h.extract_brick(0, 0, [2, 0, 0]).is_err());
    }

    #[test]
    fn downsampling_preserves_mean() {
        let raw = ramp([64; 3]);
        let h = Hierarchy::build(&raw, &opts(16, 4, [2, 2, 2])).unwrap();
        for l in 0..3 {
            let a = h.grid(0, l).mean();
            let b = h.grid(0, l + 1).mean();
            assert!((a - b).abs() <= 0.5, "level {l}: {a} vs {b}");
        }
    }

    #[test]
    fn wide_dtype_is_range_normalized() {
        let raw = RawVolume {
            dims: [2, 1, 1],
            channels: vec![RawChannel::U16(vec![1000, 3000])],
        };
        let h = Hierarchy::build(&raw, &opts(2, 1, [2, 2, 2])).unwrap();
        assert_eq!(h.grid(0, 0).data, vec![0, 255]);
        assert_eq!(h.manifest().value_ranges[0], [1000.0, 3000.0]);
    }

    #[test]
    fn raw_bytes_must_match_dims() {
        assert!(RawVolume::from_bytes(&[0; 7], [2, 2, 2], Dtype::U8, 1).is_err());
        let v = RawVolume::from_bytes(&[0; 32], [2, 2, 2], Dtype::F32, 1).unwrap();
        assert_eq!(v.channels.len(), 1);
    }

    #[test]
    fn write_is_deterministic_and_complete() {
        let raw = ramp([40, 40, 20]);
        let h = Hierarchy::build(&raw, &opts(16, 2, [2, 2, 2])).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        h.write(a.path()).unwrap();
        h.write(b.path()).unwrap();
        let m = VolumeManifest::load(a.path()).unwrap();
        let mut files = 0;
        for (l, lvl) in m.levels.iter().enumerate() {
            let g = lvl.brick_grid;
            for z in 0..g[2] {
                for y in 0..g[1] {
                    for x in 0..g[0] {
                        let rel = m.brick_path(0, l as u32, [x, y, z]);
                        let fa = std::fs::read(a.path().join(&rel)).unwrap();
                        let fb = std::fs::read(b.path().join(&rel)).unwrap();
                        assert_eq!(fa, fb);
                        files += 1;
                    }
                }
            }
        }
        let on_disk = walk_count(&a.path().join("c0"));
        assert_eq!(on_disk, files);
    }

    fn walk_count(dir: &std::path::Path) -> usize {
        let mut n = 0;
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                n += walk_count(&p);
            } else {
                n += 1;
            }
        }
        n
    }
}
