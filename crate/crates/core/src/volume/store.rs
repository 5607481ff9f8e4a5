use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use thiserror::Error;

use super::{decompress_brick, Hierarchy, VolumeManifest};

const RANGE_BLOCK: u32 = 8;

/// Dense u8 grid of one (channel, level), x-fastest.
#[derive(Debug)]
pub struct LevelGrid {
    pub dims: [u32; 3],
    pub data: Vec<u8>,
    ranges: OnceLock<RangeIndex>,
}

impl Clone for LevelGrid {
    fn clone(&self) -> Self {
        Self::new(self.dims, self.data.clone())
    }
}

impl LevelGrid {
    pub fn new(dims: [u32; 3], data: Vec<u8>) -> Self {
        debug_assert_eq!(
            data.len(),
            dims.iter().map(|&d| d as usize).product::<usize>()
        );
        Self {
            dims,
            data,
            ranges: OnceLock::new(),
        }
    }

    #[inline]
    pub fn get(&self, p: [u32; 3]) -> u8 {
        let d = self.dims;
        self.data[((p[2] as usize * d[1] as usize) + p[1] as usize) * d[0] as usize + p[0] as usize]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Min/max over the half-open voxel box `[lo, hi)` (clipped to the grid).
    /// Returns `None` for an empty box.
    pub fn region_minmax(&self, lo: [u32; 3], hi: [u32; 3]) -> Option<(u8, u8)> {
        let hi = [0, 1, 2].map(|i| hi[i].min(self.dims[i]));
        if (0..3).any(|i| lo[i] >= hi[i]) {
            return None;
        }
        let idx = self.ranges.get_or_init(|| RangeIndex::build(self));
        let (mut mn, mut mx) = (u8::MAX, u8::MIN);
        let b0 = lo.map(|v| v / RANGE_BLOCK);
        let b1 = [0, 1, 2].map(|i| (hi[i] - 1) / RANGE_BLOCK);
        for bz in b0[2]..=b1[2] {
            for by in b0[1]..=b1[1] {
                for bx in b0[0]..=b1[0] {
                    let blo = [bx * RANGE_BLOCK, by * RANGE_BLOCK, bz * RANGE_BLOCK];
                    let bhi = [0, 1, 2].map(|i| (blo[i] + RANGE_BLOCK).min(self.dims[i]));
                    let inside = (0..3).all(|i| lo[i] <= blo[i] && bhi[i] <= hi[i]);
                    if inside {
                        let (a, b) = idx.get([bx, by, bz]);
                        mn = mn.min(a);
                        mx = mx.max(b);
                    } else {
                        let s = [0, 1, 2].map(|i| blo[i].max(lo[i]));
                        let e = [0, 1, 2].map(|i| bhi[i].min(hi[i]));
                        for z in s[2]..e[2] {
                            for y in s[1]..e[1] {
                                for x in s[0]..e[0] {
                                    let v = self.get([x, y, z]);
                                    mn = mn.min(v);
                                    mx = mx.max(v);
                                }
                            }
                        }
                    }
                }
            }
        }
        Some((mn, mx))
    }
}

#[derive(Debug)]
struct RangeIndex {
    blocks: [u32; 3],
    minmax: Vec<(u8, u8)>,
}

impl RangeIndex {
    fn build(g: &LevelGrid) -> Self {
        let blocks = g.dims.map(|d| d.div_ceil(RANGE_BLOCK));
        let mut minmax = vec![(u8::MAX, u8::MIN); blocks.iter().map(|&b| b as usize).product()];
        for z in 0..g.dims[2] {
            for y in 0..g.dims[1] {
                for x in 0..g.dims[0] {
                    let v = g.get([x, y, z]);
                    let b = ((z / RANGE_BLOCK) * blocks[1] + y / RANGE_BLOCK) * blocks[0]
                        + x / RANGE_BLOCK;
                    let e = &mut minmax[b as usize];
                    e.0 = e.0.min(v);
                    e.1 = e.1.max(v);
                }
            }
        }
        Self { blocks, minmax }
    }

    fn get(&self, b: [u32; 3]) -> (u8, u8) {
        self.minmax[((b[2] * self.blocks[1] + b[1]) * self.blocks[0] + b[0]) as usize]
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("not found")]
    NotFound,
    #[error("region queries not supported")]
    Unsupported,
    #[error("storage error: {0}")]
    Io(String),
}

/// Server-side view of a bricked dataset.
pub trait BrickStore: Send + Sync {
    fn manifest(&self) -> &VolumeManifest;

    /// Raw LZ4 bytes of one brick, exactly as produced by ingest.
    fn brick_bytes(&self, channel: u32, level: u32, coord: [u32; 3])
        -> Result<Vec<u8>, StoreError>;

    /// Min/max over the half-open voxel box `[lo, hi)` of one level.
    fn region_minmax(
        &self,
        channel: u32,
        level: u32,
        lo: [u32; 3],
        hi: [u32; 3],
    ) -> Result<(u8, u8), StoreError>;
}

fn check_region(
    m: &VolumeManifest,
    channel: u32,
    level: u32,
    lo: [u32; 3],
    hi: [u32; 3],
) -> Result<(), StoreError> {
    if channel >= m.channels || level as usize >= m.levels.len() {
        return Err(StoreError::NotFound);
    }
    let dims = m.levels[level as usize].dims;
    if (0..3).any(|i| lo[i] >= hi[i] || lo[i] >= dims[i]) {
        return Err(StoreError::NotFound);
    }
    Ok(())
}

/// Holds a built hierarchy and its compressed bricks in memory.
pub struct MemoryStore {
    hierarchy: Arc<Hierarchy>,
    manifest: VolumeManifest,
    bricks: HashMap<(u32, u32, [u32; 3]), Vec<u8>>,
}

impl MemoryStore {
    pub fn new(hierarchy: Arc<Hierarchy>) -> Self {
        let bricks = hierarchy.compressed_bricks().into_iter().collect();
        let manifest = hierarchy.manifest().clone();
        Self {
            hierarchy,
            manifest,
            bricks,
        }
    }

    /// Disable the region min/max capability (plain file server behaviour).
    pub fn plain_files(mut self) -> Self {
        self.manifest.metadata_endpoint = false;
        self
    }

    pub fn hierarchy(&self) -> &Arc<Hierarchy> {
        &self.hierarchy
    }
}

impl BrickStore for MemoryStore {
    fn manifest(&self) -> &VolumeManifest {
        &self.manifest
    }

    fn brick_bytes(
        &self,
        channel: u32,
        level: u32,
        coord: [u32; 3],
    ) -> Result<Vec<u8>, StoreError> {
        self.bricks
            .get(&(channel, level, coord))
            .cloned()
            .ok_or(StoreError::NotFound)
    }

    fn region_minmax(
        &self,
        channel: u32,
        level: u32,
        lo: [u32; 3],
        hi: [u32; 3],
    ) -> Result<(u8, u8), StoreError> {
        if !self.manifest.metadata_endpoint {
            return Err(StoreError::Unsupported);
        }
        check_region(&self.manifest, channel, level, lo, hi)?;
        self.hierarchy
            .grid(channel, level)
            .region_minmax(lo, hi)
            .ok_or(StoreError::NotFound)
    }
}

/// Serves an ingest output directory. Region queries decode whole levels on
/// first use and keep them.
pub struct DiskStore {
    dir: PathBuf,
    manifest: VolumeManifest,
    grids: Mutex<HashMap<(u32, u32), Arc<LevelGrid>>>,
}

impl DiskStore {
    pub fn open(dir: &Path) -> crate::Result<Self> {
        let manifest = VolumeManifest::load(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            grids: Mutex::new(HashMap::new()),
        })
    }

    pub fn plain_files(mut self) -> Self {
        self.manifest.metadata_endpoint = false;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn level_grid(&self, channel: u32, level: u32) -> Result<Arc<LevelGrid>, StoreError> {
        if let Some(g) = self.grids.lock().unwrap().get(&(channel, level)) {
            return Ok(g.clone());
        }
        let m = &self.manifest;
        let lvl = &m.levels[level as usize];
        let b = m.brick_size;
        let d = lvl.dims;
        let mut data = vec![0u8; lvl.voxel_count() as usize];
        for bz in 0..lvl.brick_grid[2] {
            for by in 0..lvl.brick_grid[1] {
                for bx in 0..lvl.brick_grid[0] {
                    let bytes = self.brick_bytes(channel, level, [bx, by, bz])?;
                    let payload = decompress_brick(&bytes, m.brick_voxels())
                        .map_err(|e| StoreError::Io(e.to_string()))?;
                    for z in 0..b[2] {
                        let gz = bz * b[2] + z;
                        if gz >= d[2] {
                            break;
                        }
                        for y in 0..b[1] {
                            let gy = by * b[1] + y;
                            if gy >= d[1] {
                                break;
                            }
                            let src = ((z * b[1] + y) * b[0]) as usize;
                            let gx0 = bx * b[0];
                            let n = b[0].min(d[0] - gx0) as usize;
                            let dst = ((gz as usize * d[1] as usize) + gy as usize) * d[0] as usize
                                + gx0 as usize;
                            data[dst..dst + n].copy_from_slice(&payload[src..src + n]);
                        }
                    }
                }
            }
        }
        let g = Arc::new(LevelGrid::new(d, data));
        self.grids
            .lock()
            .unwrap()
            .insert((channel, level), g.clone());
        Ok(g)
    }
}

impl BrickStore for DiskStore {
    fn manifest(&self) -> &VolumeManifest {
        &self.manifest
    }

    fn brick_bytes(
        &self,
        channel: u32,
        level: u32,
        coord: [u32; 3],
    ) -> Result<Vec<u8>, StoreError> {
        if !self.manifest.contains_brick(channel, level, coord) {
            return Err(StoreError::NotFound);
        }
        let path = self
            .dir
            .join(self.manifest.brick_path(channel, level, coord));
        std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::NotFound,
            _ => StoreError::Io(format!("{}: {e}", path.display())),
        })
    }

    fn region_minmax(
        &self,
        channel: u32,
        level: u32,
        lo: [u32; 3],
        hi: [u32; 3],
    ) -> Result<(u8, u8), StoreError> {
        if !self.manifest.metadata_endpoint {
            return Err(StoreError::Unsupported);
        }
        check_region(&self.manifest, channel, level, lo, hi)?;
        self.level_grid(channel, level)?
            .region_minmax(lo, hi)
            .ok_or(StoreError::NotFound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute(g: &LevelGrid, lo: [u32; 3], hi: [u32; 3]) -> (u8, u8) {
        let (mut a, mut b) = (255u8, 0u8);
        for z in lo[2]..hi[2].min(g.dims[2]) {
            for y in lo[1]..hi[1].min(g.dims[1]) {
                for x in lo[0]..hi[0].min(g.dims[0]) {
                    let v = g.get([x, y, z]);
                    a = a.min(v);
                    b = b.max(v);
                }
            }
        }
        (a, b)
    }

    #[test]
    fn region_minmax_matches_dense_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dims = [37, 29, 21];
        let data: Vec<u8> = (0..37 * 29 * 21).map(|_| rng.gen()).collect();
        let g = LevelGrid::new(dims, data);
        for _ in 0..200 {
            let lo = dims.map(|d| rng.gen_range(0..d));
            let hi = [0, 1, 2].map(|i| rng.gen_range(lo[i] + 1..=dims[i] + 3));
            assert_eq!(g.region_minmax(lo, hi), Some(brute(&g, lo, hi)));
        }
    }

    #[test]
    fn empty_region_is_none() {
        let g = LevelGrid::new([4, 4, 4], vec![1; 64]);
        assert_eq!(g.region_minmax([2, 0, 0], [2, 4, 4]), None);
    }
}
