//! Multi-channel multi-resolution page tables over a single shared brick
//! cache, with LRU eviction.
//!
//! Every (channel slot, level) pair owns one page table. A page table entry
//! is either `UNMAPPED`, `EMPTY`, or the index of the cache slot holding the
//! brick. Cache slots are addressed by a triple (like texels of a 3D cache
//! texture); each slot's voxels are stored contiguously.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::volume::{LevelDesc, VolumeManifest};

const ENTRY_UNMAPPED: u32 = u32::MAX;
const ENTRY_EMPTY: u32 = u32::MAX - 1;

/// Maximum number of page tables addressable by the 8-bit page table id.
pub const MAX_PAGE_TABLES: u32 = 256;

/// Packed brick identifier: bits 0-7 x, 8-15 y, 16-23 z, 24-31 page table
/// id (`slot * k + level`).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BrickId(pub u32);

/// Decoded form of a [`BrickId`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct BrickKey {
    pub slot: u32,
    pub level: u32,
    pub coord: [u32; 3],
}

impl BrickId {
    /// Pack `(slot, level, coord)` given `k` levels per slot and `m` slots.
    pub fn encode(slot: u32, level: u32, coord: [u32; 3], k: u32, m: u32) -> Result<Self> {
        if m == 0 || k == 0 || m * k > MAX_PAGE_TABLES {
            return Err(Error::BrickIdRange(format!(
                "m*k = {m}*{k} exceeds {MAX_PAGE_TABLES}"
            )));
        }
        if slot >= m {
            return Err(Error::BrickIdRange(format!("slot {slot} >= {m}")));
        }
        if level >= k {
            return Err(Error::BrickIdRange(format!("level {level} >= {k}")));
        }
        if coord.iter().any(|&c| c > 0xff) {
            return Err(Error::BrickIdRange(format!(
                "coordinate {coord:?} exceeds 8 bits"
            )));
        }
        let table = slot * k + level;
        Ok(BrickId(
            table << 24 | coord[2] << 16 | coord[1] << 8 | coord[0],
        ))
    }

    pub fn page_table(self) -> u32 {
        self.0 >> 24
    }

    pub fn coord(self) -> [u32; 3] {
        [self.0 & 0xff, (self.0 >> 8) & 0xff, (self.0 >> 16) & 0xff]
    }

    pub fn decode(self, k: u32) -> BrickKey {
        let t = self.page_table();
        BrickKey {
            slot: t / k,
            level: t % k,
            coord: self.coord(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PagingConfig {
    pub brick_size: [u32; 3],
    /// Cache dimensions in bricks.
    pub cache_slots: [u32; 3],
    /// Channel slots representable at once (`m`).
    pub channel_slots: u32,
    /// Level descriptors (`k = levels.len()`).
    pub levels: Vec<LevelDesc>,
}

impl PagingConfig {
    pub fn from_manifest(
        m: &VolumeManifest,
        cache_slots: [u32; 3],
        channel_slots: u32,
    ) -> Result<Self> {
        let cfg = Self {
            brick_size: m.brick_size,
            cache_slots,
            channel_slots,
            levels: m.levels.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.levels.len() as u32;
        if self.channel_slots == 0 || k == 0 {
            return Err(Error::Config(
                "need at least one channel slot and one level".into(),
            ));
        }
        if self.channel_slots * k > MAX_PAGE_TABLES {
            return Err(Error::Config(format!(
                "m*k = {}*{k} exceeds {MAX_PAGE_TABLES} page tables",
                self.channel_slots
            )));
        }
        if k > 16 {
            return Err(Error::Config(
                "at most 16 resolution levels fit the residency mask".into(),
            ));
        }
        if self.slot_count() == 0 {
            return Err(Error::Config("cache needs at least one slot".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> u32 {
        self.levels.len() as u32
    }

    pub fn slot_count(&self) -> usize {
        self.cache_slots.iter().map(|&s| s as usize).product()
    }

    pub fn brick_voxels(&self) -> usize {
        self.brick_size.iter().map(|&s| s as usize).product()
    }

    pub fn grid(&self, level: u32) -> [u32; 3] {
        self.levels[level as usize].brick_grid
    }

    pub fn dims(&self, level: u32) -> [u32; 3] {
        self.levels[level as usize].dims
    }

    pub fn brick_id(&self, slot: u32, level: u32, coord: [u32; 3]) -> Result<BrickId> {
        if level < self.k() {
            let g = self.grid(level);
            if (0..3).any(|i| coord[i] >= g[i]) {
                return Err(Error::BrickOutOfRange { coord, grid: g });
            }
        }
        BrickId::encode(slot, level, coord, self.k(), self.channel_slots)
    }

    /// Brick containing normalized position `pos` at `level`, and the
    /// position in brick-local voxel units (voxel centers at `i + 0.5`).
    #[inline]
    pub fn locate(&self, level: u32, pos: Vec3) -> ([u32; 3], [f32; 3]) {
        let lvl = &self.levels[level as usize];
        let mut coord = [0u32; 3];
        let mut local = [0f32; 3];
        for i in 0..3 {
            let v = pos.axis(i) * lvl.dims[i] as f32;
            let b = self.brick_size[i];
            let c = ((v / b as f32).floor().max(0.0) as u32).min(lvl.brick_grid[i] - 1);
            coord[i] = c;
            local[i] = v - (c * b) as f32;
        }
        (coord, local)
    }

    /// Id of the brick of `(slot, level)` containing `pos`.
    #[inline]
    pub fn id_at(&self, slot: u32, level: u32, pos: Vec3) -> BrickId {
        let (c, _) = self.locate(level, pos);
        BrickId((slot * self.k() + level) << 24 | c[2] << 16 | c[1] << 8 | c[0])
    }

    /// Normalized-space extent of a brick (clipped to the volume).
    pub fn brick_extent(&self, level: u32, coord: [u32; 3]) -> crate::geometry::Aabb {
        let d = self.dims(level);
        let b = self.brick_size;
        let mut out = crate::geometry::Aabb::UNIT;
        for i in 0..3 {
            out.min[i] = (coord[i] * b[i]) as f64 / d[i] as f64;
            out.max[i] = ((coord[i] + 1) * b[i]).min(d[i]) as f64 / d[i] as f64;
        }
        out
    }

    pub fn slot_coord(&self, slot: u32) -> [u32; 3] {
        let [sx, sy, _] = self.cache_slots;
        [slot % sx, (slot / sx) % sy, slot / (sx * sy)]
    }
}

/// Virtual multi-resolution multi-channel address `(l, c, p)`.
#[derive(Copy, Clone, Debug)]
pub struct VirtualAddress {
    pub level: u32,
    pub slot: u32,
    pub pos: Vec3,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PageEntry {
    Unmapped,
    Empty,
    Mapped(u32),
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Translation {
    Mapped { slot: u32, local: [f32; 3] },
    Empty,
    Unmapped,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct InsertOutcome {
    pub slot: u32,
    pub evicted: Option<BrickId>,
    /// False when the brick was already resident (no-op).
    pub inserted: bool,
}

/// Server-side identity of a brick after slot -> dataset channel mapping.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BrickRequest {
    pub channel: u32,
    pub level: u32,
    pub coord: [u32; 3],
}

#[derive(Clone, Debug)]
pub struct Paging {
    cfg: PagingConfig,
    tables: Vec<Vec<u32>>,
    store: Vec<u8>,
    residents: Vec<Option<BrickId>>,
    last_used: Vec<u64>,
    provenance: Vec<u32>,
    free: Vec<u32>,
    mapping: Vec<u32>,
    dataset_channels: u32,
}

impl Paging {
    /// `mapping[slot]` is the dataset channel initially shown in each slot.
    pub fn new(cfg: PagingConfig, mapping: Vec<u32>, dataset_channels: u32) -> Result<Self> {
        cfg.validate()?;
        if mapping.len() != cfg.channel_slots as usize {
            return Err(Error::Config(format!(
                "mapping has {} entries, expected {}",
                mapping.len(),
                cfg.channel_slots
            )));
        }
        if let Some(&c) = mapping.iter().find(|&&c| c >= dataset_channels) {
            return Err(Error::ChannelRange {
                channel: c,
                count: dataset_channels,
            });
        }
        let mut tables = Vec::new();
        for _ in 0..cfg.channel_slots {
            for lvl in &cfg.levels {
                tables.push(vec![ENTRY_UNMAPPED; lvl.brick_count() as usize]);
            }
        }
        let n = cfg.slot_count();
        Ok(Self {
            store: vec![0; n * cfg.brick_voxels()],
            residents: vec![None; n],
            last_used: vec![0; n],
            provenance: vec![u32::MAX; n],
            free: (0..n as u32).rev().collect(),
            tables,
            mapping,
            dataset_channels,
            cfg,
        })
    }

    pub fn config(&self) -> &PagingConfig {
        &self.cfg
    }

    fn table_index(&self, slot: u32, level: u32) -> usize {
        (slot * self.cfg.k() + level) as usize
    }

    fn entry_index(&self, level: u32, coord: [u32; 3]) -> usize {
        let g = self.cfg.grid(level);
        ((coord[2] * g[1] + coord[1]) * g[0] + coord[0]) as usize
    }

    fn raw_entry(&self, slot: u32, level: u32, coord: [u32; 3]) -> u32 {
        self.tables[self.table_index(slot, level)][self.entry_index(level, coord)]
    }

    fn set_raw_entry(&mut self, slot: u32, level: u32, coord: [u32; 3], v: u32) {
        let t = self.table_index(slot, level);
        let e = self.entry_index(level, coord);
        self.tables[t][e] = v;
    }

    pub fn entry(&self, slot: u32, level: u32, coord: [u32; 3]) -> PageEntry {
        match self.raw_entry(slot, level, coord) {
            ENTRY_UNMAPPED => PageEntry::Unmapped,
            ENTRY_EMPTY => PageEntry::Empty,
            s => PageEntry::Mapped(s),
        }
    }

    pub fn entry_of(&self, id: BrickId) -> PageEntry {
        let k = id.decode(self.cfg.k());
        self.entry(k.slot, k.level, k.coord)
    }

    #[inline]
    pub fn is_resident(&self, slot: u32, level: u32, coord: [u32; 3]) -> bool {
        self.raw_entry(slot, level, coord) < ENTRY_EMPTY
    }

    pub fn translate(&self, addr: VirtualAddress) -> Translation {
        self.translate_pos(addr.slot, addr.level, addr.pos)
    }

    #[inline]
    pub fn translate_pos(&self, slot: u32, level: u32, pos: Vec3) -> Translation {
        let (coord, local) = self.cfg.locate(level, pos);
        match self.raw_entry(slot, level, coord) {
            ENTRY_UNMAPPED => Translation::Unmapped,
            ENTRY_EMPTY => Translation::Empty,
            s => Translation::Mapped { slot: s, local },
        }
    }

    /// Make `payload` resident. Reclaims the least recently used slot when
    /// the cache is full; ties go to the lowest slot index.
    pub fn insert_brick(
        &mut self,
        id: BrickId,
        payload: &[u8],
        frame: u64,
        source_channel: u32,
    ) -> Result<InsertOutcome> {
        if payload.len() != self.cfg.brick_voxels() {
            return Err(Error::Decode(format!(
                "payload has {} voxels, expected {}",
                payload.len(),
                self.cfg.brick_voxels()
            )));
        }
        let key = id.decode(self.cfg.k());
        if key.slot >= self.cfg.channel_slots || key.level >= self.cfg.k() {
            return Err(Error::BrickIdRange(format!("{id:?}")));
        }
        let g = self.cfg.grid(key.level);
        if (0..3).any(|i| key.coord[i] >= g[i]) {
            return Err(Error::BrickOutOfRange {
                coord: key.coord,
                grid: g,
            });
        }
        if let PageEntry::Mapped(s) = self.entry(key.slot, key.level, key.coord) {
            return Ok(InsertOutcome {
                slot: s,
                evicted: None,
                inserted: false,
            });
        }
        let (slot, evicted) = match self.free.pop() {
            Some(s) => (s, None),
            None => {
                let victim = self.lru_victim().expect("full cache has an occupied slot");
                let old = self.residents[victim as usize].take().unwrap();
                let ok = old.decode(self.cfg.k());
                self.set_raw_entry(ok.slot, ok.level, ok.coord, ENTRY_UNMAPPED);
                (victim, Some(old))
            }
        };
        let n = self.cfg.brick_voxels();
        self.store[slot as usize * n..(slot as usize + 1) * n].copy_from_slice(payload);
        self.residents[slot as usize] = Some(id);
        self.last_used[slot as usize] = frame;
        self.provenance[slot as usize] = source_channel;
        self.set_raw_entry(key.slot, key.level, key.coord, slot);
        Ok(InsertOutcome {
            slot,
            evicted,
            inserted: true,
        })
    }

    fn lru_victim(&self) -> Option<u32> {
        self.residents
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_some())
            .min_by_key(|(i, _)| (self.last_used[*i], *i))
            .map(|(i, _)| i as u32)
    }

    pub fn mark_used(&mut self, slot: u32, frame: u64) {
        let e = &mut self.last_used[slot as usize];
        *e = (*e).max(frame);
    }

    /// Record that a brick holds no data (all zero). Only unmapped entries
    /// change.
    pub fn mark_empty(&mut self, id: BrickId) {
        let k = id.decode(self.cfg.k());
        if self.raw_entry(k.slot, k.level, k.coord) == ENTRY_UNMAPPED {
            self.set_raw_entry(k.slot, k.level, k.coord, ENTRY_EMPTY);
        }
    }

    pub fn slot_data(&self, slot: u32) -> &[u8] {
        let n = self.cfg.brick_voxels();
        &self.store[slot as usize * n..(slot as usize + 1) * n]
    }

    /// Trilinear sample inside one cache slot.
    #[inline]
    pub fn sample(&self, slot: u32, local: [f32; 3]) -> f32 {
        sample_brick(self.slot_data(slot), self.cfg.brick_size, local)
    }

    pub fn resident(&self, slot: u32) -> Option<BrickId> {
        self.residents[slot as usize]
    }

    pub fn last_used(&self, slot: u32) -> u64 {
        self.last_used[slot as usize]
    }

    /// Dataset channel the payload in `slot` was fetched from.
    pub fn provenance(&self, slot: u32) -> Option<u32> {
        self.residents[slot as usize].map(|_| self.provenance[slot as usize])
    }

    pub fn occupied(&self) -> usize {
        self.residents.iter().filter(|r| r.is_some()).count()
    }

    pub fn residents(&self) -> impl Iterator<Item = (u32, BrickId)> + '_ {
        self.residents
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|id| (i as u32, id)))
    }

    pub fn channel_mapping(&self) -> &[u32] {
        &self.mapping
    }

    /// Point `slot` at another dataset channel. All of the slot's page
    /// tables reset to `UNMAPPED` and its cache slots are freed; the freed
    /// brick ids are returned.
    pub fn set_channel_mapping(&mut self, slot: u32, dataset_channel: u32) -> Result<Vec<BrickId>> {
        if dataset_channel >= self.dataset_channels {
            return Err(Error::ChannelRange {
                channel: dataset_channel,
                count: self.dataset_channels,
            });
        }
        if slot >= self.cfg.channel_slots {
            return Err(Error::Config(format!("slot {slot} out of range")));
        }
        self.mapping[slot as usize] = dataset_channel;
        for level in 0..self.cfg.k() {
            let t = self.table_index(slot, level);
            self.tables[t].fill(ENTRY_UNMAPPED);
        }
        let k = self.cfg.k();
        let mut freed = Vec::new();
        for s in 0..self.residents.len() {
            if let Some(id) = self.residents[s] {
                if id.decode(k).slot == slot {
                    self.residents[s] = None;
                    self.free.push(s as u32);
                    freed.push(id);
                }
            }
        }
        // keep lowest-index-first allocation order
        self.free.sort_unstable_by(|a, b| b.cmp(a));
        Ok(freed)
    }

    /// Translate a brick id into the server-side request through the
    /// current slot mapping.
    pub fn request_for(&self, id: BrickId) -> BrickRequest {
        let k = id.decode(self.cfg.k());
        BrickRequest {
            channel: self.mapping[k.slot as usize],
            level: k.level,
            coord: k.coord,
        }
    }

    /// Full scan: mapped entries and occupied slots are in bijection.
    pub fn check_bijection(&self) -> std::result::Result<(), String> {
        let k = self.cfg.k();
        let mut mapped = 0usize;
        for slot in 0..self.cfg.channel_slots {
            for level in 0..k {
                let g = self.cfg.grid(level);
                for z in 0..g[2] {
                    for y in 0..g[1] {
                        for x in 0..g[0] {
                            if let PageEntry::Mapped(s) = self.entry(slot, level, [x, y, z]) {
                                mapped += 1;
                                let r = self.residents[s as usize].ok_or_else(|| {
                                    format!("entry {slot}/{level}/{x},{y},{z} -> free slot {s}")
                                })?;
                                let rk = r.decode(k);
                                if rk.slot != slot || rk.level != level || rk.coord != [x, y, z] {
                                    return Err(format!("slot {s} holds {rk:?}, entry is {slot}/{level}/{x},{y},{z}"));
                                }
                            }
                        }
                    }
                }
            }
        }
        let occ = self.occupied();
        if occ != mapped {
            return Err(format!("{occ} occupied slots vs {mapped} mapped entries"));
        }
        if occ + self.free.len() != self.residents.len() {
            return Err("free list out of sync".into());
        }
        Ok(())
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Trilinear interpolation inside one brick (x-fastest voxels). `local` is
/// in brick voxel units with voxel centers at `i + 0.5`; coordinates are
/// clamped to the brick so no neighbouring brick is read.
#[inline]
pub fn sample_brick(data: &[u8], brick: [u32; 3], local: [f32; 3]) -> f32 {
    let mut i0 = [0usize; 3];
    let mut t = [0f32; 3];
    for a in 0..3 {
        let hi = (brick[a] - 1) as f32;
        let c = (local[a] - 0.5).clamp(0.0, hi);
        let i = (c.floor() as usize).min(brick[a] as usize - 2);
        i0[a] = i;
        t[a] = c - i as f32;
    }
    let sx = 1usize;
    let sy = brick[0] as usize;
    let sz = sy * brick[1] as usize;
    let base = i0[2] * sz + i0[1] * sy + i0[0];
    let v = |o: usize| data[base + o] as f32;
    let c00 = lerp(v(0), v(sx), t[0]);
    let c10 = lerp(v(sy), v(sy + sx), t[0]);
    let c01 = lerp(v(sz), v(sz + sx), t[0]);
    let c11 = lerp(v(sz + sy), v(sz + sy + sx), t[0]);
    let c0 = lerp(c00, c10, t[1]);
    let c1 = lerp(c01, c11, t[1]);
    lerp(c0, c1, t[2])
}
