//! The ray-guided loop: apply finished downloads, render, and request what
//! the rays found missing.

pub mod protocol;

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::octree::{NodeAddress, OctreeConfig, ResidencyOctree};
use crate::paging::{BrickId, BrickRequest, PageEntry, Paging, PagingConfig};
use crate::render::{
    brick_metadata_boxes, render_classic, render_pagetable, render_residency, BrickMetadata,
    Camera, ChannelSettings, FrameOutput, RenderConfig, Request,
};
use crate::service::{FetchError, FetchPool, RetryPolicy, Transport};
use crate::volume::{decompress_brick, VolumeManifest};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Residency,
    #[serde(alias = "page-table")]
    Pagetable,
    #[serde(alias = "classic")]
    Octree,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Residency, Method::Pagetable, Method::Octree];

    pub fn name(self) -> &'static str {
        match self {
            Method::Residency => "residency",
            Method::Pagetable => "pagetable",
            Method::Octree => "octree",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residency" | "ours" => Ok(Method::Residency),
            "pagetable" | "page-table" => Ok(Method::Pagetable),
            "octree" | "classic" => Ok(Method::Octree),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub method: Method,
    /// Cache extent in bricks per axis.
    pub cache_slots: [u32; 3],
    /// Dataset channel shown in each channel slot.
    pub mapping: Vec<u32>,
    pub octree: OctreeConfig,
    pub render: RenderConfig,
    pub fetch_workers: usize,
    pub retry: RetryPolicy,
    /// Wait for every download issued by the previous frame before the
    /// next one starts. Makes frame sequences reproducible.
    pub synchronous: bool,
    /// Full structural scans after every frame.
    pub check_invariants: bool,
    /// Decoded bricks kept for client-side metadata computation.
    pub metadata_brick_cache: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            method: Method::Residency,
            cache_slots: [16, 16, 8],
            mapping: vec![0],
            octree: OctreeConfig::default(),
            render: RenderConfig::default(),
            fetch_workers: 8,
            retry: RetryPolicy::default(),
            synchronous: true,
            check_invariants: cfg!(debug_assertions),
            metadata_brick_cache: 256,
        }
    }
}

/// One row of the per-frame statistics history.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct FrameRecord {
    pub frame: u64,
    pub ms: f64,
    pub required_bricks: usize,
    pub cache_bytes: usize,
    /// Requests the renderer emitted this frame.
    pub requests: usize,
    /// Of those, newly sent to the server.
    pub issued: usize,
    /// Downloads applied at the start of this frame.
    pub served: usize,
    pub pending: usize,
    pub samples_skipped: u64,
    pub traversal_steps: u64,
}

enum Payload {
    Brick(Vec<u8>),
    Range(u8, u8),
    Nodes(Vec<(NodeAddress, u8, u8)>),
}

struct Completion {
    request: Request,
    generation: u64,
    channel: u32,
    outcome: std::result::Result<Payload, FetchError>,
}

/// Min/max over voxel boxes, from the server when it supports metadata
/// queries and otherwise from decoded bricks.
struct MetadataResolver {
    transport: Arc<dyn Transport>,
    manifest: VolumeManifest,
    server_side: AtomicBool,
    retry: RetryPolicy,
    capacity: usize,
    bricks: Mutex<(
        HashMap<(u32, u32, [u32; 3]), Arc<Vec<u8>>>,
        VecDeque<(u32, u32, [u32; 3])>,
    )>,
}

impl MetadataResolver {
    fn brick(
        &self,
        channel: u32,
        level: u32,
        coord: [u32; 3],
    ) -> std::result::Result<Arc<Vec<u8>>, FetchError> {
        let key = (channel, level, coord);
        if let Some(b) = self.bricks.lock().unwrap().0.get(&key) {
            return Ok(b.clone());
        }
        let bytes = self.retry.run(|| {
            self.transport.brick(BrickRequest {
                channel,
                level,
                coord,
            })
        })?;
        let data = Arc::new(
            decompress_brick(&bytes, self.manifest.brick_voxels())
                .map_err(|e| FetchError::Corrupt(e.to_string()))?,
        );
        let mut g = self.bricks.lock().unwrap();
        if g.0.insert(key, data.clone()).is_none() {
            g.1.push_back(key);
        }
        while g.1.len() > self.capacity {
            if let Some(old) = g.1.pop_front() {
                g.0.remove(&old);
            }
        }
        Ok(data)
    }

    fn region_from_bricks(
        &self,
        channel: u32,
        level: u32,
        lo: [u32; 3],
        hi: [u32; 3],
    ) -> std::result::Result<(u8, u8), FetchError> {
        let b = self.manifest.brick_size;
        let (mut mn, mut mx) = (u8::MAX, u8::MIN);
        let blo: [u32; 3] = std::array::from_fn(|i| lo[i] / b[i]);
        let bhi: [u32; 3] = std::array::from_fn(|i| (hi[i] - 1) / b[i]);
        for bz in blo[2]..=bhi[2] {
            for by in blo[1]..=bhi[1] {
                for bx in blo[0]..=bhi[0] {
                    let coord = [bx, by, bz];
                    let data = self.brick(channel, level, coord)?;
                    let org: [u32; 3] = std::array::from_fn(|i| coord[i] * b[i]);
                    let a: [u32; 3] = std::array::from_fn(|i| lo[i].max(org[i]) - org[i]);
                    let z: [u32; 3] = std::array::from_fn(|i| hi[i].min(org[i] + b[i]) - org[i]);
                    for lz in a[2]..z[2] {
                        for ly in a[1]..z[1] {
                            let row = ((lz * b[1] + ly) * b[0]) as usize;
                            for &v in &data[row + a[0] as usize..row + z[0] as usize] {
                                mn = mn.min(v);
                                mx = mx.max(v);
                            }
                        }
                    }
                }
            }
        }
        Ok((mn, mx))
    }

    fn region(
        &self,
        channel: u32,
        level: u32,
        lo: [u32; 3],
        hi: [u32; 3],
    ) -> std::result::Result<(u8, u8), FetchError> {
        if self.server_side.load(Ordering::Relaxed) {
            match self
                .retry
                .run(|| self.transport.region_minmax(channel, level, lo, hi))
            {
                Err(FetchError::Unsupported) => {
                    log::info!("server has no metadata endpoint; computing metadata from bricks");
                    self.server_side.store(false, Ordering::Relaxed);
                }
                r => return r,
            }
        }
        self.region_from_bricks(channel, level, lo, hi)
    }

    fn union(
        &self,
        channel: u32,
        boxes: &[(u32, [u32; 3], [u32; 3])],
    ) -> std::result::Result<(u8, u8), FetchError> {
        let (mut mn, mut mx) = (u8::MAX, u8::MIN);
        for &(level, lo, hi) in boxes {
            if (0..3).any(|i| lo[i] >= hi[i]) {
                continue;
            }
            let (a, b) = self.region(channel, level, lo, hi)?;
            mn = mn.min(a);
            mx = mx.max(b);
        }
        if mn > mx {
            return Err(FetchError::NotFound);
        }
        Ok((mn, mx))
    }

    fn subtree(
        &self,
        pc: &PagingConfig,
        channel: u32,
        node: NodeAddress,
        leaf_depth: u32,
    ) -> std::result::Result<Vec<(NodeAddress, u8, u8)>, FetchError> {
        let mut err = None;
        let nodes = ResidencyOctree::compute_subtree_metadata(pc, node, leaf_depth, |l, lo, hi| {
            if (0..3).any(|i| lo[i] >= hi[i]) {
                return Some((u8::MAX, u8::MIN));
            }
            self.region(channel, l, lo, hi)
                .map_err(|e| err = Some(e))
                .ok()
        });
        match (nodes, err) {
            (_, Some(e)) => Err(e),
            (Some(n), None) if n.iter().all(|&(_, a, b)| a <= b) => Ok(n),
            _ => Err(FetchError::NotFound),
        }
    }
}

/// Owns the cache, the page tables, the octree and the download pool.
pub struct Session {
    cfg: SessionConfig,
    manifest: VolumeManifest,
    transport: Arc<dyn Transport>,
    resolver: Arc<MetadataResolver>,
    paging: Paging,
    octree: ResidencyOctree,
    brick_meta: BrickMetadata,
    pool: FetchPool<Completion>,
    pending: HashSet<Request>,
    generation: Vec<u64>,
    frame: u64,
    history: Vec<FrameRecord>,
    last_hash: Option<u64>,
    quiet_frames: u32,
}

impl Session {
    pub fn new(transport: Arc<dyn Transport>, cfg: SessionConfig) -> Result<Self> {
        let manifest = transport.manifest()?;
        let m = cfg.mapping.len() as u32;
        let pc = PagingConfig::from_manifest(&manifest, cfg.cache_slots, m)?;
        let paging = Paging::new(pc, cfg.mapping.clone(), manifest.channels)?;
        let octree = ResidencyOctree::new(OctreeConfig {
            channel_slots: m,
            ..cfg.octree
        })?;
        cfg.render.validate(octree.depth())?;
        let resolver = Arc::new(MetadataResolver {
            transport: transport.clone(),
            server_side: AtomicBool::new(manifest.metadata_endpoint),
            manifest: manifest.clone(),
            retry: cfg.retry,
            capacity: cfg.metadata_brick_cache.max(8),
            bricks: Mutex::new((HashMap::new(), VecDeque::new())),
        });
        let brick_meta = BrickMetadata::new(paging.config(), cfg.octree.homogeneity_epsilon);
        Ok(Self {
            pool: FetchPool::new(cfg.fetch_workers),
            generation: vec![0; m as usize],
            manifest,
            transport,
            resolver,
            paging,
            octree,
            brick_meta,
            pending: HashSet::new(),
            frame: 0,
            history: Vec::new(),
            last_hash: None,
            quiet_frames: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &VolumeManifest {
        &self.manifest
    }

    pub fn paging(&self) -> &Paging {
        &self.paging
    }

    pub fn octree(&self) -> &ResidencyOctree {
        &self.octree
    }

    pub fn frame_counter(&self) -> u64 {
        self.frame
    }

    pub fn history(&self) -> &[FrameRecord] {
        &self.history
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Two consecutive frames without requests and with the same image.
    pub fn converged(&self) -> bool {
        self.quiet_frames >= 2
    }

    pub fn set_render_config(&mut self, render: RenderConfig) -> Result<()> {
        render.validate(self.octree.depth())?;
        self.cfg.render = render;
        Ok(())
    }

    pub fn render_config(&self) -> &RenderConfig {
        &self.cfg.render
    }

    fn submit(&mut self, request: Request) {
        let k = self.paging.config().k();
        let slot = match request {
            Request::Brick(id) | Request::BrickMetadata(id) => id.decode(k).slot,
            Request::NodeMetadata { slot, .. } => slot,
        };
        let generation = self.generation[slot as usize];
        let channel = self.paging.channel_mapping()[slot as usize];
        let transport = self.transport.clone();
        let resolver = self.resolver.clone();
        let retry = self.cfg.retry;
        let voxels = self.manifest.brick_voxels();
        let pc = self.paging.config().clone();
        let leaf_depth = match request {
            Request::NodeMetadata { node, .. } => self.octree.metadata_group(node).1,
            _ => 0,
        };
        let brick_req = match request {
            Request::Brick(id) => Some(self.paging.request_for(id)),
            _ => None,
        };
        self.pending.insert(request);
        self.pool.submit(move || {
            let outcome = match request {
                Request::Brick(_) => {
                    let req = brick_req.expect("brick request");
                    retry.run(|| transport.brick(req)).and_then(|bytes| {
                        decompress_brick(&bytes, voxels)
                            .map(Payload::Brick)
                            .map_err(|e| FetchError::Corrupt(e.to_string()))
                    })
                }
                Request::NodeMetadata { node, .. } => resolver
                    .subtree(&pc, channel, node, leaf_depth)
                    .map(Payload::Nodes),
                Request::BrickMetadata(id) => {
                    let key = id.decode(pc.k());
                    resolver
                        .union(channel, &brick_metadata_boxes(&pc, key.level, key.coord))
                        .map(|(a, b)| Payload::Range(a, b))
                }
            };
            Completion {
                request,
                generation,
                channel,
                outcome,
            }
        });
    }

    fn apply(&mut self, c: Completion) -> Result<bool> {
        let k = self.paging.config().k();
        let slot = match c.request {
            Request::Brick(id) | Request::BrickMetadata(id) => id.decode(k).slot,
            Request::NodeMetadata { slot, .. } => slot,
        };
        if c.generation != self.generation[slot as usize] {
            return Ok(false);
        }
        self.pending.remove(&c.request);
        let payload = match c.outcome {
            Ok(p) => p,
            Err(e) => {
                log::warn!("request {:?} failed: {e}", c.request);
                return Ok(false);
            }
        };
        match (c.request, payload) {
            (Request::Brick(id), Payload::Brick(data)) => {
                if self.paging.entry_of(id) != PageEntry::Unmapped {
                    return Ok(false);
                }
                if self.cfg.method == Method::Pagetable && data.iter().all(|&v| v == 0) {
                    self.paging.mark_empty(id);
                    return Ok(true);
                }
                let out = self.paging.insert_brick(id, &data, self.frame, c.channel)?;
                if out.inserted {
                    self.octree.on_brick_inserted(self.paging.config(), id);
                }
                if let Some(victim) = out.evicted {
                    self.octree.on_brick_evicted(&self.paging, victim);
                }
            }
            (Request::NodeMetadata { slot, .. }, Payload::Nodes(nodes)) => {
                for (node, a, b) in nodes {
                    self.octree.set_node_metadata(node, slot, a, b)?;
                }
            }
            (Request::BrickMetadata(id), Payload::Range(a, b)) => self.brick_meta.set(id, a, b),
            _ => unreachable!("payload kind follows request kind"),
        }
        Ok(true)
    }

    fn drain(&mut self) -> Result<usize> {
        let mut done = if self.cfg.synchronous {
            self.pool.wait_all()
        } else {
            self.pool.drain_ready()
        };
        done.sort_by_key(|(seq, _)| *seq);
        let mut served = 0;
        for (_, c) in done {
            if self.apply(c)? {
                served += 1;
            }
        }
        Ok(served)
    }

    /// Render without touching the cache or issuing requests.
    pub fn render(&self, cam: &Camera, channels: &[ChannelSettings]) -> Result<FrameOutput> {
        match self.cfg.method {
            Method::Residency => {
                render_residency(&self.paging, &self.octree, cam, channels, &self.cfg.render)
            }
            Method::Pagetable => render_pagetable(&self.paging, cam, channels, &self.cfg.render),
            Method::Octree => render_classic(
                &self.paging,
                &self.brick_meta,
                cam,
                channels,
                &self.cfg.render,
            ),
        }
    }

    /// One iteration of the ray-guided loop.
    pub fn step_frame(
        &mut self,
        cam: &Camera,
        channels: &[ChannelSettings],
    ) -> Result<FrameOutput> {
        let start = Instant::now();
        let served = self.drain()?;
        let out = self.render(cam, channels)?;
        for &id in &out.used_bricks {
            if let PageEntry::Mapped(s) = self.paging.entry_of(id) {
                self.paging.mark_used(s, self.frame);
            }
        }
        let mut issued = 0;
        for &r in &out.requests {
            if !self.pending.contains(&r) {
                self.submit(r);
                issued += 1;
            }
        }
        if self.cfg.check_invariants {
            self.check_invariants().map_err(Error::Config)?;
        }
        let hash = out.image.content_hash();
        if out.requests.is_empty() && self.last_hash == Some(hash) {
            self.quiet_frames += 1;
        } else if out.requests.is_empty() {
            self.quiet_frames = 1;
        } else {
            self.quiet_frames = 0;
        }
        self.last_hash = Some(hash);
        self.history.push(FrameRecord {
            frame: self.frame,
            ms: start.elapsed().as_secs_f64() * 1e3,
            required_bricks: out.stats.required_bricks,
            cache_bytes: out.stats.required_bricks * self.paging.config().brick_voxels(),
            requests: out.requests.len(),
            issued,
            served,
            pending: self.pending.len(),
            samples_skipped: out.stats.samples_skipped,
            traversal_steps: out.stats.traversal_steps,
        });
        self.frame += 1;
        Ok(out)
    }

    /// Step until converged or `max_frames` were rendered. Returns the
    /// last frame and the number of frames rendered.
    pub fn run_until_converged(
        &mut self,
        cam: &Camera,
        channels: &[ChannelSettings],
        max_frames: usize,
    ) -> Result<(FrameOutput, usize)> {
        self.quiet_frames = 0;
        self.last_hash = None;
        let mut n = 0;
        loop {
            let out = self.step_frame(cam, channels)?;
            n += 1;
            if self.converged() || n >= max_frames {
                return Ok((out, n));
            }
        }
    }

    /// Show `dataset_channel` in `slot`. Cached bricks and metadata of the
    /// slot are dropped and in-flight downloads for it are ignored.
    pub fn swap_channel(&mut self, slot: u32, dataset_channel: u32) -> Result<()> {
        let freed = self.paging.set_channel_mapping(slot, dataset_channel)?;
        self.octree.invalidate_channel(slot);
        self.brick_meta.invalidate_slot(slot);
        self.generation[slot as usize] += 1;
        let k = self.paging.config().k();
        self.pending.retain(|r| match *r {
            Request::Brick(id) | Request::BrickMetadata(id) => id.decode(k).slot != slot,
            Request::NodeMetadata { slot: s, .. } => s != slot,
        });
        self.quiet_frames = 0;
        log::debug!(
            "slot {slot} now shows channel {dataset_channel}; {} bricks freed",
            freed.len()
        );
        Ok(())
    }

    /// Distinct bricks sampled by `out`, and their size in bytes.
    pub fn working_set(&self, out: &FrameOutput) -> (usize, usize) {
        let n = out.used_bricks.len();
        (n, n * self.paging.config().brick_voxels())
    }

    /// Every brick sampled by `out` that is resident holds data of the
    /// dataset channel currently mapped to its slot.
    pub fn check_provenance(&self, out: &FrameOutput) -> std::result::Result<(), String> {
        let k = self.paging.config().k();
        for &id in &out.used_bricks {
            if let PageEntry::Mapped(s) = self.paging.entry_of(id) {
                let slot = id.decode(k).slot;
                let want = self.paging.channel_mapping()[slot as usize];
                if self.paging.provenance(s) != Some(want) {
                    return Err(format!(
                        "brick {id:?} in cache slot {s} came from channel {:?}, slot {slot} shows {want}",
                        self.paging.provenance(s)
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        self.paging.check_bijection()?;
        if self.cfg.method == Method::Residency {
            self.octree.check_mask_consistency()?;
            self.octree.check_leaf_ground_truth(&self.paging)?;
        }
        Ok(())
    }

    /// Brick id of `slot` at `level` covering `coord`, if in range.
    pub fn brick_id(&self, slot: u32, level: u32, coord: [u32; 3]) -> Result<BrickId> {
        self.paging.config().brick_id(slot, level, coord)
    }

    /// Node metadata word of `slot` at `node`.
    pub fn node_metadata(&self, node: NodeAddress, slot: u32) -> Option<(u8, u8)> {
        let w = self.octree.word(node, slot);
        w.is_valid().then(|| (w.min(), w.max()))
    }
}
