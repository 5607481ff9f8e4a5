#![allow(dead_code)]

use std::sync::Arc;

use resoct::octree::{NodeAddress, OctreeConfig, ResidencyOctree};
use resoct::paging::{Paging, PagingConfig};
use resoct::render::{brick_metadata_boxes, BrickMetadata, ChannelSettings};
use resoct::service::InProcessTransport;
use resoct::transfer::TransferFunction;
use resoct::volume::{BrickStore, BuildOptions, Hierarchy, MemoryStore, RawVolume};

pub fn build(raw: &RawVolume, levels: usize, brick: u32) -> Arc<Hierarchy> {
    let opts = BuildOptions {
        levels,
        brick_size: [brick; 3],
        ..BuildOptions::default()
    };
    Arc::new(Hierarchy::build(raw, &opts).unwrap())
}

pub fn transport(h: &Arc<Hierarchy>) -> Arc<InProcessTransport> {
    let store: Arc<dyn BrickStore> = Arc::new(MemoryStore::new(h.clone()));
    Arc::new(InProcessTransport::new(store))
}

pub fn plain_transport(h: &Arc<Hierarchy>) -> Arc<InProcessTransport> {
    let store: Arc<dyn BrickStore> = Arc::new(MemoryStore::new(h.clone()).plain_files());
    Arc::new(InProcessTransport::new(store))
}

/// Min/max over a voxel box of one dataset channel, straight from the
/// level grids.
pub fn region(
    h: &Hierarchy,
    channel: u32,
) -> impl Fn(u32, [u32; 3], [u32; 3]) -> Option<(u8, u8)> + '_ {
    move |l, lo, hi| h.grid(channel, l).region_minmax(lo, hi)
}

pub struct Resident {
    pub paging: Paging,
    pub octree: ResidencyOctree,
    pub meta: BrickMetadata,
}

/// Every brick of every mapped channel in cache, with exact metadata.
pub fn full_residency(h: &Hierarchy, mapping: &[u32], depth: u32) -> Resident {
    let m = h.manifest();
    let per_channel: u64 = m.levels.iter().map(|l| l.brick_count()).sum();
    let total = (per_channel * mapping.len() as u64) as u32;
    let pc = PagingConfig::from_manifest(m, [total, 1, 1], mapping.len() as u32).unwrap();
    let mut paging = Paging::new(pc.clone(), mapping.to_vec(), m.channels).unwrap();
    let mut octree = ResidencyOctree::new(OctreeConfig {
        depth,
        channel_slots: mapping.len() as u32,
        ..OctreeConfig::default()
    })
    .unwrap();
    let mut meta = BrickMetadata::new(&pc, 0);
    for (slot, &ch) in mapping.iter().enumerate() {
        let slot = slot as u32;
        let r = region(h, ch);
        for l in 0..pc.k() {
            let g = pc.grid(l);
            for z in 0..g[2] {
                for y in 0..g[1] {
                    for x in 0..g[0] {
                        let coord = [x, y, z];
                        let id = pc.brick_id(slot, l, coord).unwrap();
                        let data = h.extract_brick(ch, l, coord).unwrap();
                        paging.insert_brick(id, &data, 0, ch).unwrap();
                        octree.on_brick_inserted(&pc, id);
                        let (mut a, mut b) = (u8::MAX, 0);
                        for (bl, lo, hi) in brick_metadata_boxes(&pc, l, coord) {
                            let (x, y) = r(bl, lo, hi).unwrap();
                            a = a.min(x);
                            b = b.max(y);
                        }
                        meta.set(id, a, b);
                    }
                }
            }
        }
        for (node, a, b) in
            ResidencyOctree::compute_subtree_metadata(&pc, NodeAddress::ROOT, depth, &r).unwrap()
        {
            octree.set_node_metadata(node, slot, a, b).unwrap();
        }
    }
    Resident {
        paging,
        octree,
        meta,
    }
}

pub const COLORS: [[f32; 3]; 4] = [
    [1.0, 0.35, 0.3],
    [0.3, 1.0, 0.4],
    [0.35, 0.45, 1.0],
    [1.0, 0.9, 0.3],
];

/// Ramp TF that hides the background noise.
pub fn sparse_tf(slot: usize) -> TransferFunction {
    TransferFunction::ramp(30.0, 220.0, COLORS[slot % 4], 0.35)
}

pub fn sparse_channels(m: u32, k: u32) -> Vec<ChannelSettings> {
    (0..m)
        .map(|s| ChannelSettings::new(s, sparse_tf(s as usize), k))
        .collect()
}
