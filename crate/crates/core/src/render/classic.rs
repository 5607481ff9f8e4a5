use crate::error::Result;
use crate::octree::halo_voxel_box;
use crate::paging::{BrickId, PageEntry, Paging, PagingConfig};

use super::{
    composite, render_rows, sample_pos, validate_channels, Camera, ChannelSettings, Frame,
    FrameOutput, RenderConfig, Request,
};

/// Min/max culling metadata per brick for the classic octree, where every
/// node is exactly one brick of the level matching its depth.
#[derive(Clone, Debug)]
pub struct BrickMetadata {
    k: u32,
    grids: Vec<[u32; 3]>,
    /// Per page table: `min | max << 8`, or `u32::MAX` when unknown.
    tables: Vec<Vec<u32>>,
    count: usize,
    pub homogeneity_epsilon: u8,
}

impl BrickMetadata {
    pub fn new(cfg: &PagingConfig, homogeneity_epsilon: u8) -> Self {
        let k = cfg.k();
        let grids: Vec<[u32; 3]> = (0..k).map(|l| cfg.grid(l)).collect();
        let tables = (0..cfg.channel_slots * k)
            .map(|t| {
                let g = grids[(t % k) as usize];
                vec![u32::MAX; (g[0] * g[1] * g[2]) as usize]
            })
            .collect();
        Self {
            k,
            grids,
            tables,
            count: 0,
            homogeneity_epsilon,
        }
    }

    #[inline]
    fn cell(&self, id: BrickId) -> (usize, usize) {
        let t = id.page_table();
        let g = self.grids[(t % self.k) as usize];
        let c = id.coord();
        (t as usize, ((c[2] * g[1] + c[1]) * g[0] + c[0]) as usize)
    }

    #[inline]
    pub fn get(&self, id: BrickId) -> Option<(u8, u8)> {
        let (t, i) = self.cell(id);
        let v = self.tables[t][i];
        (v != u32::MAX).then_some((v as u8, (v >> 8) as u8))
    }

    pub fn set(&mut self, id: BrickId, min: u8, max: u8) {
        let (t, i) = self.cell(id);
        if self.tables[t][i] == u32::MAX {
            self.count += 1;
        }
        self.tables[t][i] = min as u32 | (max as u32) << 8;
    }

    pub fn invalidate_slot(&mut self, slot: u32) {
        for t in slot * self.k..(slot + 1) * self.k {
            let table = &mut self.tables[t as usize];
            self.count -= table.iter().filter(|&&v| v != u32::MAX).count();
            table.fill(u32::MAX);
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Voxel boxes per level covering every value a sample inside the brick's
/// extent can take.
pub fn brick_metadata_boxes(
    cfg: &PagingConfig,
    level: u32,
    coord: [u32; 3],
) -> Vec<(u32, [u32; 3], [u32; 3])> {
    let dims = cfg.dims(level);
    let b = cfg.brick_size;
    let lo: [u64; 3] = std::array::from_fn(|i| coord[i] as u64 * b[i] as u64);
    let hi: [u64; 3] =
        std::array::from_fn(|i| ((coord[i] + 1) as u64 * b[i] as u64).min(dims[i] as u64));
    let den = dims.map(|d| d as u64);
    (0..cfg.k())
        .map(|l| {
            let (a, z) = halo_voxel_box(lo, hi, den, cfg.dims(l));
            (l, a, z)
        })
        .collect()
}

#[derive(Copy, Clone)]
enum Outcome {
    Empty,
    Unmapped,
    Homogeneous(u8),
    Sample {
        level: u32,
        slot: u32,
        local: [f32; 3],
    },
}

/// Baseline with a one-to-one node/brick octree. Every channel restarts
/// traversal at its coarsest brick; a brick must be resident before its
/// children can be visited, so missing ancestors block descent and the
/// deepest resident ancestor is sampled instead.
pub fn render_classic(
    paging: &Paging,
    meta: &BrickMetadata,
    cam: &Camera,
    channels: &[ChannelSettings],
    cfg: &RenderConfig,
) -> Result<FrameOutput> {
    cam.validate()?;
    validate_channels(channels, paging.config())?;
    let pc = paging.config();
    let k = pc.k();
    let frame = Frame { cfg, channels, k };
    let eps = meta.homogeneity_epsilon;
    Ok(render_rows(
        cfg,
        cam,
        channels.len(),
        k,
        |ray, span, pixel, row| {
            let mut acc = [0.0f32; 4];
            let mut outcomes = vec![Outcome::Empty; channels.len()];
            let mut i = 0u32;
            loop {
                let t = frame.t_at(span, i);
                if t >= span.1 {
                    break;
                }
                let pos = sample_pos(ray, t);
                let exp = frame.levels_at(t, &mut row.levels);
                let mut t_end = f32::INFINITY;
                let mut any_sample = false;
                let mut any_homog = false;
                let mut all_empty = true;
                for (c, ch) in channels.iter().enumerate() {
                    let desired = row.levels[c];
                    let mut found = None;
                    let mut level = k - 1;
                    let decided = loop {
                        row.steps += 1;
                        let (coord, local) = pc.locate(level, pos);
                        let id = pc.id_at(ch.slot, level, pos);
                        let exit = || ray.exit(&pc.brick_extent(level, coord));
                        match meta.get(id) {
                            Some((mn, mx)) if ch.tf.is_transparent(mn, mx) => {
                                break Some((Outcome::Empty, exit()))
                            }
                            Some((mn, mx)) if mx - mn <= eps => {
                                break Some((Outcome::Homogeneous(mn), exit()))
                            }
                            Some(_) => {}
                            None => row.request(Request::BrickMetadata(id)),
                        }
                        match paging.entry(ch.slot, level, coord) {
                            PageEntry::Mapped(s) => {
                                row.use_brick(id);
                                found = Some(Outcome::Sample {
                                    level,
                                    slot: s,
                                    local,
                                });
                            }
                            _ => {
                                row.request(Request::Brick(id));
                                break found.is_none().then(|| (Outcome::Unmapped, exit()));
                            }
                        }
                        if level <= desired {
                            break None;
                        }
                        level -= 1;
                    };
                    outcomes[c] = match decided {
                        Some((o, exit)) => {
                            t_end = t_end.min(exit);
                            match o {
                                Outcome::Homogeneous(_) => any_homog = true,
                                Outcome::Unmapped => all_empty = false,
                                _ => {}
                            }
                            o
                        }
                        None => {
                            any_sample = true;
                            found.expect("descent ends on a resident brick")
                        }
                    };
                }

                if !any_sample && !any_homog {
                    frame.skip_to(span, &mut i, t_end, row, pixel, all_empty);
                    continue;
                }
                for (c, ch) in channels.iter().enumerate() {
                    row.rgba[c] = match outcomes[c] {
                        Outcome::Empty | Outcome::Unmapped => [0.0; 4],
                        Outcome::Homogeneous(v) => ch.tf.eval(v as f32),
                        Outcome::Sample { level, slot, local } => {
                            row.read_level(c, level);
                            ch.tf.eval(paging.sample(slot, local))
                        }
                    };
                }
                if any_sample {
                    row.evaluated += 1;
                    composite(&mut acc, &row.rgba, exp);
                    if acc[3] >= cfg.early_term_alpha {
                        break;
                    }
                    i += 1 << exp;
                    continue;
                }
                loop {
                    let t = frame.t_at(span, i);
                    let exp = frame.exp_at(t);
                    row.evaluated += 1;
                    composite(&mut acc, &row.rgba, exp);
                    if acc[3] >= cfg.early_term_alpha {
                        return acc;
                    }
                    i += 1 << exp;
                    let next = frame.t_at(span, i);
                    if next >= t_end || next >= span.1 {
                        break;
                    }
                }
            }
            acc
        },
    ))
}
