use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::paging::{sample_brick, BrickId, PagingConfig};
use crate::service::Transport;
use crate::volume::{decompress_brick, Hierarchy, VolumeManifest};

use super::{
    composite, render_rows, sample_pos, validate_channels, Camera, ChannelSettings, Frame,
    FrameOutput, RenderConfig,
};

/// Every brick of every level of the mapped channels, decompressed.
pub struct BrickedVolume {
    cfg: PagingConfig,
    /// `[slot][level]`: bricks concatenated in x-fastest grid order.
    data: Vec<Vec<Vec<u8>>>,
}

impl BrickedVolume {
    fn build(
        manifest: &VolumeManifest,
        mapping: &[u32],
        mut brick: impl FnMut(u32, u32, [u32; 3]) -> Result<Vec<u8>>,
    ) -> Result<Self> {
        let cfg = PagingConfig::from_manifest(manifest, [1, 1, 1], mapping.len() as u32)?;
        let mut data = Vec::new();
        for &ch in mapping {
            if ch >= manifest.channels {
                return Err(Error::ChannelRange {
                    channel: ch,
                    count: manifest.channels,
                });
            }
            let mut levels = Vec::new();
            for l in 0..cfg.k() {
                let g = cfg.grid(l);
                let mut buf = Vec::with_capacity(
                    cfg.levels[l as usize].brick_count() as usize * cfg.brick_voxels(),
                );
                for z in 0..g[2] {
                    for y in 0..g[1] {
                        for x in 0..g[0] {
                            buf.extend(brick(ch, l, [x, y, z])?);
                        }
                    }
                }
                levels.push(buf);
            }
            data.push(levels);
        }
        Ok(Self { cfg, data })
    }

    /// `mapping[slot]` is the dataset channel shown in each slot.
    pub fn from_hierarchy(h: &Hierarchy, mapping: &[u32]) -> Result<Self> {
        Self::build(h.manifest(), mapping, |c, l, p| h.extract_brick(c, l, p))
    }

    pub fn from_transport(t: &dyn Transport, mapping: &[u32]) -> Result<Self> {
        let m = t.manifest()?;
        let n = m.brick_voxels();
        Self::build(&m, mapping, |c, l, p| {
            let bytes = t.brick(crate::paging::BrickRequest {
                channel: c,
                level: l,
                coord: p,
            })?;
            decompress_brick(&bytes, n)
        })
    }

    pub fn config(&self) -> &PagingConfig {
        &self.cfg
    }

    /// Trilinear value at `pos` on `level` of `slot`, and the brick read.
    #[inline]
    pub fn sample(&self, slot: u32, level: u32, pos: Vec3) -> (f32, BrickId) {
        let (coord, local) = self.cfg.locate(level, pos);
        let g = self.cfg.grid(level);
        let idx = ((coord[2] * g[1] + coord[1]) * g[0] + coord[0]) as usize;
        let n = self.cfg.brick_voxels();
        let data = &self.data[slot as usize][level as usize][idx * n..(idx + 1) * n];
        let id = BrickId::encode(slot, level, coord, self.cfg.k(), self.cfg.channel_slots)
            .expect("valid brick");
        (sample_brick(data, self.cfg.brick_size, local), id)
    }
}

/// In-core oracle: every sample reads its desired level directly, with no
/// octree and no skipping.
pub fn render_reference(
    vol: &BrickedVolume,
    cam: &Camera,
    channels: &[ChannelSettings],
    cfg: &RenderConfig,
) -> Result<FrameOutput> {
    cam.validate()?;
    validate_channels(channels, &vol.cfg)?;
    let frame = Frame {
        cfg,
        channels,
        k: vol.cfg.k(),
    };
    Ok(render_rows(
        cfg,
        cam,
        channels.len(),
        frame.k,
        |ray, span, _pixel, row| {
            let mut acc = [0.0f32; 4];
            let mut i = 0u32;
            loop {
                let t = frame.t_at(span, i);
                if t >= span.1 {
                    break;
                }
                let pos = sample_pos(ray, t);
                let exp = frame.levels_at(t, &mut row.levels);
                for (c, ch) in channels.iter().enumerate() {
                    let level = row.levels[c];
                    let (v, id) = vol.sample(ch.slot, level, pos);
                    row.use_brick(id);
                    row.read_level(c, level);
                    row.rgba[c] = ch.tf.eval(v);
                }
                row.evaluated += 1;
                composite(&mut acc, &row.rgba, exp);
                if acc[3] >= cfg.early_term_alpha {
                    break;
                }
                i += 1 << exp;
            }
            acc
        },
    ))
}
