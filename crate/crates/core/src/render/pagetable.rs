use crate::error::Result;
use crate::paging::{PageEntry, Paging};

use super::{
    composite, render_rows, sample_pos, validate_channels, Camera, ChannelSettings, Frame,
    FrameOutput, RenderConfig, Request,
};

/// Baseline without an octree: every sample is translated through the page
/// tables. A brick is skipped only when it is EMPTY (or missing) in every
/// channel; missing bricks are requested and not substituted.
pub fn render_pagetable(
    paging: &Paging,
    cam: &Camera,
    channels: &[ChannelSettings],
    cfg: &RenderConfig,
) -> Result<FrameOutput> {
    cam.validate()?;
    validate_channels(channels, paging.config())?;
    let pc = paging.config();
    let frame = Frame {
        cfg,
        channels,
        k: pc.k(),
    };
    let zero_clear: Vec<bool> = channels.iter().map(|c| c.tf.eval(0.0)[3] == 0.0).collect();
    Ok(render_rows(
        cfg,
        cam,
        channels.len(),
        frame.k,
        |ray, span, pixel, row| {
            let mut acc = [0.0f32; 4];
            let mut i = 0u32;
            loop {
                let t = frame.t_at(span, i);
                if t >= span.1 {
                    break;
                }
                let pos = sample_pos(ray, t);
                let exp = frame.levels_at(t, &mut row.levels);
                row.steps += channels.len() as u64;
                let mut skippable = true;
                let mut all_empty = true;
                let mut t_end = frame.lod_boundary(t);
                for (c, ch) in channels.iter().enumerate() {
                    let level = row.levels[c];
                    let (coord, local) = pc.locate(level, pos);
                    match paging.entry(ch.slot, level, coord) {
                        PageEntry::Mapped(s) => {
                            skippable = false;
                            row.use_brick(paging.resident(s).expect("mapped slot is occupied"));
                            row.read_level(c, level);
                            row.rgba[c] = ch.tf.eval(paging.sample(s, local));
                        }
                        PageEntry::Empty => {
                            row.read_level(c, level);
                            row.rgba[c] = ch.tf.eval(0.0);
                            if zero_clear[c] {
                                t_end = t_end.min(ray.exit(&pc.brick_extent(level, coord)));
                            } else {
                                skippable = false;
                            }
                        }
                        PageEntry::Unmapped => {
                            row.request(Request::Brick(pc.id_at(ch.slot, level, pos)));
                            row.rgba[c] = [0.0; 4];
                            all_empty = false;
                            t_end = t_end.min(ray.exit(&pc.brick_extent(level, coord)));
                        }
                    }
                }
                if skippable {
                    frame.skip_to(span, &mut i, t_end, row, pixel, all_empty);
                    continue;
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
