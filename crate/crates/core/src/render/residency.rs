use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::octree::{NodeAddress, ResidencyOctree};
use crate::paging::{Paging, Translation};

use super::{
    choose_traversal_depth, composite, render_rows, sample_pos, validate_channels, Camera,
    ChannelSettings, Frame, FrameOutput, RenderConfig, Request,
};

/// Where traversal left one channel for the current sample.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ChannelOutcome {
    /// Transparent over the node at `depth`.
    Empty { depth: u32 },
    /// No brick of any level resident over the node; a brick was requested.
    Unmapped { depth: u32 },
    /// Constant `value` over the node.
    Homogeneous { value: u8, depth: u32 },
    /// Needs a data sample; `mask` is the residency mask of the last node.
    Sample { mask: u16, depth: u32 },
}

impl Default for ChannelOutcome {
    fn default() -> Self {
        ChannelOutcome::Sample { mask: 0, depth: 0 }
    }
}

/// What the ray does at the current lattice position.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SampleAction {
    /// Nothing visible up to the exit of `node`. `empty` is false when
    /// some channel was skipped only for lack of data.
    Skip {
        node: NodeAddress,
        empty: bool,
    },
    /// Every channel is empty or constant up to the exit of `node`.
    Constant {
        node: NodeAddress,
    },
    Sample,
}

/// Channel indices ordered by importance (ties by list position).
pub fn importance_order(channels: &[ChannelSettings]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..channels.len()).collect();
    order.sort_by_key(|&i| (channels[i].importance, i));
    order
}

/// Single descent through the octree for all channels at `pos`.
///
/// Channels are examined in importance order with a cursor: a channel that
/// is decided at some node (empty, unmapped, homogeneous, or needing a
/// sample) advances the cursor; otherwise traversal descends one level and
/// continues with the same channel. Returns the deepest depth visited and
/// the number of nodes visited.
#[allow(clippy::too_many_arguments)]
pub fn traverse_sample(
    octree: &ResidencyOctree,
    paging: &Paging,
    channels: &[ChannelSettings],
    order: &[usize],
    pos: Vec3,
    levels: &[u32],
    start_depth: u32,
    max_depth: u32,
    out: &mut [ChannelOutcome],
    mut request: impl FnMut(Request),
) -> (u32, u32) {
    let p = pos.to_array();
    let eps = octree.config().homogeneity_epsilon;
    let mut d = start_depth.min(max_depth);
    let mut node = NodeAddress::containing(d, p);
    let mut idx = node.index();
    let mut steps = 1;
    let mut cursor = 0;
    loop {
        while cursor < order.len() {
            let c = order[cursor];
            let ch = &channels[c];
            let w = octree.word_at(idx, ch.slot);
            let valid = w.is_valid();
            let decided = if valid && ch.tf.is_transparent(w.min(), w.max()) {
                Some(ChannelOutcome::Empty { depth: d })
            } else if valid && w.max() - w.min() <= eps {
                Some(ChannelOutcome::Homogeneous {
                    value: w.min(),
                    depth: d,
                })
            } else if w.mask() == 0 {
                request(Request::Brick(
                    paging.config().id_at(ch.slot, levels[c], pos),
                ));
                if !valid {
                    request(Request::NodeMetadata {
                        node: octree.metadata_group(node).0,
                        slot: ch.slot,
                    });
                }
                Some(ChannelOutcome::Unmapped { depth: d })
            } else if !valid {
                request(Request::NodeMetadata {
                    node: octree.metadata_group(node).0,
                    slot: ch.slot,
                });
                Some(ChannelOutcome::Sample {
                    mask: w.mask(),
                    depth: d,
                })
            } else if d >= max_depth {
                Some(ChannelOutcome::Sample {
                    mask: w.mask(),
                    depth: d,
                })
            } else {
                None
            };
            match decided {
                Some(o) => {
                    out[c] = o;
                    cursor += 1;
                }
                None => break,
            }
        }
        if cursor == order.len() {
            return (d, steps);
        }
        d += 1;
        node = NodeAddress::containing(d, p);
        idx = node.index();
        steps += 1;
    }
}

/// Combine per-channel outcomes into the action for this sample.
pub fn sample_action(outcomes: &[ChannelOutcome], pos: Vec3) -> SampleAction {
    let mut depth = 0;
    let mut homog = false;
    let mut empty = true;
    for o in outcomes {
        match *o {
            ChannelOutcome::Sample { .. } => return SampleAction::Sample,
            ChannelOutcome::Empty { depth: d } => depth = depth.max(d),
            ChannelOutcome::Unmapped { depth: d } => {
                depth = depth.max(d);
                empty = false;
            }
            ChannelOutcome::Homogeneous { depth: d, .. } => {
                depth = depth.max(d);
                homog = true;
            }
        }
    }
    let node = NodeAddress::containing(depth, pos.to_array());
    if homog {
        SampleAction::Constant { node }
    } else {
        SampleAction::Skip { node, empty }
    }
}

/// Resident substitute for a missing brick: levels flagged in `mask`, by
/// increasing distance from `desired`, coarser first on ties. Returns the
/// level, cache slot and brick-local position.
pub fn get_alternative_brick(
    paging: &Paging,
    mask: u16,
    slot: u32,
    desired: u32,
    pos: Vec3,
) -> Option<(u32, u32, [f32; 3])> {
    let k = paging.config().k();
    for dist in 1..k {
        for level in [desired.checked_add(dist), desired.checked_sub(dist)]
            .into_iter()
            .flatten()
        {
            if level >= k || mask & (1 << level) == 0 {
                continue;
            }
            if let Translation::Mapped { slot: s, local } = paging.translate_pos(slot, level, pos) {
                return Some((level, s, local));
            }
        }
    }
    None
}

/// Ray-guided renderer over the residency octree and the page tables.
pub fn render_residency(
    paging: &Paging,
    octree: &ResidencyOctree,
    cam: &Camera,
    channels: &[ChannelSettings],
    cfg: &RenderConfig,
) -> Result<FrameOutput> {
    cam.validate()?;
    validate_channels(channels, paging.config())?;
    cfg.validate(octree.depth())?;
    if octree.config().channel_slots != paging.config().channel_slots {
        return Err(Error::Config(
            "octree and paging disagree on channel slots".into(),
        ));
    }
    let frame = Frame {
        cfg,
        channels,
        k: paging.config().k(),
    };
    let order = importance_order(channels);
    let max_d = octree.depth();
    Ok(render_rows(
        cfg,
        cam,
        channels.len(),
        frame.k,
        |ray, span, pixel, row| {
            let mut acc = [0.0f32; 4];
            let mut outcomes = vec![ChannelOutcome::default(); channels.len()];
            let mut prev = cfg.traversal_start_level;
            let mut i = 0u32;
            loop {
                let t = frame.t_at(span, i);
                if t >= span.1 {
                    break;
                }
                let pos = sample_pos(ray, t);
                let exp = frame.levels_at(t, &mut row.levels);
                let trav = choose_traversal_depth(cfg.base_step * (1u32 << exp) as f32, max_d);
                let start = cfg.traversal_start_level.max(prev.saturating_sub(1));
                let levels = std::mem::take(&mut row.levels);
                let (depth, steps) = traverse_sample(
                    octree,
                    paging,
                    channels,
                    &order,
                    pos,
                    &levels,
                    start,
                    trav,
                    &mut outcomes,
                    |r| row.request(r),
                );
                row.levels = levels;
                row.steps += steps as u64;
                prev = depth;

                match sample_action(&outcomes, pos) {
                    SampleAction::Skip { node, empty } => {
                        let t_end = ray.exit(&node.extent());
                        frame.skip_to(span, &mut i, t_end, row, pixel, empty);
                    }
                    SampleAction::Constant { node } => {
                        let t_end = ray.exit(&node.extent());
                        for (c, o) in outcomes.iter().enumerate() {
                            row.rgba[c] = match *o {
                                ChannelOutcome::Homogeneous { value, .. } => {
                                    channels[c].tf.eval(value as f32)
                                }
                                _ => [0.0; 4],
                            };
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
                    SampleAction::Sample => {
                        for (c, ch) in channels.iter().enumerate() {
                            row.rgba[c] = match outcomes[c] {
                                ChannelOutcome::Empty { .. } | ChannelOutcome::Unmapped { .. } => {
                                    [0.0; 4]
                                }
                                ChannelOutcome::Homogeneous { value, .. } => {
                                    ch.tf.eval(value as f32)
                                }
                                ChannelOutcome::Sample { mask, .. } => {
                                    let level = row.levels[c];
                                    let found = match paging.translate_pos(ch.slot, level, pos) {
                                        Translation::Mapped { slot, local } => {
                                            Some((level, slot, local))
                                        }
                                        Translation::Empty => {
                                            row.read_level(c, level);
                                            row.rgba[c] = ch.tf.eval(0.0);
                                            continue;
                                        }
                                        Translation::Unmapped => {
                                            row.request(Request::Brick(
                                                paging.config().id_at(ch.slot, level, pos),
                                            ));
                                            get_alternative_brick(paging, mask, ch.slot, level, pos)
                                        }
                                    };
                                    match found {
                                        Some((l, s, local)) => {
                                            row.use_brick(
                                                paging
                                                    .resident(s)
                                                    .expect("mapped slot is occupied"),
                                            );
                                            row.read_level(c, l);
                                            ch.tf.eval(paging.sample(s, local))
                                        }
                                        None => [0.0; 4],
                                    }
                                }
                            };
                        }
                        row.evaluated += 1;
                        composite(&mut acc, &row.rgba, exp);
                        if acc[3] >= cfg.early_term_alpha {
                            break;
                        }
                        i += 1 << exp;
                    }
                }
            }
            acc
        },
    ))
}
