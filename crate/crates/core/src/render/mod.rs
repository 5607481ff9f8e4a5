//! Software ray casting: the residency-octree renderer, the in-core
//! reference, and the page-table-only and classic-octree baselines.
//!
//! All renderers share ray setup, the sample lattice, level selection and
//! compositing. Images agree bit for bit wherever the same data is sampled.

mod classic;
mod image;
mod pagetable;
mod reference;
mod residency;

pub use classic::{brick_metadata_boxes, render_classic, BrickMetadata};
pub use image::Image;
pub use pagetable::render_pagetable;
pub use reference::{render_reference, BrickedVolume};
pub use residency::{
    get_alternative_brick, importance_order, render_residency, sample_action, traverse_sample,
    ChannelOutcome, SampleAction,
};

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Ray, Vec3};
use crate::octree::NodeAddress;
use crate::paging::{BrickId, PagingConfig};
use crate::transfer::TransferFunction;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    /// Vertical field of view in degrees.
    pub fov: f32,
}

impl Camera {
    /// Camera on a circle about the y-axis through the volume center.
    pub fn orbit(radius: f32, elevation_deg: f32, azimuth_deg: f32) -> Self {
        let (e, a) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
        let c = Vec3::splat(0.5);
        Self {
            position: c + Vec3::new(
                radius * e.cos() * a.sin(),
                radius * e.sin(),
                radius * e.cos() * a.cos(),
            ),
            target: c,
            up: Vec3::new(0.0, 1.0, 0.0),
            fov: 40.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.position.is_finite() && self.target.is_finite() && self.up.is_finite()) {
            return Err(Error::Camera("non-finite vector".into()));
        }
        let f = self.target - self.position;
        if f.length() == 0.0 {
            return Err(Error::Camera("position equals target".into()));
        }
        if f.normalized().cross(self.up).length() < 1e-6 {
            return Err(Error::Camera("up vector parallel to view direction".into()));
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::Camera(format!(
                "field of view {} outside (0, 180)",
                self.fov
            )));
        }
        Ok(())
    }

    /// Ray through the center of pixel `(x, y)` of a `width × height` image.
    pub fn pixel_ray(&self, x: u32, y: u32, width: u32, height: u32) -> Ray {
        RayGen::new(self, width, height).ray(x, y)
    }

    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let f = (self.target - self.position).normalized();
        let r = f.cross(self.up).normalized();
        let u = r.cross(f);
        (f, r, u)
    }
}

/// Per-frame ray generator.
#[derive(Copy, Clone, Debug)]
pub(crate) struct RayGen {
    origin: Vec3,
    f: Vec3,
    r: Vec3,
    u: Vec3,
    tan: f32,
    width: u32,
    height: u32,
}

impl RayGen {
    pub(crate) fn new(cam: &Camera, width: u32, height: u32) -> Self {
        let (f, r, u) = cam.basis();
        Self {
            origin: cam.position,
            f,
            r,
            u,
            tan: (cam.fov.to_radians() * 0.5).tan(),
            width,
            height,
        }
    }

    #[inline]
    pub(crate) fn ray(&self, x: u32, y: u32) -> Ray {
        let aspect = self.width as f32 / self.height as f32;
        let sx = ((x as f32 + 0.5) / self.width as f32 * 2.0 - 1.0) * self.tan * aspect;
        let sy = (1.0 - (y as f32 + 0.5) / self.height as f32 * 2.0) * self.tan;
        Ray {
            origin: self.origin,
            dir: (self.f + self.r * sx + self.u * sy).normalized(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSettings {
    pub slot: u32,
    pub tf: TransferFunction,
    /// Inclusive `[lo, hi]` resolution level bounds.
    pub level_range: [u32; 2],
    /// 0 is the most important channel.
    pub importance: u32,
}

impl ChannelSettings {
    pub fn new(slot: u32, tf: TransferFunction, levels: u32) -> Self {
        Self {
            slot,
            tf,
            level_range: [0, levels - 1],
            importance: slot,
        }
    }
}

pub fn validate_channels(channels: &[ChannelSettings], paging: &PagingConfig) -> Result<()> {
    let mut seen = HashSet::new();
    for c in channels {
        if c.slot >= paging.channel_slots {
            return Err(Error::Config(format!(
                "channel slot {} out of range",
                c.slot
            )));
        }
        if !seen.insert(c.slot) {
            return Err(Error::Config(format!(
                "channel slot {} listed twice",
                c.slot
            )));
        }
        let [lo, hi] = c.level_range;
        if lo > hi || hi >= paging.k() {
            return Err(Error::Config(format!(
                "level range {:?} invalid for {} levels",
                c.level_range,
                paging.k()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    /// Base sample spacing in normalized units.
    pub base_step: f32,
    /// Ray distance below which the finest allowed level is used.
    pub lod_distance: f32,
    pub early_term_alpha: f32,
    pub max_requests: usize,
    pub traversal_start_level: u32,
    /// Record lattice positions skipped as empty (test instrumentation).
    #[serde(default)]
    pub record_skips: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            base_step: 1.0 / 256.0,
            lod_distance: 1.0,
            early_term_alpha: 0.99,
            max_requests: 256,
            traversal_start_level: 1,
            record_skips: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self, octree_depth: u32) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if !(self.base_step > 0.0 && self.base_step.is_finite()) {
            return Err(Error::Config("base step must be positive".into()));
        }
        if !(self.lod_distance > 0.0) {
            return Err(Error::Config("LOD distance must be positive".into()));
        }
        if self.traversal_start_level > octree_depth {
            return Err(Error::Config(
                "traversal start level exceeds octree depth".into(),
            ));
        }
        Ok(())
    }
}

/// Work the session has to do on behalf of the renderer.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Request {
    Brick(BrickId),
    NodeMetadata { node: NodeAddress, slot: u32 },
    BrickMetadata(BrickId),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameStats {
    /// Distinct bricks whose voxels were read (or whose residency was
    /// required) during the frame.
    pub required_bricks: usize,
    pub samples_evaluated: u64,
    pub samples_skipped: u64,
    pub traversal_steps: u64,
    /// Distinct required bricks per pixel, row-major.
    pub per_pixel_bricks: Vec<u16>,
    /// Samples read from each level, per entry of the channel list.
    pub level_histogram: Vec<Vec<u64>>,
    /// Requests beyond the per-frame cap.
    pub requests_dropped: usize,
}

/// A lattice position skipped as empty.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SkippedSample {
    pub pixel: u32,
    pub t: f32,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub image: Image,
    /// Deduplicated, capped, in first-come scanline order.
    pub requests: Vec<Request>,
    /// Sorted distinct bricks counted as required.
    pub used_bricks: Vec<BrickId>,
    pub stats: FrameStats,
    pub skipped: Vec<SkippedSample>,
}

impl FrameOutput {
    pub fn brick_requests(&self) -> impl Iterator<Item = BrickId> + '_ {
        self.requests.iter().filter_map(|r| match r {
            Request::Brick(id) => Some(*id),
            _ => None,
        })
    }

    pub fn metadata_requests(&self) -> impl Iterator<Item = &Request> + '_ {
        self.requests
            .iter()
            .filter(|r| !matches!(r, Request::Brick(_)))
    }
}

/// `floor(log2(x))` for `x >= 1`, exact on powers of two.
#[inline]
fn floor_log2(x: f32) -> u32 {
    debug_assert!(x >= 1.0);
    ((x.to_bits() >> 23) & 0xff) - 127
}

/// `clamp(floor(log2(max(t / t0, 1))), lo, hi)`.
#[inline]
pub fn choose_resolution_level(level_range: [u32; 2], t: f32, t0: f32) -> u32 {
    let r = (t / t0).max(1.0);
    let l = if r.is_finite() {
        floor_log2(r)
    } else {
        u32::MAX
    };
    l.clamp(level_range[0], level_range[1])
}

/// Deepest subdivision level `d <= max_depth` whose node edge `2^-d` is
/// not shorter than `step`.
#[inline]
pub fn choose_traversal_depth(step: f32, max_depth: u32) -> u32 {
    let inv = 1.0 / step;
    if !(inv >= 1.0) {
        return 0;
    }
    floor_log2(inv.min(f32::MAX)).min(max_depth)
}

/// Opacity-corrected front-to-back compositing of one lattice sample.
/// `rgba` holds one classified value per channel; the sample covers
/// `2^exp` base steps.
#[inline]
pub fn composite(acc: &mut [f32; 4], rgba: &[[f32; 4]], exp: u32) {
    let mut color = [0.0f32; 3];
    let mut transparency = 1.0f32;
    for c in rgba {
        color[0] += c[0] * c[3];
        color[1] += c[1] * c[3];
        color[2] += c[2] * c[3];
        transparency *= 1.0 - c[3];
    }
    let alpha = 1.0 - transparency;
    if alpha == 0.0 {
        return;
    }
    let (alpha_c, scale) = if exp == 0 {
        (alpha, 1.0)
    } else {
        let a = 1.0 - transparency.powi(1 << exp);
        (a, a / alpha)
    };
    let w = 1.0 - acc[3];
    acc[0] += w * color[0] * scale;
    acc[1] += w * color[1] * scale;
    acc[2] += w * color[2] * scale;
    acc[3] += w * alpha_c;
}

/// Per-frame, per-channel constants shared by every renderer.
pub(crate) struct Frame<'a> {
    pub cfg: &'a RenderConfig,
    pub channels: &'a [ChannelSettings],
    pub k: u32,
}

impl Frame<'_> {
    #[inline]
    pub(crate) fn levels_at(&self, t: f32, out: &mut [u32]) -> u32 {
        let mut exp = u32::MAX;
        for (c, o) in self.channels.iter().zip(out.iter_mut()) {
            *o = choose_resolution_level(c.level_range, t, self.cfg.lod_distance);
            exp = exp.min(*o);
        }
        if exp == u32::MAX {
            0
        } else {
            exp
        }
    }

    #[inline]
    pub(crate) fn exp_at(&self, t: f32) -> u32 {
        self.channels
            .iter()
            .map(|c| choose_resolution_level(c.level_range, t, self.cfg.lod_distance))
            .min()
            .unwrap_or(0)
    }

    /// Smallest ray distance beyond `t` at which the level selection can
    /// change.
    #[inline]
    pub(crate) fn lod_boundary(&self, t: f32) -> f32 {
        let t0 = self.cfg.lod_distance;
        let r = (t / t0).max(1.0);
        if !r.is_finite() {
            return f32::INFINITY;
        }
        t0 * (1u64 << (floor_log2(r) + 1).min(63)) as f32
    }

    #[inline]
    pub(crate) fn t_at(&self, span: (f32, f32), i: u32) -> f32 {
        span.0 + i as f32 * self.cfg.base_step
    }

    /// Advance the lattice index past `t_end` (at least one sample).
    /// Returns the number of positions passed over.
    #[inline]
    pub(crate) fn skip_to(
        &self,
        span: (f32, f32),
        i: &mut u32,
        t_end: f32,
        row: &mut RowCtx,
        pixel: u32,
        empty: bool,
    ) {
        loop {
            let t = self.t_at(span, *i);
            row.skipped += 1;
            if empty && self.cfg.record_skips {
                row.skips.push(SkippedSample { pixel, t });
            }
            *i += 1 << self.exp_at(t);
            let next = self.t_at(span, *i);
            if next >= t_end || next >= span.1 {
                break;
            }
        }
    }
}

/// Per-row scratch and accumulators.
pub(crate) struct RowCtx {
    pub requests: Vec<Request>,
    seen: HashSet<Request>,
    pub dropped: usize,
    cap: usize,
    pub used: HashSet<BrickId>,
    pub pixel_bricks: Vec<BrickId>,
    pub per_pixel: Vec<u16>,
    pub evaluated: u64,
    pub skipped: u64,
    pub steps: u64,
    pub hist: Vec<u64>,
    pub skips: Vec<SkippedSample>,
    pub levels: Vec<u32>,
    pub rgba: Vec<[f32; 4]>,
    k: u32,
}

impl RowCtx {
    fn new(channels: usize, k: u32, cap: usize) -> Self {
        Self {
            requests: Vec::new(),
            seen: HashSet::new(),
            dropped: 0,
            cap,
            used: HashSet::new(),
            pixel_bricks: Vec::new(),
            per_pixel: Vec::new(),
            evaluated: 0,
            skipped: 0,
            steps: 0,
            hist: vec![0; channels * k as usize],
            skips: Vec::new(),
            levels: vec![0; channels],
            rgba: vec![[0.0; 4]; channels],
            k,
        }
    }

    #[inline]
    pub(crate) fn request(&mut self, r: Request) {
        if self.seen.contains(&r) {
            return;
        }
        if self.requests.len() >= self.cap {
            self.dropped += 1;
            return;
        }
        self.seen.insert(r);
        self.requests.push(r);
    }

    /// Count `id` as required for the current pixel.
    #[inline]
    pub(crate) fn use_brick(&mut self, id: BrickId) {
        if !self.pixel_bricks.contains(&id) {
            self.pixel_bricks.push(id);
        }
    }

    #[inline]
    pub(crate) fn read_level(&mut self, channel: usize, level: u32) {
        self.hist[channel * self.k as usize + level as usize] += 1;
    }

    fn finish_pixel(&mut self) {
        self.per_pixel
            .push(self.pixel_bricks.len().min(u16::MAX as usize) as u16);
        for id in self.pixel_bricks.drain(..) {
            self.used.insert(id);
        }
    }
}

/// Ray/volume parameter span, if the ray hits the unit cube.
#[inline]
pub(crate) fn volume_span(ray: &Ray) -> Option<(f32, f32)> {
    ray.intersect(&Aabb::UNIT).filter(|(a, b)| a < b)
}

/// Volume position of the lattice sample at ray distance `t`.
#[inline]
pub fn sample_pos(ray: &Ray, t: f32) -> Vec3 {
    ray.at(t).clamp01()
}

/// Render all pixels with `march`, rows in parallel, then merge requests
/// in scanline order.
pub(crate) fn render_rows<F>(
    cfg: &RenderConfig,
    cam: &Camera,
    channels: usize,
    k: u32,
    march: F,
) -> FrameOutput
where
    F: Fn(&Ray, (f32, f32), u32, &mut RowCtx) -> [f32; 4] + Sync,
{
    let gen = RayGen::new(cam, cfg.width, cfg.height);
    let rows: Vec<(Vec<[f32; 4]>, RowCtx)> = (0..cfg.height)
        .into_par_iter()
        .map(|y| {
            let mut row = RowCtx::new(channels, k, cfg.max_requests);
            let mut px = Vec::with_capacity(cfg.width as usize);
            for x in 0..cfg.width {
                let ray = gen.ray(x, y);
                let c = match volume_span(&ray) {
                    Some(span) => march(&ray, span, y * cfg.width + x, &mut row),
                    None => [0.0; 4],
                };
                row.finish_pixel();
                px.push(c);
            }
            (px, row)
        })
        .collect();

    let mut pixels = Vec::with_capacity((cfg.width * cfg.height) as usize);
    let mut requests = Vec::new();
    let mut seen = HashSet::new();
    let mut used = HashSet::new();
    let mut stats = FrameStats {
        level_histogram: vec![vec![0; k as usize]; channels],
        ..FrameStats::default()
    };
    let mut skipped = Vec::new();
    for (px, row) in rows {
        pixels.extend(px);
        for r in row.requests {
            if !seen.insert(r) {
                continue;
            }
            if requests.len() < cfg.max_requests {
                requests.push(r);
            } else {
                stats.requests_dropped += 1;
            }
        }
        stats.requests_dropped += row.dropped;
        used.extend(row.used);
        stats.per_pixel_bricks.extend(row.per_pixel);
        stats.samples_evaluated += row.evaluated;
        stats.samples_skipped += row.skipped;
        stats.traversal_steps += row.steps;
        for (i, v) in row.hist.iter().enumerate() {
            stats.level_histogram[i / k as usize][i % k as usize] += v;
        }
        skipped.extend(row.skips);
    }
    let mut used_bricks: Vec<BrickId> = used.into_iter().collect();
    used_bricks.sort_unstable();
    stats.required_bricks = used_bricks.len();
    FrameOutput {
        image: Image::new(cfg.width, cfg.height, pixels),
        requests,
        used_bricks,
        stats,
        skipped,
    }
}
