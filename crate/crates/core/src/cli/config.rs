use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::octree::OctreeConfig;
use crate::render::{Camera, ChannelSettings, RenderConfig};
use crate::service::{HttpTransport, InProcessTransport, Transport};
use crate::session::{Method, SessionConfig};
use crate::transfer::TransferFunction;
use crate::volume::{BrickStore, DiskStore};

/// Field-wise `flag.or(file)`.
pub trait Merge {
    fn merge(self, file: Self) -> Self;
}

/// Where bricks come from and how the engine is set up.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SessionArgs {
    /// Ingest output directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Base URL of a running brick server.
    #[arg(long, conflicts_with = "data")]
    pub url: Option<String>,
    /// residency, pagetable or octree.
    #[arg(long)]
    pub method: Option<Method>,
    /// Cache extent in bricks per axis.
    #[arg(long, value_delimiter = ',')]
    pub cache_slots: Option<Vec<u32>>,
    /// Dataset channel shown in each channel slot.
    #[arg(long, value_delimiter = ',')]
    pub mapping: Option<Vec<u32>>,
    /// Residency octree subdivision depth.
    #[arg(long)]
    pub depth: Option<u32>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    /// Base sample spacing in normalized units.
    #[arg(long)]
    pub step: Option<f32>,
    /// Maximum requests emitted per frame.
    #[arg(long)]
    pub request_cap: Option<usize>,
    /// Ray distance below which the finest allowed level is used.
    #[arg(long)]
    pub lod_distance: Option<f32>,
    /// Fetch worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Do not wait for downloads between frames.
    #[arg(long = "async", num_args = 0..=1, default_missing_value = "true")]
    #[serde(rename = "async")]
    pub asynchronous: Option<bool>,
    /// Ignore the server's metadata endpoint and compute metadata from bricks.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub plain: Option<bool>,
    /// Pin a slot to one level, as SLOT:LEVEL. Repeatable.
    #[arg(long = "pin")]
    pub pins: Option<Vec<String>>,
}

impl_merge!(SessionArgs {
    data,
    url,
    method,
    cache_slots,
    mapping,
    depth,
    width,
    height,
    step,
    request_cap,
    lod_distance,
    workers,
    asynchronous,
    plain,
    pins,
});

impl SessionArgs {
    pub fn transport(&self) -> Result<Arc<dyn Transport>> {
        match (&self.data, &self.url) {
            (Some(dir), _) => {
                let mut store = DiskStore::open(dir)?;
                if self.plain.unwrap_or(false) {
                    store = store.plain_files();
                }
                let store: Arc<dyn BrickStore> = Arc::new(store);
                Ok(Arc::new(InProcessTransport::new(store)))
            }
            (None, Some(url)) => Ok(Arc::new(HttpTransport::new(url))),
            (None, None) => Err(Error::Config("no dataset: pass --data or --url".into())),
        }
    }

    pub fn session_config(&self) -> Result<SessionConfig> {
        let d = SessionConfig::default();
        let cache_slots = match &self.cache_slots {
            Some(v) => triple(v, "cache-slots")?,
            None => d.cache_slots,
        };
        let mapping = self.mapping.clone().unwrap_or_else(|| vec![0]);
        let octree = OctreeConfig {
            depth: self.depth.unwrap_or(d.octree.depth),
            channel_slots: mapping.len() as u32,
            ..d.octree
        };
        let rd = RenderConfig::default();
        let render = RenderConfig {
            width: self.width.unwrap_or(rd.width),
            height: self.height.unwrap_or(rd.height),
            base_step: self.step.unwrap_or(rd.base_step),
            lod_distance: self.lod_distance.unwrap_or(rd.lod_distance),
            max_requests: self.request_cap.unwrap_or(rd.max_requests),
            ..rd
        };
        Ok(SessionConfig {
            method: self.method.unwrap_or(d.method),
            cache_slots,
            mapping,
            octree,
            render,
            fetch_workers: self.workers.unwrap_or(d.fetch_workers),
            synchronous: !self.asynchronous.unwrap_or(false),
            check_invariants: false,
            ..d
        })
    }

    /// `(slot, level)` pairs from `--pin`.
    pub fn parsed_pins(&self) -> Result<Vec<(u32, u32)>> {
        self.pins
            .iter()
            .flatten()
            .map(|p| {
                let parsed = p
                    .split_once(':')
                    .and_then(|(s, l)| Some((s.trim().parse().ok()?, l.trim().parse().ok()?)));
                parsed.ok_or_else(|| Error::Config(format!("bad pin `{p}`, expected SLOT:LEVEL")))
            })
            .collect()
    }
}

/// Scripted camera path: a circle about the y-axis through the volume
/// center.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct OrbitArgs {
    #[arg(long)]
    pub frames: Option<u32>,
    #[arg(long)]
    pub radius: Option<f32>,
    /// Degrees above the equator.
    #[arg(long)]
    pub elevation: Option<f32>,
    /// Azimuth of the first frame in degrees.
    #[arg(long)]
    pub azimuth: Option<f32>,
}

impl_merge!(OrbitArgs {
    frames,
    radius,
    elevation,
    azimuth
});

impl OrbitArgs {
    pub fn cameras(&self, default_frames: u32) -> Vec<Camera> {
        orbit(
            self.frames.unwrap_or(default_frames),
            self.radius.unwrap_or(2.0),
            self.elevation.unwrap_or(20.0),
            self.azimuth.unwrap_or(0.0),
        )
    }
}

/// `frames` poses evenly spaced over a full turn.
pub fn orbit(frames: u32, radius: f32, elevation: f32, azimuth: f32) -> Vec<Camera> {
    (0..frames)
        .map(|i| {
            Camera::orbit(
                radius,
                elevation,
                azimuth + 360.0 * i as f32 / frames as f32,
            )
        })
        .collect()
}

/// One `[[channels]]` entry of the config file.
#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ChannelConfig {
    pub slot: u32,
    /// Control points `[scalar, r, g, b, a]`.
    pub tf: Option<TransferFunction>,
    /// Opacity ramp `[lo, hi]`, used when `tf` is absent.
    pub ramp: Option<[f32; 2]>,
    pub color: Option<[f32; 3]>,
    pub alpha: Option<f32>,
    pub level_range: Option<[u32; 2]>,
    pub importance: Option<u32>,
}

pub const PALETTE: [[f32; 3]; 4] = [
    [1.0, 0.35, 0.3],
    [0.3, 1.0, 0.4],
    [0.35, 0.45, 1.0],
    [1.0, 0.9, 0.3],
];

/// Ramp transfer function hiding low background values.
pub fn default_tf(slot: u32) -> TransferFunction {
    TransferFunction::ramp(30.0, 220.0, PALETTE[slot as usize % 4], 0.35)
}

/// Channel list for `slots` slots over `levels` levels: defaults, then
/// config entries, then pins.
pub fn channel_settings(
    slots: u32,
    levels: u32,
    entries: &[ChannelConfig],
    pins: &[(u32, u32)],
) -> Result<Vec<ChannelSettings>> {
    let mut out: Vec<ChannelSettings> = (0..slots)
        .map(|s| ChannelSettings::new(s, default_tf(s), levels))
        .collect();
    for e in entries {
        let Some(c) = out.get_mut(e.slot as usize) else {
            return Err(Error::Config(format!(
                "channel entry for slot {} but only {slots} slots",
                e.slot
            )));
        };
        if let Some(tf) = &e.tf {
            c.tf = tf.clone();
        } else if e.ramp.is_some() || e.color.is_some() || e.alpha.is_some() {
            let [lo, hi] = e.ramp.unwrap_or([30.0, 220.0]);
            let [r, g, b] = e.color.unwrap_or(PALETTE[e.slot as usize % 4]);
            let a = e.alpha.unwrap_or(0.35);
            let mut pts = vec![(lo, [r, g, b, 0.0]), (hi, [r, g, b, a])];
            if hi < 255.0 {
                pts.push((255.0, [r, g, b, a]));
            }
            c.tf = TransferFunction::new(pts)?;
        }
        if let Some(r) = e.level_range {
            c.level_range = r;
        }
        if let Some(i) = e.importance {
            c.importance = i;
        }
    }
    for &(slot, level) in pins {
        let Some(c) = out.get_mut(slot as usize) else {
            return Err(Error::Config(format!(
                "pin for slot {slot} but only {slots} slots"
            )));
        };
        c.level_range = [level, level];
    }
    Ok(out)
}

/// Contents of a `--config` TOML file. Every section is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub session: SessionArgs,
    pub orbit: OrbitArgs,
    pub channels: Vec<ChannelConfig>,
    pub ingest: super::IngestOpts,
    pub serve: super::ServeOpts,
    pub render: super::RenderOpts,
    pub bench: super::BenchOpts,
    pub verify: super::VerifyOpts,
    #[serde(rename = "viewer-serve")]
    pub viewer_serve: super::ViewerOpts,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub(crate) fn triple(v: &[u32], what: &str) -> Result<[u32; 3]> {
    v.try_into()
        .map_err(|_| Error::Config(format!("--{what} expects three comma-separated values")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: ConfigFile = toml::from_str(
            r#"
            [session]
            method = "octree"
            width = 64
            mapping = [1, 0]
            [orbit]
            frames = 12
            [[channels]]
            slot = 1
            level-range = [2, 2]
            "#,
        )
        .unwrap();
        let flags = SessionArgs {
            width: Some(32),
            ..SessionArgs::default()
        };
        let s = flags.merge(file.session);
        let cfg = s.session_config().unwrap();
        assert_eq!(cfg.method, Method::Octree);
        assert_eq!(cfg.render.width, 32);
        assert_eq!(cfg.mapping, vec![1, 0]);
        assert_eq!(cfg.octree.channel_slots, 2);
        let ch = channel_settings(2, 4, &file.channels, &[(0, 3)]).unwrap();
        assert_eq!(ch[1].level_range, [2, 2]);
        assert_eq!(ch[0].level_range, [3, 3]);
        assert_eq!(OrbitArgs::default().merge(file.orbit).cameras(8).len(), 12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ConfigFile>("[session]\nwidht = 3\n").is_err());
    }

    #[test]
    fn pins_parse() {
        let s = SessionArgs {
            pins: Some(vec!["0:3".into(), "2:1".into()]),
            ..SessionArgs::default()
        };
        assert_eq!(s.parsed_pins().unwrap(), vec![(0, 3), (2, 1)]);
        let bad = SessionArgs {
            pins: Some(vec!["0-3".into()]),
            ..SessionArgs::default()
        };
        assert!(bad.parsed_pins().is_err());
    }

    #[test]
    fn orbit_is_a_full_turn() {
        let cams = orbit(4, 2.0, 0.0, 0.0);
        let c = crate::geometry::Vec3::splat(0.5);
        for cam in &cams {
            assert!(((cam.position - c).length() - 2.0).abs() < 1e-5);
            assert!((cam.position.y - 0.5).abs() < 1e-6);
        }
        assert!((cams[2].position - c + (cams[0].position - c)).length() < 1e-5);
    }
}
