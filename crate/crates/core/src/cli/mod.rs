//! Command-line front end: ingest, serving, scripted rendering,
//! benchmarking and verification.

/// Field-wise `flag.or(file)` for structs of options.
macro_rules! impl_merge {
    ($t:ty { $($f:ident),* $(,)? }) => {
        impl Merge for $t {
            fn merge(self, file: Self) -> Self {
                Self { $($f: self.$f.or(file.$f)),* }
            }
        }
    };
}

mod config;
mod verify;

pub use config::{
    channel_settings, default_tf, orbit, ChannelConfig, ConfigFile, Merge, OrbitArgs, SessionArgs,
    PALETTE,
};
pub use verify::{skipped_violations, verify_dataset, CheckResult};

use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{Camera, ChannelSettings};
use crate::service::{BrickServer, InProcessTransport, Transport};
use crate::session::protocol::{self, ViewState};
use crate::session::{FrameRecord, Method, Session, SessionConfig};
use crate::synth;
use crate::volume::{BrickStore, BuildOptions, DiskStore, Dtype, Hierarchy, RawVolume};
use config::triple;

#[derive(Parser, Debug)]
#[command(
    name = "resoct",
    version,
    about = "Out-of-core multi-channel volume rendering with residency octrees"
)]
pub struct Cli {
    /// TOML file supplying defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a raw volume into a bricked multi-resolution dataset.
    Ingest(IngestOpts),
    /// Serve an ingest directory over HTTP.
    Serve(ServeOpts),
    /// Render a scripted orbit to PNG frames and a stats CSV.
    Render(RenderArgs),
    /// Compare methods over identical orbits.
    Bench(BenchArgs),
    /// Run the invariant and oracle checks over a dataset.
    Verify(VerifyArgs),
    /// Interactive WebSocket session plus static viewer hosting.
    ViewerServe(ViewerArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Synthetic {
    /// Shell, vessel and blob structures, one per channel.
    Shell,
    Ramp,
    Noise,
    /// All zeros.
    Zero,
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct IngestOpts {
    /// Raw little-endian files; several files are read as consecutive channels.
    #[arg(long, num_args = 1..)]
    pub input: Option<Vec<PathBuf>>,
    /// Generate a synthetic volume instead of reading `--input`.
    #[arg(long, conflicts_with = "input")]
    pub synthetic: Option<Synthetic>,
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<u32>>,
    #[arg(long)]
    pub dtype: Option<Dtype>,
    #[arg(long)]
    pub channels: Option<u32>,
    #[arg(long)]
    pub brick_size: Option<u32>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub factors: Option<Vec<u32>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    /// Seed for synthetic volumes.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl_merge!(IngestOpts {
    input,
    synthetic,
    dims,
    dtype,
    channels,
    brick_size,
    levels,
    factors,
    out,
    name,
    seed
});

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ServeOpts {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Answer /metadata with 501, like a plain file server.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub plain: Option<bool>,
    /// Directory served under /viewer/.
    #[arg(long)]
    pub assets: Option<PathBuf>,
}

impl_merge!(ServeOpts {
    data,
    addr,
    threads,
    plain,
    assets
});

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct RenderOpts {
    /// Output directory for frames and stats.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub orbit: OrbitArgs,
    #[command(flatten)]
    pub opts: RenderOpts,
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct BenchOpts {
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Octree depths to sweep.
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<u32>>,
    /// Frames allowed per pose to converge; 0 renders one frame per pose.
    #[arg(long)]
    pub converge: Option<u32>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub orbit: OrbitArgs,
    #[command(flatten)]
    pub opts: BenchOpts,
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct VerifyOpts {
    /// Number of randomized configurations.
    #[arg(long)]
    pub seeds: Option<u32>,
    /// First seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub opts: VerifyOpts,
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ViewerOpts {
    /// WebSocket address of the interactive session.
    #[arg(long)]
    pub ws_addr: Option<String>,
    /// HTTP address for bricks and viewer assets.
    #[arg(long)]
    pub http_addr: Option<String>,
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Exit after this many client connections.
    #[arg(long)]
    pub max_clients: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ViewerArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub opts: ViewerOpts,
}

/// Averages of one (depth, method) bench run.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchRow {
    pub depth: u32,
    pub method: String,
    pub poses: usize,
    pub frames: usize,
    pub converged_poses: usize,
    pub avg_ms: f64,
    pub avg_required_bricks: f64,
    pub avg_cache_bytes: f64,
    pub avg_samples_skipped: f64,
    pub traversal_steps: u64,
}

/// Runs every (depth, method) pair over the same poses with a fresh
/// session each. With `converge > 0` each pose is rendered until the
/// session converges (at most `converge` frames) and the final frame is
/// measured; otherwise one frame per pose is measured.
pub fn run_bench(
    transport: &Arc<dyn Transport>,
    base: &SessionConfig,
    channels: &[ChannelSettings],
    cameras: &[Camera],
    methods: &[Method],
    depths: &[u32],
    converge: u32,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &depth in depths {
        for &method in methods {
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.octree.depth = depth;
            cfg.render.traversal_start_level = cfg.render.traversal_start_level.min(depth);
            let mut s = Session::new(transport.clone(), cfg)?;
            let (mut frames, mut conv) = (0, 0);
            let mut acc = [0.0f64; 4];
            let mut steps = 0;
            for cam in cameras {
                if converge > 0 {
                    let (_, n) = s.run_until_converged(cam, channels, converge as usize)?;
                    frames += n;
                    conv += usize::from(s.converged());
                } else {
                    s.step_frame(cam, channels)?;
                    frames += 1;
                }
                let r = s.history().last().expect("frame recorded");
                acc[0] += r.ms;
                acc[1] += r.required_bricks as f64;
                acc[2] += r.cache_bytes as f64;
                acc[3] += r.samples_skipped as f64;
                steps += r.traversal_steps;
            }
            let n = cameras.len().max(1) as f64;
            rows.push(BenchRow {
                depth,
                method: method.name().to_string(),
                poses: cameras.len(),
                frames,
                converged_poses: conv,
                avg_ms: acc[0] / n,
                avg_required_bricks: acc[1] / n,
                avg_cache_bytes: acc[2] / n,
                avg_samples_skipped: acc[3] / n,
                traversal_steps: steps,
            });
        }
    }
    Ok(rows)
}

pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>5} {:<10} {:>6} {:>7} {:>9} {:>12} {:>14} {:>14} {:>16}\n",
        "depth",
        "method",
        "poses",
        "frames",
        "ms/frame",
        "req.bricks",
        "cache bytes",
        "skipped",
        "traversal steps"
    );
    for r in rows {
        s += &format!(
            "{:>5} {:<10} {:>6} {:>7} {:>9.1} {:>12.1} {:>14.0} {:>14.0} {:>16}\n",
            r.depth,
            r.method,
            r.poses,
            r.frames,
            r.avg_ms,
            r.avg_required_bricks,
            r.avg_cache_bytes,
            r.avg_samples_skipped,
            r.traversal_steps
        );
    }
    s
}

/// One row of the render stats CSV.
#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CsvRow {
    frame: u64,
    ms: f64,
    required_bricks: usize,
    cache_bytes: usize,
    requests: usize,
    samples_skipped: u64,
}

impl From<&FrameRecord> for CsvRow {
    fn from(r: &FrameRecord) -> Self {
        Self {
            frame: r.frame,
            ms: r.ms,
            required_bricks: r.required_bricks,
            cache_bytes: r.cache_bytes,
            requests: r.requests,
            samples_skipped: r.samples_skipped,
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// One frame per camera; writes `frame_NNNN.png` and `stats.csv` to `out`.
pub fn run_render(
    transport: Arc<dyn Transport>,
    cfg: SessionConfig,
    channels: &[ChannelSettings],
    cameras: &[Camera],
    out: &Path,
) -> Result<Vec<FrameRecord>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut s = Session::new(transport, cfg)?;
    let csv_path = out.join("stats.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_error)?;
    for (i, cam) in cameras.iter().enumerate() {
        let frame = s.step_frame(cam, channels)?;
        let path = out.join(format!("frame_{i:04}.png"));
        std::fs::write(&path, frame.image.to_png()).map_err(|e| Error::io(&path, e))?;
        w.serialize(CsvRow::from(s.history().last().expect("frame recorded")))
            .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(s.history().to_vec())
}

fn synthetic_volume(kind: Synthetic, n: u32, channels: u32, seed: u64) -> RawVolume {
    match kind {
        Synthetic::Shell => synth::shell_vessels(n, channels, seed),
        Synthetic::Ramp => synth::ramp(n),
        Synthetic::Noise => synth::noise(n, seed),
        Synthetic::Zero => synth::constant(n, &vec![0; channels as usize]),
    }
}

pub fn run_ingest(o: &IngestOpts) -> Result<Hierarchy> {
    let out = o
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    let raw = if let Some(kind) = o.synthetic {
        let n = o
            .dims
            .as_ref()
            .and_then(|d| d.first().copied())
            .unwrap_or(64);
        synthetic_volume(kind, n, o.channels.unwrap_or(1), o.seed.unwrap_or(1))
    } else {
        let inputs = o
            .input
            .as_ref()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Config("--input or --synthetic is required".into()))?;
        let dims = triple(
            o.dims
                .as_ref()
                .ok_or_else(|| Error::Config("--dims is required".into()))?,
            "dims",
        )?;
        let mut bytes = Vec::new();
        for p in inputs {
            bytes.extend(std::fs::read(p).map_err(|e| Error::io(p, e))?);
        }
        let channels = o.channels.unwrap_or(inputs.len() as u32);
        RawVolume::from_bytes(&bytes, dims, o.dtype.unwrap_or(Dtype::U8), channels)?
    };
    let d = BuildOptions::default();
    let opts = BuildOptions {
        name: o.name.clone().unwrap_or(d.name),
        brick_size: o.brick_size.map_or(d.brick_size, |b| [b; 3]),
        levels: o.levels.unwrap_or(d.levels),
        factors: match &o.factors {
            Some(f) => triple(f, "factors")?,
            None => d.factors,
        },
    };
    let h = Hierarchy::build(&raw, &opts)?;
    h.write(out)?;
    Ok(h)
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    path.map_or_else(|| Ok(ConfigFile::default()), ConfigFile::load)
}

fn dataset_levels(t: &dyn Transport) -> Result<u32> {
    Ok(t.manifest()?.levels.len() as u32)
}

/// Run one parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(o) => {
            let o = o.merge(file.ingest);
            let h = run_ingest(&o)?;
            let m = h.manifest();
            println!(
                "wrote {} channels x {} levels ({:?} .. {:?}) to {}",
                m.channels,
                m.levels.len(),
                m.levels[0].dims,
                m.levels.last().unwrap().dims,
                o.out.unwrap().display()
            );
        }
        Command::Serve(o) => {
            let o = o.merge(file.serve);
            let dir = o
                .data
                .or(file.session.data)
                .ok_or_else(|| Error::Config("--data is required".into()))?;
            let mut store = DiskStore::open(&dir)?;
            if o.plain.unwrap_or(false) {
                store = store.plain_files();
            }
            let addr = o.addr.unwrap_or_else(|| "127.0.0.1:8080".into());
            let server = BrickServer::start_with_static(
                Arc::new(store),
                &addr,
                o.threads.unwrap_or(8),
                o.assets,
            )?;
            println!("serving {} at {}", dir.display(), server.url());
            server.join();
        }
        Command::Render(a) => {
            let s = a.session.merge(file.session);
            let orbit = a.orbit.merge(file.orbit);
            let out = a
                .opts
                .out
                .or(file.render.out)
                .ok_or_else(|| Error::Config("--out is required".into()))?;
            let t = s.transport()?;
            let cfg = s.session_config()?;
            let ch = channel_settings(
                cfg.mapping.len() as u32,
                dataset_levels(t.as_ref())?,
                &file.channels,
                &s.parsed_pins()?,
            )?;
            let records = run_render(t, cfg, &ch, &orbit.cameras(8), &out)?;
            println!("{} frames written to {}", records.len(), out.display());
        }
        Command::Bench(a) => {
            let s = a.session.merge(file.session);
            let orbit = a.orbit.merge(file.orbit);
            let o = a.opts.merge(file.bench);
            let t = s.transport()?;
            let cfg = s.session_config()?;
            let ch = channel_settings(
                cfg.mapping.len() as u32,
                dataset_levels(t.as_ref())?,
                &file.channels,
                &s.parsed_pins()?,
            )?;
            let methods = o.methods.unwrap_or_else(|| Method::ALL.to_vec());
            let depths = o.depths.unwrap_or_else(|| vec![cfg.octree.depth]);
            let rows = run_bench(
                &t,
                &cfg,
                &ch,
                &orbit.cameras(36),
                &methods,
                &depths,
                o.converge.unwrap_or(0),
            )?;
            print!("{}", format_bench(&rows));
            if let Some(path) = o.csv {
                let mut w = csv::Writer::from_path(&path).map_err(csv_error)?;
                for r in &rows {
                    w.serialize(r).map_err(csv_error)?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Verify(a) => {
            let s = a.session.merge(file.session);
            let o = a.opts.merge(file.verify);
            let dir = s
                .data
                .clone()
                .ok_or_else(|| Error::Config("verify needs --data".into()))?;
            let mut cfg = s.session_config()?;
            if s.width.is_none() {
                cfg.render.width = 64;
            }
            if s.height.is_none() {
                cfg.render.height = 64;
            }
            let results = verify_dataset(&dir, o.seeds.unwrap_or(10), o.seed.unwrap_or(0), &cfg);
            let mut stdout = std::io::stdout().lock();
            for r in &results {
                let _ = writeln!(stdout, "{r}");
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(1);
            }
        }
        Command::ViewerServe(a) => {
            let s = a.session.merge(file.session);
            let o = a.opts.merge(file.viewer_serve);
            let dir = s
                .data
                .clone()
                .ok_or_else(|| Error::Config("viewer-serve needs --data".into()))?;
            let mut store = DiskStore::open(&dir)?;
            if s.plain.unwrap_or(false) {
                store = store.plain_files();
            }
            let store: Arc<dyn BrickStore> = Arc::new(store);
            let http_addr = o.http_addr.unwrap_or_else(|| "127.0.0.1:8080".into());
            let assets = o.assets.unwrap_or_else(|| "viewer".into());
            let server =
                BrickServer::start_with_static(store.clone(), &http_addr, 4, Some(assets))?;
            let t: Arc<dyn Transport> = Arc::new(InProcessTransport::new(store));
            let cfg = s.session_config()?;
            let ch = channel_settings(
                cfg.mapping.len() as u32,
                dataset_levels(t.as_ref())?,
                &file.channels,
                &s.parsed_pins()?,
            )?;
            let mut session = Session::new(t, cfg)?;
            let mut view = ViewState {
                camera: Camera::orbit(2.0, 20.0, 30.0),
                channels: ch,
            };
            let ws_addr = o.ws_addr.unwrap_or_else(|| "127.0.0.1:9001".into());
            let listener = TcpListener::bind(&ws_addr).map_err(|e| Error::io(&ws_addr, e))?;
            println!(
                "viewer at {}/viewer/, session at ws://{}/session",
                server.url(),
                listener.local_addr().map_err(|e| Error::io(&ws_addr, e))?
            );
            protocol::serve(listener, &mut session, &mut view, o.max_clients)?;
            server.shutdown();
        }
    }
    Ok(0)
}

impl_merge!(BenchOpts {
    methods,
    depths,
    converge,
    csv
});

impl_merge!(VerifyOpts { seeds, seed });

impl_merge!(ViewerOpts {
    ws_addr,
    http_addr,
    assets,
    max_clients
});
