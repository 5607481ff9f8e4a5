use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{orbit, PALETTE};
use crate::error::Result;
use crate::render::{
    render_reference, sample_pos, BrickedVolume, Camera, ChannelSettings, FrameOutput,
};
use crate::service::{InProcessTransport, Transport};
use crate::session::{Method, Session, SessionConfig};
use crate::transfer::TransferFunction;
use crate::volume::{decompress_brick, BrickStore, DiskStore};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Tally of one named check over several cases.
struct Tally {
    name: &'static str,
    cases: usize,
    failures: Vec<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            cases: 0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, r: std::result::Result<(), String>) {
        self.cases += 1;
        if let Err(e) = r {
            self.failures.push(e);
        }
    }

    fn finish(self) -> CheckResult {
        let detail = match self.failures.first() {
            None => format!("{} cases", self.cases),
            Some(first) => format!(
                "{} of {} cases failed; first: {first}",
                self.failures.len(),
                self.cases
            ),
        };
        CheckResult {
            name: self.name,
            passed: self.failures.is_empty(),
            detail,
        }
    }
}

fn count_brick_files(dir: &Path) -> usize {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return 0;
    };
    entries
        .flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                count_brick_files(&p)
            } else {
                usize::from(p.extension().is_some_and(|x| x == "lz4"))
            }
        })
        .sum()
}

fn check_files(store: &DiskStore) -> CheckResult {
    let m = store.manifest();
    let mut t = Tally::new("brick_files");
    let mut expected = 0;
    for c in 0..m.channels {
        for (l, lvl) in m.levels.iter().enumerate() {
            let g = lvl.brick_grid;
            for z in 0..g[2] {
                for y in 0..g[1] {
                    for x in 0..g[0] {
                        expected += 1;
                        let r = store
                            .brick_bytes(c, l as u32, [x, y, z])
                            .map_err(|e| e.to_string())
                            .and_then(|b| {
                                decompress_brick(&b, m.brick_voxels()).map_err(|e| e.to_string())
                            })
                            .map(|_| ())
                            .map_err(|e| format!("{}: {e}", m.brick_path(c, l as u32, [x, y, z])));
                        t.record(r);
                    }
                }
            }
        }
    }
    let found = count_brick_files(store.dir());
    t.record(if found == expected {
        Ok(())
    } else {
        Err(format!(
            "{found} brick files on disk, manifest implies {expected}"
        ))
    });
    t.finish()
}

/// Lattice positions skipped as empty where some channel's transfer
/// function is non-transparent at any level of its range.
pub fn skipped_violations(
    vol: &BrickedVolume,
    cam: &Camera,
    channels: &[ChannelSettings],
    out: &FrameOutput,
    width: u32,
    height: u32,
) -> usize {
    out.skipped
        .iter()
        .filter(|s| {
            let ray = cam.pixel_ray(s.pixel % width, s.pixel / width, width, height);
            let p = sample_pos(&ray, s.t);
            channels.iter().any(|c| {
                (c.level_range[0]..=c.level_range[1])
                    .any(|l| c.tf.eval(vol.sample(c.slot, l, p).0)[3] > 0.0)
            })
        })
        .count()
}

fn random_tf(rng: &mut ChaCha8Rng, slot: usize) -> TransferFunction {
    let lo = rng.gen_range(5.0f32..140.0).round();
    let hi = (lo + rng.gen_range(10.0f32..100.0)).min(255.0).round();
    TransferFunction::ramp(lo, hi, PALETTE[slot % 4], rng.gen_range(0.1..0.6))
}

struct Case {
    mapping: Vec<u32>,
    channels: Vec<ChannelSettings>,
    cameras: Vec<Camera>,
    method: Method,
}

fn random_case(rng: &mut ChaCha8Rng, dataset_channels: u32, levels: u32, method: Method) -> Case {
    let m = rng.gen_range(1..=dataset_channels.min(4));
    let mut all: Vec<u32> = (0..dataset_channels).collect();
    all.shuffle(rng);
    let mapping = all[..m as usize].to_vec();
    let channels = (0..m as usize)
        .map(|s| {
            let mut c = ChannelSettings::new(s as u32, random_tf(rng, s), levels);
            if rng.gen_bool(0.25) {
                let l = rng.gen_range(0..levels);
                c.level_range = [l, l];
            }
            c
        })
        .collect();
    let az = rng.gen_range(0.0f32..360.0);
    let cameras = orbit(
        4,
        rng.gen_range(1.6f32..2.6),
        rng.gen_range(-60.0f32..60.0),
        az,
    );
    Case {
        mapping,
        channels,
        cameras,
        method,
    }
}

/// Cache extent holding every brick of `m` channels.
fn full_cache(per_channel: u64, m: usize) -> [u32; 3] {
    let total = per_channel * m as u64;
    let side = (total as f64).cbrt().ceil() as u32;
    let z = (total as u32).div_ceil(side * side);
    [side, side, z.max(1)]
}

fn structural(
    t: &Arc<dyn Transport>,
    base: &SessionConfig,
    case: &Case,
    cache: [u32; 3],
) -> std::result::Result<(), String> {
    let mut cfg = base.clone();
    cfg.method = Method::Residency;
    cfg.mapping = case.mapping.clone();
    cfg.octree.channel_slots = case.mapping.len() as u32;
    cfg.cache_slots = cache;
    cfg.check_invariants = false;
    let mut s = Session::new(t.clone(), cfg).map_err(|e| e.to_string())?;
    for cam in case.cameras.iter().chain(case.cameras.iter()) {
        s.step_frame(cam, &case.channels)
            .map_err(|e| e.to_string())?;
        s.paging().check_bijection()?;
        s.octree().check_mask_consistency()?;
        s.octree().check_leaf_ground_truth(s.paging())?;
    }
    Ok(())
}

/// Runs the verification suite over an ingest output directory.
pub fn verify_dataset(
    dir: &Path,
    seeds: u32,
    base_seed: u64,
    base: &SessionConfig,
) -> Vec<CheckResult> {
    let store = match DiskStore::open(dir).and_then(|s| s.manifest().validate().map(|_| s)) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            return vec![CheckResult {
                name: "manifest",
                passed: false,
                detail: e.to_string(),
            }]
        }
    };
    let m = store.manifest().clone();
    let mut results = vec![
        CheckResult {
            name: "manifest",
            passed: true,
            detail: format!("{} channels, {} levels", m.channels, m.levels.len()),
        },
        check_files(&store),
    ];
    let shared: Arc<dyn BrickStore> = store.clone();
    let t: Arc<dyn Transport> = Arc::new(InProcessTransport::new(shared));
    let k = m.levels.len() as u32;
    let per_channel: u64 = m.levels.iter().map(|l| l.brick_count()).sum();
    let mut bijection = Tally::new("paging_bijection_and_masks");
    let mut oracle = Tally::new("oracle_equivalence");
    let mut skipping = Tally::new("skipping_soundness");
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(seed as u64));
        let method = Method::ALL[seed as usize % Method::ALL.len()];
        let case = random_case(&mut rng, m.channels, k, method);
        let small = [rng.gen_range(2..=4), 2, 2];
        bijection.record(structural(&t, base, &case, small));

        let r = (|| -> Result<std::result::Result<(), String>> {
            let vol = BrickedVolume::from_transport(t.as_ref(), &case.mapping)?;
            let mut cfg = base.clone();
            cfg.method = case.method;
            cfg.mapping = case.mapping.clone();
            cfg.octree.channel_slots = case.mapping.len() as u32;
            cfg.cache_slots = full_cache(per_channel, case.mapping.len());
            cfg.render.width = cfg.render.width.min(96);
            cfg.render.height = cfg.render.height.min(96);
            let (w, h) = (cfg.render.width, cfg.render.height);
            let mut s = Session::new(t.clone(), cfg.clone())?;
            let cam = case.cameras[0];
            let (out, n) = s.run_until_converged(&cam, &case.channels, 60)?;
            if !s.converged() {
                return Ok(Err(format!(
                    "seed {seed}: {} did not converge in {n} frames",
                    method.name()
                )));
            }
            let reference = render_reference(&vol, &cam, &case.channels, &cfg.render)?;
            let eq = if out.image.bit_identical(&reference.image) {
                Ok(())
            } else {
                Err(format!(
                    "seed {seed}: {} differs from reference in {} px",
                    method.name(),
                    out.image.diff_count(&reference.image)
                ))
            };
            let mut rc = cfg.render.clone();
            rc.record_skips = true;
            s.set_render_config(rc)?;
            let traced = s.render(&cam, &case.channels)?;
            let bad = skipped_violations(&vol, &cam, &case.channels, &traced, w, h);
            skipping.record(if bad == 0 {
                Ok(())
            } else {
                Err(format!(
                    "seed {seed}: {bad} skipped samples have nonzero opacity"
                ))
            });
            Ok(eq)
        })();
        match r {
            Ok(eq) => oracle.record(eq),
            Err(e) => {
                let msg = format!("seed {seed}: {e}");
                oracle.record(Err(msg.clone()));
                skipping.record(Err(msg));
            }
        }
    }
    results.extend([bijection.finish(), oracle.finish(), skipping.finish()]);
    results
}
