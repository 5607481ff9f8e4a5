//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Arguments select criteria by substring.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resoct::cli::{orbit, run_bench, BenchRow};
use resoct::octree::{NodeAddress, OctreeConfig, ResidencyOctree};
use resoct::paging::{BrickId, Paging, PagingConfig};
use resoct::render::{
    render_reference, sample_pos, BrickedVolume, Camera, ChannelSettings, RenderConfig,
};
use resoct::service::Transport;
use resoct::session::{Method, Session, SessionConfig};
use resoct::synth;
use resoct::transfer::TransferFunction;
use resoct::volume::{
    compress_brick, decompress_brick, Dtype, Hierarchy, LevelDesc, VolumeManifest,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn small() -> &'static Arc<Hierarchy> {
    static H: OnceLock<Arc<Hierarchy>> = OnceLock::new();
    H.get_or_init(|| build(&synth::shell_vessels(64, 1, 101), 3, 16))
}

fn single256() -> &'static Arc<Hierarchy> {
    static H: OnceLock<Arc<Hierarchy>> = OnceLock::new();
    H.get_or_init(|| build(&synth::shell_vessels(256, 1, 7), 4, 32))
}

fn multi256() -> &'static Arc<Hierarchy> {
    static H: OnceLock<Arc<Hierarchy>> = OnceLock::new();
    H.get_or_init(|| build(&synth::shell_vessels(256, 4, 7), 4, 32))
}

/// Cache extent holding every brick of `m` channels of `h`.
fn full_cache(h: &Hierarchy, m: u64) -> [u32; 3] {
    let total = h
        .manifest()
        .levels
        .iter()
        .map(|l| l.brick_count())
        .sum::<u64>()
        * m;
    let side = (total as f64).cbrt().ceil() as u32;
    [side, side, (total as u32).div_ceil(side * side)]
}

fn session_cfg(method: Method, mapping: Vec<u32>, cache: [u32; 3], size: u32) -> SessionConfig {
    SessionConfig {
        method,
        cache_slots: cache,
        octree: OctreeConfig {
            channel_slots: mapping.len() as u32,
            ..OctreeConfig::default()
        },
        mapping,
        render: RenderConfig {
            width: size,
            height: size,
            ..RenderConfig::default()
        },
        check_invariants: false,
        ..SessionConfig::default()
    }
}

fn poses() -> Vec<Camera> {
    vec![
        Camera::orbit(2.0, 20.0, 30.0),
        Camera::orbit(1.6, -35.0, 110.0),
        Camera::orbit(2.4, 60.0, 200.0),
        Camera::orbit(1.3, 5.0, 290.0),
        Camera::orbit(3.0, -70.0, 340.0),
    ]
}

fn oracle_equivalence() -> Outcome {
    let (h64, h256) = (small(), single256());
    let start = Instant::now();
    let mut frames = 0;
    for (name, h) in [("64^3", h64), ("256^3", h256)] {
        let vol = BrickedVolume::from_hierarchy(h, &[0]).unwrap();
        let cfg = session_cfg(Method::Residency, vec![0], full_cache(h, 1), 256);
        let ch = sparse_channels(1, h.manifest().levels.len() as u32);
        let mut s = Session::new(transport(h), cfg.clone()).unwrap();
        for (i, cam) in poses().iter().enumerate() {
            let (out, n) = s.run_until_converged(cam, &ch, 50).unwrap();
            frames += n;
            ensure(s.converged(), || {
                format!("{name} pose {i}: no convergence in {n} frames")
            })?;
            let r = render_reference(&vol, cam, &ch, &cfg.render).unwrap();
            ensure(out.image.bit_identical(&r.image), || {
                format!(
                    "{name} pose {i}: {} px differ",
                    out.image.diff_count(&r.image)
                )
            })?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "2 datasets x 5 poses bit-identical at 256^2, {frames} frames, {secs:.1} s"
    ))
}

fn random_tf(rng: &mut ChaCha8Rng) -> TransferFunction {
    let n = rng.gen_range(2..=5);
    let mut xs: Vec<f32> = (0..n).map(|_| rng.gen_range(0..=255) as f32).collect();
    xs.sort_by(f32::total_cmp);
    xs.dedup();
    if xs.len() < 2 {
        xs = vec![0.0, 255.0];
    }
    let pts = xs
        .into_iter()
        .map(|x| {
            let a = if rng.gen_bool(0.3) {
                0.0
            } else {
                rng.gen_range(0.05f32..0.8)
            };
            (x, [rng.gen(), rng.gen(), rng.gen(), a])
        })
        .collect();
    TransferFunction::new(pts).unwrap()
}

fn skipping_soundness() -> Outcome {
    let h = small();
    let vol = BrickedVolume::from_hierarchy(h, &[0]).unwrap();
    let k = h.manifest().levels.len() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cams = [
        Camera::orbit(2.0, 15.0, 20.0),
        Camera::orbit(1.5, -40.0, 150.0),
        Camera::orbit(2.5, 70.0, 260.0),
    ];
    let (mut skipped, mut checked_levels) = (0u64, 0u64);
    for tf_i in 0..10 {
        let ch = vec![ChannelSettings::new(0, random_tf(&mut rng), k)];
        let cfg = session_cfg(Method::Residency, vec![0], full_cache(h, 1), 96);
        let mut s = Session::new(transport(h), cfg.clone()).unwrap();
        for (p, cam) in cams.iter().enumerate() {
            s.run_until_converged(cam, &ch, 50).unwrap();
            ensure(s.converged(), || {
                format!("tf {tf_i} pose {p}: no convergence")
            })?;
            let mut rc = cfg.render.clone();
            rc.record_skips = true;
            s.set_render_config(rc.clone()).unwrap();
            let out = s.render(cam, &ch).unwrap();
            s.set_render_config(cfg.render.clone()).unwrap();
            for sk in &out.skipped {
                let ray = cam.pixel_ray(
                    sk.pixel % rc.width,
                    sk.pixel / rc.width,
                    rc.width,
                    rc.height,
                );
                let pos = sample_pos(&ray, sk.t);
                for l in 0..k {
                    checked_levels += 1;
                    let a = ch[0].tf.eval(vol.sample(0, l, pos).0)[3];
                    ensure(a == 0.0, || {
                        format!("tf {tf_i} pose {p}: skipped sample at t={} has opacity {a} at level {l}", sk.t)
                    })?;
                }
            }
            skipped += out.skipped.len() as u64;
        }
    }
    ensure(skipped > 0, || "nothing was skipped".into())?;
    Ok(format!("10 TFs x 3 poses, {skipped} skipped samples, {checked_levels} level lookups all transparent"))
}

/// Leaf masks from brick extents with integer arithmetic.
fn expected_leaf_masks(pc: &PagingConfig, paging: &Paging, depth: u32) -> Vec<u16> {
    let n = 1u64 << depth;
    let m = pc.channel_slots as usize;
    let mut out = vec![0u16; (n * n * n) as usize * m];
    for (_, id) in paging.residents() {
        let key = id.decode(pc.k());
        let dims = pc.dims(key.level);
        let b = pc.brick_size;
        let ranges: Vec<(u64, u64)> = (0..3)
            .map(|i| {
                let lo = key.coord[i] as u64 * b[i] as u64;
                let hi = ((key.coord[i] as u64 + 1) * b[i] as u64).min(dims[i] as u64);
                let d = dims[i] as u64;
                // leaves j with j/n < hi/d and lo/d < (j+1)/n
                let first = (lo * n) / d;
                let last = (hi * n).div_ceil(d);
                (first, last.min(n))
            })
            .collect();
        for z in ranges[2].0..ranges[2].1 {
            for y in ranges[1].0..ranges[1].1 {
                for x in ranges[0].0..ranges[0].1 {
                    out[(((z * n + y) * n + x) as usize) * m + key.slot as usize] |= 1 << key.level;
                }
            }
        }
    }
    out
}

fn full_scan(pc: &PagingConfig, paging: &Paging, octree: &ResidencyOctree) -> Result<(), String> {
    paging.check_bijection()?;
    let d = octree.depth();
    let m = pc.channel_slots;
    let leaves = expected_leaf_masks(pc, paging, d);
    let n = 1u32 << d;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                for s in 0..m {
                    let want = leaves[(((z * n + y) * n + x) * m + s) as usize];
                    let got = octree.mask(NodeAddress::new(d, [x, y, z]), s);
                    ensure(got == want, || {
                        format!("leaf ({x},{y},{z}) slot {s}: {got:#x} != {want:#x}")
                    })?;
                }
            }
        }
    }
    for depth in (0..d).rev() {
        let n = 1u32 << depth;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let node = NodeAddress::new(depth, [x, y, z]);
                    for s in 0..m {
                        let mut or = 0;
                        for c in 0..8u32 {
                            let cc = [2 * x + (c & 1), 2 * y + (c >> 1 & 1), 2 * z + (c >> 2 & 1)];
                            or |= octree.mask(NodeAddress::new(depth + 1, cc), s);
                        }
                        let got = octree.mask(node, s);
                        ensure(got == or, || {
                            format!("node {node:?} slot {s}: {got:#x} != OR {or:#x}")
                        })?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn structural_invariants() -> Outcome {
    let h = build(&synth::shell_vessels(96, 3, 5), 3, 16);
    let m = h.manifest();
    let pc = PagingConfig::from_manifest(m, [4, 3, 2], 2).unwrap();
    let mut paging = Paging::new(pc.clone(), vec![0, 1], m.channels).unwrap();
    let mut octree = ResidencyOctree::new(OctreeConfig {
        depth: 5,
        channel_slots: 2,
        ..OctreeConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let payload = vec![0u8; pc.brick_voxels()];
    let start = Instant::now();
    let (mut inserts, mut evictions, mut remaps, mut scans) = (0, 0, 0, 0);
    for step in 0..10_000u64 {
        let r: f64 = rng.gen();
        if r < 0.75 {
            let slot = rng.gen_range(0..2);
            let level = rng.gen_range(0..pc.k());
            let g = pc.grid(level);
            let coord = [0, 1, 2].map(|i| rng.gen_range(0..g[i]));
            let id = pc.brick_id(slot, level, coord).unwrap();
            let ch = paging.channel_mapping()[slot as usize];
            let out = paging.insert_brick(id, &payload, step, ch).unwrap();
            if out.inserted {
                inserts += 1;
                octree.on_brick_inserted(&pc, id);
            }
            if let Some(v) = out.evicted {
                evictions += 1;
                octree.on_brick_evicted(&paging, v);
            }
        } else if r < 0.9 {
            let occupied: Vec<u32> = paging.residents().map(|(s, _)| s).collect();
            if !occupied.is_empty() {
                paging.mark_used(occupied[rng.gen_range(0..occupied.len())], step);
            }
        } else if r < 0.97 {
            let node = NodeAddress::new(rng.gen_range(0..=5), [0; 3]);
            let a = rng.gen_range(0..=255u8);
            octree
                .set_node_metadata(
                    node,
                    rng.gen_range(0..2),
                    a,
                    a.saturating_add(rng.gen_range(0..50)),
                )
                .unwrap();
        } else {
            let slot = rng.gen_range(0..2);
            paging
                .set_channel_mapping(slot, rng.gen_range(0..m.channels))
                .unwrap();
            octree.invalidate_channel(slot);
            remaps += 1;
        }
        if step % 100 == 99 {
            full_scan(&pc, &paging, &octree).map_err(|e| format!("step {step}: {e}"))?;
            scans += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    ensure(evictions > 0 && remaps > 0, || {
        "sequence exercised no evictions or remaps".into()
    })?;
    Ok(format!(
        "10^4 steps ({inserts} inserts, {evictions} evictions, {remaps} remaps), {scans} full scans, {secs:.1} s"
    ))
}

fn orbit_rows() -> &'static Result<Vec<BenchRow>, String> {
    static ROWS: OnceLock<Result<Vec<BenchRow>, String>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let h = multi256();
        let t: Arc<dyn Transport> = transport(h);
        let cfg = session_cfg(Method::Residency, vec![0, 1, 2, 3], [16, 16, 8], 128);
        let ch = sparse_channels(4, 4);
        let cams = orbit(36, 2.0, 20.0, 0.0);
        let rows = run_bench(&t, &cfg, &ch, &cams, &Method::ALL, &[cfg.octree.depth], 50)
            .map_err(|e| e.to_string())?;
        for r in &rows {
            ensure(r.converged_poses == r.poses, || {
                format!(
                    "{}: {} of {} poses converged",
                    r.method, r.converged_poses, r.poses
                )
            })?;
        }
        Ok(rows)
    })
}

fn row(rows: &[BenchRow], m: Method) -> &BenchRow {
    rows.iter().find(|r| r.method == m.name()).unwrap()
}

fn working_set_trend() -> Outcome {
    let rows = orbit_rows().clone()?;
    let ours = row(&rows, Method::Residency).avg_cache_bytes;
    let oct = row(&rows, Method::Octree).avg_cache_bytes;
    let pt = row(&rows, Method::Pagetable).avg_cache_bytes;
    let mb = |b: f64| b / 1e6;
    let summary = format!(
        "ours {:.2} MB, octree {:.2} MB, pagetable {:.2} MB; ours {:.0}% below pagetable",
        mb(ours),
        mb(oct),
        mb(pt),
        100.0 * (1.0 - ours / pt)
    );
    ensure(ours <= oct, || format!("ours above octree: {summary}"))?;
    ensure(oct <= pt * 1.05, || {
        format!("octree above pagetable: {summary}")
    })?;
    ensure(ours <= 0.8 * pt, || {
        format!("reduction below 20%: {summary}")
    })?;
    Ok(summary)
}

fn traversal_steps() -> Outcome {
    let rows = orbit_rows().clone()?;
    let ours = row(&rows, Method::Residency).traversal_steps;
    let classic = row(&rows, Method::Octree).traversal_steps;
    ensure(ours < classic, || {
        format!("ours {ours} >= classic {classic}")
    })?;
    Ok(format!(
        "ours {ours} steps vs classic {classic} ({:.1}x fewer)",
        classic as f64 / ours as f64
    ))
}

fn mixed_resolution() -> Outcome {
    let h = multi256();
    let k = 4;
    let cams = orbit(8, 2.0, 20.0, 15.0);
    let run = |pin: bool| -> Result<(f64, Vec<Vec<Vec<u64>>>), String> {
        let mut cfg = session_cfg(Method::Residency, vec![0, 1, 2, 3], [16, 16, 8], 128);
        cfg.render.early_term_alpha = f32::INFINITY;
        let mut ch = sparse_channels(4, k);
        if pin {
            ch[2].level_range = [k - 1, k - 1];
        }
        let mut s = Session::new(transport(h), cfg).unwrap();
        let (mut bytes, mut hists) = (0.0, Vec::new());
        for (i, cam) in cams.iter().enumerate() {
            let (out, n) = s.run_until_converged(cam, &ch, 50).unwrap();
            ensure(s.converged(), || {
                format!("pose {i}: no convergence in {n} frames")
            })?;
            bytes += s.history().last().unwrap().cache_bytes as f64;
            hists.push(out.stats.level_histogram.clone());
            if pin {
                let pinned = &out.stats.level_histogram[2];
                ensure(pinned[..k as usize - 1].iter().all(|&c| c == 0), || {
                    format!("pose {i}: pinned channel read finer levels {pinned:?}")
                })?;
            }
        }
        Ok((bytes / cams.len() as f64, hists))
    };
    let (full, hf) = run(false)?;
    let (pinned, hp) = run(true)?;
    ensure(pinned < full, || {
        format!("pinned {pinned:.0} B >= all-finest {full:.0} B")
    })?;
    for (i, (a, b)) in hf.iter().zip(&hp).enumerate() {
        for c in [0, 1, 3] {
            ensure(a[c] == b[c], || {
                format!(
                    "pose {i} channel {c}: level histogram {:?} -> {:?}",
                    a[c], b[c]
                )
            })?;
        }
    }
    Ok(format!(
        "avg cache bytes {:.2} MB -> {:.2} MB ({:.1}% less); other channels' level histograms identical over {} poses",
        full / 1e6,
        pinned / 1e6,
        100.0 * (1.0 - pinned / full),
        cams.len()
    ))
}

fn convergence() -> Outcome {
    let mut parts = Vec::new();
    for (name, h, m, size) in [
        ("1-channel", single256(), 1u32, 256),
        ("4-channel", multi256(), 4, 128),
    ] {
        let mapping: Vec<u32> = (0..m).collect();
        let cfg = session_cfg(Method::Residency, mapping, [16, 16, 8], size);
        let ch = sparse_channels(m, 4);
        let mut s = Session::new(transport(h), cfg).unwrap();
        let cam = Camera::orbit(1.8, 25.0, 40.0);
        let (_, n) = s.run_until_converged(&cam, &ch, 50).unwrap();
        ensure(s.converged(), || {
            format!("{name}: not converged after {n} frames")
        })?;
        let hist = s.history();
        let last = &hist[hist.len() - 1];
        ensure(last.requests == 0 && last.pending == 0, || {
            format!("{name}: requests outstanding")
        })?;
        let again = s.step_frame(&cam, &ch).unwrap();
        ensure(again.requests.is_empty(), || {
            format!("{name}: requests after convergence")
        })?;
        parts.push(format!("{name} 256^3 in {n} frames"));
    }
    Ok(parts.join(", "))
}

fn codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..10_000 {
        let k = rng.gen_range(1..=16u32);
        let m = rng.gen_range(1..=256 / k);
        let slot = rng.gen_range(0..m);
        let level = rng.gen_range(0..k);
        let coord = [
            rng.gen_range(0..256u32),
            rng.gen_range(0..256),
            rng.gen_range(0..256),
        ];
        let id = BrickId::encode(slot, level, coord, k, m).map_err(|e| e.to_string())?;
        let packed = coord[0] | coord[1] << 8 | coord[2] << 16 | (slot * k + level) << 24;
        ensure(id.0 == packed, || {
            format!("tuple {i}: {:#x} != {packed:#x}", id.0)
        })?;
        let key = id.decode(k);
        ensure(
            (key.slot, key.level, key.coord) == (slot, level, coord),
            || format!("tuple {i}: decoded {key:?}"),
        )?;
    }
    for i in 0..100 {
        let b = [8usize, 16, 32][i % 3];
        let n = b * b * b;
        let payload: Vec<u8> = match i % 4 {
            0 => (0..n).map(|_| rng.gen()).collect(),
            1 => vec![rng.gen(); n],
            2 => (0..n)
                .map(|_| if rng.gen_bool(0.05) { rng.gen() } else { 0 })
                .collect(),
            _ => (0..n).map(|j| (j / 7) as u8).collect(),
        };
        let back = decompress_brick(&compress_brick(&payload), n).map_err(|e| e.to_string())?;
        ensure(back == payload, || format!("payload {i} changed"))?;
    }
    let mut manifests = vec![small().manifest().clone(), multi256().manifest().clone()];
    for i in 0..20 {
        let dims = [
            rng.gen_range(8..300u32),
            rng.gen_range(8..300),
            rng.gen_range(8..300),
        ];
        let b = [
            rng.gen_range(1..6u32),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        ]
        .map(|e| 1u32 << e);
        manifests.push(VolumeManifest {
            name: format!("random {i} \"quoted\""),
            channels: rng.gen_range(1..9),
            dtype_original: [Dtype::U8, Dtype::U16, Dtype::U32, Dtype::F32][i % 4],
            brick_size: b,
            levels: vec![LevelDesc {
                dims,
                downsample_from_prev: [1, 1, 1],
                brick_grid: [0, 1, 2].map(|j| dims[j].div_ceil(b[j])),
            }],
            compression: "lz4".into(),
            path_pattern: "c{c}/l{l}/{x}_{y}_{z}.lz4".into(),
            metadata_endpoint: rng.gen(),
            value_ranges: vec![[rng.gen_range(-1e3..0.0), rng.gen_range(0.0..1e6)]],
        });
    }
    for (i, m) in manifests.iter().enumerate() {
        let text = m.to_text();
        let back = VolumeManifest::from_text(&text).map_err(|e| format!("manifest {i}: {e}"))?;
        ensure(&back == m, || format!("manifest {i} changed"))?;
        ensure(back.to_text() == text, || {
            format!("manifest {i} text changed")
        })?;
    }
    Ok(format!(
        "10^4 brick ids, 100 LZ4 payloads, {} manifests exact",
        manifests.len()
    ))
}

fn channel_swap() -> Outcome {
    let h = build(&synth::shell_vessels(64, 3, 44), 3, 16);
    let ch = sparse_channels(2, 3);
    let cams = [
        Camera::orbit(2.0, 20.0, 60.0),
        Camera::orbit(1.7, -30.0, 200.0),
    ];
    let mut checked = 0;
    for method in Method::ALL {
        for synchronous in [true, false] {
            let mut cfg = session_cfg(method, vec![0, 1], [6, 6, 6], 96);
            cfg.synchronous = synchronous;
            let mut s = Session::new(transport(&h), cfg.clone()).unwrap();
            for _ in 0..3 {
                s.step_frame(&cams[0], &ch).unwrap();
            }
            s.swap_channel(1, 2).unwrap();
            for cam in &cams {
                let (out, n) = s.run_until_converged(cam, &ch, 60).unwrap();
                ensure(s.converged(), || {
                    format!("{}: no convergence after swap ({n} frames)", method.name())
                })?;
                s.check_provenance(&out)?;
                let mut fresh_cfg = cfg.clone();
                fresh_cfg.mapping = vec![0, 2];
                let mut fresh = Session::new(transport(&h), fresh_cfg).unwrap();
                let (f, _) = fresh.run_until_converged(cam, &ch, 60).unwrap();
                ensure(out.image.bit_identical(&f.image), || {
                    format!(
                        "{} (sync {synchronous}): {} px differ from a fresh session",
                        method.name(),
                        out.image.diff_count(&f.image)
                    )
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} swapped sessions match fresh sessions exactly"
    ))
}

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("codec_and_format", codec),
        ("structural_invariants", structural_invariants),
        ("oracle_equivalence", oracle_equivalence),
        ("skipping_soundness", skipping_soundness),
        ("convergence", convergence),
        ("channel_swap", channel_swap),
        ("mixed_resolution", mixed_resolution),
        ("working_set_trend", working_set_trend),
        ("traversal_steps", traversal_steps),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1} s]"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
