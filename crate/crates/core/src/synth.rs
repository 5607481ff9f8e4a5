//! Deterministic synthetic volumes for tests, examples and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::volume::{RawChannel, RawVolume};

/// Largest value of the low-level background noise inside the tissue ball.
pub const NOISE_MAX: u8 = 10;

const TISSUE_RADIUS: f32 = 0.42;

fn mix(mut h: u64) -> u64 {
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn grid<F>(n: u32, f: F) -> Vec<u8>
where
    F: Fn(usize, [f32; 3]) -> u8 + Sync,
{
    let n = n as usize;
    let mut out = vec![0u8; n * n * n];
    out.par_chunks_mut(n * n)
        .enumerate()
        .for_each(|(z, plane)| {
            for y in 0..n {
                for x in 0..n {
                    let p = [
                        (x as f32 + 0.5) / n as f32,
                        (y as f32 + 0.5) / n as f32,
                        (z as f32 + 0.5) / n as f32,
                    ];
                    plane[y * n + x] = f((z * n + y) * n + x, p);
                }
            }
        });
    out
}

fn radius(p: [f32; 3]) -> f32 {
    let d = [p[0] - 0.5, p[1] - 0.5, p[2] - 0.5];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn tissue_noise(n: u32, seed: u64) -> Vec<u8> {
    grid(n, |i, p| {
        if radius(p) < TISSUE_RADIUS {
            1 + (mix(i as u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)) % NOISE_MAX as u64) as u8
        } else {
            0
        }
    })
}

fn stamp_segment(data: &mut [u8], n: u32, a: [f32; 3], b: [f32; 3], r: f32, peak: u8) {
    let nf = n as f32;
    let lo: [usize; 3] =
        std::array::from_fn(|i| ((a[i].min(b[i]) - r) * nf - 1.0).floor().max(0.0) as usize);
    let hi: [usize; 3] = std::array::from_fn(|i| {
        (((a[i].max(b[i]) + r) * nf + 1.0).ceil() as usize).min(n as usize)
    });
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let len2 = (ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2]).max(1e-12);
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                let p = [
                    (x as f32 + 0.5) / nf,
                    (y as f32 + 0.5) / nf,
                    (z as f32 + 0.5) / nf,
                ];
                let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                let t = ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0);
                let q = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
                let d = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                if d < r {
                    let v = (peak as f32 * (1.0 - 0.5 * d / r)).round() as u8;
                    let idx = (z * n as usize + y) * n as usize + x;
                    data[idx] = data[idx].max(v);
                }
            }
        }
    }
}

fn vessels(data: &mut [u8], n: u32, rng: &mut ChaCha8Rng, count: usize, peak: u8) {
    let min_r = 1.5 / n as f32;
    for _ in 0..count {
        let mut p = [0.0f32; 3];
        loop {
            for c in &mut p {
                *c = rng.gen_range(0.2..0.8);
            }
            if radius(p) < 0.3 {
                break;
            }
        }
        let mut dir = [
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
        ];
        let r = rng.gen_range(0.008f32..0.02).max(min_r);
        for _ in 0..40 {
            for d in &mut dir {
                *d += rng.gen_range(-0.4f32..0.4);
            }
            let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2])
                .sqrt()
                .max(1e-6);
            let step = 0.02;
            let q = std::array::from_fn(|i| p[i] + dir[i] / len * step);
            if radius(q) > 0.34 {
                for d in &mut dir {
                    *d = -*d;
                }
                continue;
            }
            stamp_segment(data, n, p, q, r, peak);
            p = q;
        }
    }
}

fn blobs(data: &mut [u8], n: u32, rng: &mut ChaCha8Rng, count: usize, peak: u8) {
    let min_r = 1.5 / n as f32;
    for _ in 0..count {
        let c = [
            rng.gen_range(0.25f32..0.75),
            rng.gen_range(0.25f32..0.75),
            rng.gen_range(0.25f32..0.75),
        ];
        let r = rng.gen_range(0.015f32..0.04).max(min_r);
        stamp_segment(data, n, c, c, r, peak);
    }
}

/// Sparse `n³` volume resembling a vessel scan: a bright spherical shell, a
/// tree of tubes, blob-like cells and a second tube set, one structure per
/// channel (cycled if `channels > 4`). Every channel carries low noise of
/// value `1..=NOISE_MAX` inside the tissue ball and is zero outside.
pub fn shell_vessels(n: u32, channels: u32, seed: u64) -> RawVolume {
    let chans = (0..channels)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64 * 7919));
            let mut data = tissue_noise(n, seed ^ (c as u64 + 1));
            match c % 4 {
                0 => {
                    let shell = grid(n, |_, p| {
                        let w = 1.0 - (radius(p) - 0.36).abs() / 0.03;
                        if w > 0.0 {
                            (40.0 + 180.0 * w).round() as u8
                        } else {
                            0
                        }
                    });
                    for (d, s) in data.iter_mut().zip(shell) {
                        *d = (*d).max(s);
                    }
                }
                1 => vessels(&mut data, n, &mut rng, 10, 200),
                2 => blobs(&mut data, n, &mut rng, 40, 170),
                _ => vessels(&mut data, n, &mut rng, 6, 230),
            }
            RawChannel::U8(data)
        })
        .collect();
    RawVolume {
        dims: [n; 3],
        channels: chans,
    }
}

/// Linear ramp along x, 0 at the first plane and 255 at the last.
pub fn ramp(n: u32) -> RawVolume {
    let data = grid(n, |i, _| {
        ((i % n as usize) * 255 / (n as usize - 1).max(1)) as u8
    });
    RawVolume {
        dims: [n; 3],
        channels: vec![RawChannel::U8(data)],
    }
}

/// Uniform noise over the full value range.
pub fn noise(n: u32, seed: u64) -> RawVolume {
    let data = grid(n, |i, _| (mix(i as u64 ^ seed.rotate_left(17)) >> 56) as u8);
    RawVolume {
        dims: [n; 3],
        channels: vec![RawChannel::U8(data)],
    }
}

/// One constant channel per entry of `values`.
pub fn constant(n: u32, values: &[u8]) -> RawVolume {
    let len = (n as usize).pow(3);
    RawVolume {
        dims: [n; 3],
        channels: values
            .iter()
            .map(|&v| RawChannel::U8(vec![v; len]))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(v: &RawVolume, c: usize) -> &[u8] {
        match &v.channels[c] {
            RawChannel::U8(d) => d,
            _ => unreachable!(),
        }
    }

    #[test]
    fn shell_vessels_is_deterministic_and_sparse() {
        let a = shell_vessels(32, 4, 3);
        let b = shell_vessels(32, 4, 3);
        for c in 0..4 {
            assert_eq!(channel(&a, c), channel(&b, c));
            let d = channel(&a, c);
            let bright = d.iter().filter(|&&v| v > NOISE_MAX).count();
            assert!(bright > 0, "channel {c} has structure");
            assert!(bright * 5 < d.len(), "channel {c} is sparse");
            assert_eq!(d[0], 0, "corner outside the tissue ball");
        }
        assert_ne!(channel(&a, 1), channel(&a, 3));
    }

    #[test]
    fn ramp_spans_full_range() {
        let r = ramp(16);
        let d = channel(&r, 0);
        assert_eq!(d[0], 0);
        assert_eq!(d[15], 255);
        assert_eq!(d[16 * 16 + 15], 255);
    }

    #[test]
    fn constant_channels() {
        let v = constant(8, &[0, 255]);
        assert!(channel(&v, 0).iter().all(|&x| x == 0));
        assert!(channel(&v, 1).iter().all(|&x| x == 255));
    }
}
