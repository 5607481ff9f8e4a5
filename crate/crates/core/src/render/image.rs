use std::hash::{Hash, Hasher};

/// Premultiplied RGBA float image over a transparent black background.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f32; 4]>,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<[f32; 4]>) -> Self {
        assert_eq!(pixels.len(), (width * height) as usize);
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 4] {
        self.pixels[(y * self.width + x) as usize]
    }

    /// Hash of the exact bit patterns.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.width.hash(&mut h);
        self.height.hash(&mut h);
        for p in &self.pixels {
            for v in p {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Bitwise equality, so `-0.0 != 0.0` and NaNs compare by payload.
    pub fn bit_identical(&self, o: &Image) -> bool {
        self.width == o.width
            && self.height == o.height
            && self
                .pixels
                .iter()
                .zip(&o.pixels)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Number of pixels whose values differ bitwise.
    pub fn diff_count(&self, o: &Image) -> usize {
        self.pixels
            .iter()
            .zip(&o.pixels)
            .filter(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .any(|(x, y)| x.to_bits() != y.to_bits())
            })
            .count()
    }

    pub fn max_abs_diff(&self, o: &Image) -> f32 {
        self.pixels
            .iter()
            .zip(&o.pixels)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f32::max)
    }

    pub fn to_rgba8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8))
            .collect()
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("in-memory PNG header");
            w.write_image_data(&self.to_rgba8())
                .expect("in-memory PNG data");
        }
        out
    }
}
