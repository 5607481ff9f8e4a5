use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-linear map from scalar `[0,255]` to RGBA in `[0,1]`.
/// Everything outside the first/last control point is fully transparent.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f32; 5]>", into = "Vec<[f32; 5]>")]
pub struct TransferFunction {
    points: Vec<(f32, [f32; 4])>,
    #[serde(skip)]
    empty_upto: OnceLock<Box<[i16; 256]>>,
}

impl PartialEq for TransferFunction {
    fn eq(&self, o: &Self) -> bool {
        self.points == o.points
    }
}

impl TryFrom<Vec<[f32; 5]>> for TransferFunction {
    type Error = Error;

    fn try_from(v: Vec<[f32; 5]>) -> Result<Self> {
        Self::new(
            v.into_iter()
                .map(|p| (p[0], [p[1], p[2], p[3], p[4]]))
                .collect(),
        )
    }
}

impl From<TransferFunction> for Vec<[f32; 5]> {
    fn from(tf: TransferFunction) -> Self {
        tf.points
            .iter()
            .map(|(s, c)| [*s, c[0], c[1], c[2], c[3]])
            .collect()
    }
}

impl TransferFunction {
    pub fn new(points: Vec<(f32, [f32; 4])>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config(
                "transfer function needs at least two control points".into(),
            ));
        }
        for w in points.windows(2) {
            if !(w[0].0 < w[1].0) {
                return Err(Error::Config(
                    "control point scalars must strictly increase".into(),
                ));
            }
        }
        for (s, c) in &points {
            if !(0.0..=255.0).contains(s) || c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!(
                    "control point {s} {c:?} out of range"
                )));
            }
        }
        Ok(Self {
            points,
            empty_upto: OnceLock::new(),
        })
    }

    pub fn transparent() -> Self {
        Self::new(vec![(0.0, [0.0; 4]), (255.0, [0.0; 4])]).unwrap()
    }

    /// Opacity rising linearly from 0 at `lo` to `alpha` at `hi`, constant
    /// above.
    pub fn ramp(lo: f32, hi: f32, rgb: [f32; 3], alpha: f32) -> Self {
        let c = [rgb[0], rgb[1], rgb[2], alpha];
        let mut pts = vec![(lo, [rgb[0], rgb[1], rgb[2], 0.0]), (hi, c)];
        if hi < 255.0 {
            pts.push((255.0, c));
        }
        Self::new(pts).expect("valid ramp")
    }

    pub fn points(&self) -> &[(f32, [f32; 4])] {
        &self.points
    }

    #[inline]
    pub fn eval(&self, v: f32) -> [f32; 4] {
        let p = &self.points;
        if !(v >= p[0].0 && v <= p[p.len() - 1].0) {
            return [0.0; 4];
        }
        let i = p.partition_point(|q| q.0 <= v).clamp(1, p.len() - 1);
        let (s0, c0) = p[i - 1];
        let (s1, c1) = p[i];
        let t = (v - s0) / (s1 - s0);
        std::array::from_fn(|k| c0[k] + (c1[k] - c0[k]) * t)
    }

    /// Maximum opacity over the scalar interval `[lo, hi]`.
    pub fn interval_max_opacity(&self, lo: u8, hi: u8) -> f32 {
        let (lo, hi) = (lo as f32, hi as f32);
        let p = &self.points;
        let a = lo.max(p[0].0);
        let b = hi.min(p[p.len() - 1].0);
        if a > b {
            return 0.0;
        }
        let mut m = self.eval(a)[3].max(self.eval(b)[3]);
        for (s, c) in p {
            if *s >= a && *s <= b {
                m = m.max(c[3]);
            }
        }
        m
    }

    /// Whether every scalar in `[lo, hi]` maps to zero opacity.
    #[inline]
    pub fn is_transparent(&self, lo: u8, hi: u8) -> bool {
        let t = self.empty_upto.get_or_init(|| {
            let mut t = Box::new([-1i16; 256]);
            for lo in 0..256usize {
                let mut hi = lo;
                while hi < 256 && self.interval_max_opacity(lo as u8, hi as u8) == 0.0 {
                    hi += 1;
                }
                t[lo] = hi as i16 - 1;
            }
            t
        });
        hi as i16 <= t[lo as usize]
    }

    pub fn is_fully_transparent(&self) -> bool {
        self.is_transparent(0, 255)
    }
}
