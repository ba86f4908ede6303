//! 2D points, affine maps and bilinear resampling of planar images.
//!
//! Coordinates follow the image convention: x right, y down, pixel `(i, j)`
//! centered at `(i, j)`.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1]
}

/// Angle in `[0, π]` between two non-zero vectors.
pub fn angle_between(a: Point, b: Point) -> f64 {
    // atan2 of cross/dot stays accurate near 0 and π where acos does not
    cross(a, b).abs().atan2(dot(a, b))
}

/// Axis-aligned box `[x, y, w, h]` over pixel indices: it covers pixel
/// centers `x..x+w-1`, i.e. the continuous span `[x - 0.5, x + w - 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> Point {
        [self.x + (self.w - 1.0) / 2.0, self.y + (self.h - 1.0) / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Continuous extent `(x0, y0, x1, y1)`.
    pub fn span(&self) -> (f64, f64, f64, f64) {
        (
            self.x - 0.5,
            self.y - 0.5,
            self.x + self.w - 0.5,
            self.y + self.h - 0.5,
        )
    }

    pub fn contains(&self, p: Point) -> bool {
        let (x0, y0, x1, y1) = self.span();
        p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1
    }

    /// Tight pixel box around a set of continuous points.
    pub fn around(points: impl IntoIterator<Item = Point>) -> Option<Self> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !lo[0].is_finite() {
            return None;
        }
        let x0 = (lo[0] + 0.5).floor();
        let y0 = (lo[1] + 0.5).floor();
        let x1 = (hi[0] + 0.5).ceil();
        let y1 = (hi[1] + 0.5).ceil();
        Some(Self::new(x0, y0, (x1 - x0).max(1.0), (y1 - y0).max(1.0)))
    }
}

/// Row-major 2×3 affine map `p ↦ A p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Default for Affine2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine2 {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn new(a: [[f64; 2]; 2], t: Point) -> Self {
        Self {
            m: [[a[0][0], a[0][1], t[0]], [a[1][0], a[1][1], t[1]]],
        }
    }

    /// Uniform scale `s` and rotation `angle` (radians, y-down so positive
    /// turns +x toward +y) about `center`.
    pub fn similarity(s: f64, angle: f64, center: Point) -> Self {
        let (sn, cs) = angle.sin_cos();
        let a = [[s * cs, -s * sn], [s * sn, s * cs]];
        let t = [
            center[0] - a[0][0] * center[0] - a[0][1] * center[1],
            center[1] - a[1][0] * center[0] - a[1][1] * center[1],
        ];
        Self::new(a, t)
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    /// Apply only the linear part (for direction vectors).
    pub fn apply_vector(&self, v: Point) -> Point {
        let m = &self.m;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d.abs() < 1e-300 || !d.is_finite() {
            return None;
        }
        let m = &self.m;
        let a = [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]];
        let t = [
            -(a[0][0] * m[0][2] + a[0][1] * m[1][2]),
            -(a[1][0] * m[0][2] + a[1][1] * m[1][2]),
        ];
        Some(Self::new(a, t))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Affine2) -> Self {
        let a = &self.m;
        let b = &other.m;
        let lin = [
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ];
        let t = self.apply([b[0][2], b[1][2]]);
        Self::new(lin, t)
    }
}

/// Bilinear sample of one `w×h` plane at a continuous position; pixels
/// outside the plane read as zero.
pub fn sample_bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resample a planar `channels×h×w` image into `channels×out_h×out_w`.
/// `dst_to_src` maps output pixel centers to source positions; `keep`
/// decides per source position whether the sample is taken or zeroed.
pub fn warp_planar(
    src: &[f64],
    channels: usize,
    w: usize,
    h: usize,
    out_w: usize,
    out_h: usize,
    dst_to_src: &Affine2,
    keep: impl Fn(Point) -> bool,
) -> Vec<f64> {
    let mut out = vec![0.0; channels * out_w * out_h];
    let plane = w * h;
    for y in 0..out_h {
        for x in 0..out_w {
            let s = dst_to_src.apply([x as f64, y as f64]);
            if !keep(s) {
                continue;
            }
            for c in 0..channels {
                out[(c * out_h + y) * out_w + x] =
                    sample_bilinear(&src[c * plane..(c + 1) * plane], w, h, s[0], s[1]);
            }
        }
    }
    out
}
