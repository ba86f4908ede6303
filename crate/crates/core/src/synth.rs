//! Procedural analog dial renderer with exact pointer labels, COCO-style
//! annotation I/O and dataset splitting.

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, BBox, Point};
use crate::pipeline::{Homography, MeterTemplate};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid dial spec: {0}")]
    Spec(String),
    #[error("malformed annotations: {0}")]
    Annotation(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointerSpec {
    pub value: f64,
    /// Tip distance from the spindle as a fraction of the dial radius.
    pub length_ratio: f64,
    /// Counterweight length behind the spindle, fraction of the radius.
    pub tail_ratio: f64,
    /// Widest extent in pixels.
    pub width: f64,
    pub color: [f64; 3],
    #[serde(default)]
    pub out_of_range: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradations {
    pub blur_radius: f64,
    pub noise_std: f64,
    pub brightness: f64,
    pub glare: bool,
}

impl Default for Degradations {
    fn default() -> Self {
        Self {
            blur_radius: 0.0,
            noise_std: 0.0,
            brightness: 1.0,
            glare: false,
        }
    }
}

impl Degradations {
    pub fn is_hard(&self) -> bool {
        self.blur_radius >= 2.0 || self.noise_std >= 0.1 || self.glare
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialSpec {
    pub image_size: [usize; 2],
    /// Dial center and face radius in template (unwarped) pixels.
    pub center: Point,
    pub radius: f64,
    /// Scale arc in radians, y-down; values grow with angle.
    pub arc_start: f64,
    pub arc_end: f64,
    pub tick_values: Vec<f64>,
    pub minor_ticks: usize,
    pub pointers: Vec<PointerSpec>,
    /// Template-to-image homography, row-major.
    pub warp: [[f64; 3]; 3],
    pub face_color: [f64; 3],
    pub background: [f64; 3],
    pub bezel_color: [f64; 3],
    pub tick_color: [f64; 3],
    pub degradations: Degradations,
    pub seed: u64,
}

/// Scale points sit on this fraction of the radius, mid-way along the ticks.
pub const SCALE_RADIUS: f64 = 0.88;
const BEZEL: f64 = 1.08;

impl DialSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let e = self.tick_values.len();
        if e < 2 {
            return Err(SynthError::Spec("at least two ticks".into()));
        }
        if self.tick_values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SynthError::Spec("tick values must increase along the arc".into()));
        }
        if !(self.arc_end > self.arc_start) || !(self.radius > 0.0) {
            return Err(SynthError::Spec("empty arc or radius".into()));
        }
        let (lo, hi) = (self.tick_values[0], self.tick_values[e - 1]);
        for p in &self.pointers {
            if !(p.length_ratio > 0.0 && p.length_ratio <= 1.0) {
                return Err(SynthError::Spec(format!("pointer length ratio {} not in (0, 1]", p.length_ratio)));
            }
            if !p.out_of_range && !(lo..=hi).contains(&p.value) {
                return Err(SynthError::Spec(format!("pointer value {} outside [{lo}, {hi}]", p.value)));
            }
        }
        Homography::from_matrix(self.warp).map_err(|e| SynthError::Spec(e.to_string()))?;
        Ok(())
    }

    /// Arc angle of a value (linear scale, extrapolated outside the ticks).
    pub fn angle_of(&self, value: f64) -> f64 {
        let (lo, hi) = (self.tick_values[0], *self.tick_values.last().unwrap());
        self.arc_start + (value - lo) / (hi - lo) * (self.arc_end - self.arc_start)
    }

    pub fn homography(&self) -> Homography {
        Homography::from_matrix(self.warp).expect("validated warp")
    }

    fn unit(angle: f64) -> Point {
        [angle.cos(), angle.sin()]
    }

    /// Tip and tail of a pointer in template pixels.
    pub fn pointer_ends(&self, p: &PointerSpec) -> (Point, Point) {
        let u = Self::unit(self.angle_of(p.value));
        (
            geom::add(self.center, geom::scale(u, p.length_ratio * self.radius)),
            geom::sub(self.center, geom::scale(u, p.tail_ratio * self.radius)),
        )
    }

    pub fn template_scale_points(&self) -> Vec<Point> {
        self.tick_values
            .iter()
            .map(|&v| geom::add(self.center, geom::scale(Self::unit(self.angle_of(v)), SCALE_RADIUS * self.radius)))
            .collect()
    }

    fn bezel_outline(&self) -> Vec<Point> {
        (0..64)
            .map(|k| {
                let a = k as f64 / 64.0 * std::f64::consts::TAU;
                geom::add(self.center, geom::scale(Self::unit(a), BEZEL * self.radius))
            })
            .collect()
    }
}

/// One pointer's label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointerLabel {
    pub tip: Point,
    pub tail: Point,
    /// Visibility flags for tip, midpoint and tail.
    pub visibility: [u8; 3],
    pub value: Option<f64>,
    pub out_of_range: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterAnnotation {
    pub bbox: BBox,
    pub pointers: Vec<PointerLabel>,
    pub scale_points: Vec<Point>,
    pub scale_values: Vec<f64>,
    pub template_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub hard: bool,
    pub meters: Vec<MeterAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageAnnotation>,
}

#[derive(Debug, Clone)]
pub struct RenderedDial {
    pub image: RgbImage,
    pub meter: MeterAnnotation,
    pub template: MeterTemplate,
    pub hard: bool,
}

// --- rendering -------------------------------------------------------------

fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let ab = geom::sub(b, a);
    let t = (geom::dot(geom::sub(p, a), ab) / geom::dot(ab, ab)).clamp(0.0, 1.0);
    geom::dist(p, geom::add(a, geom::scale(ab, t)))
}

/// Signed distance to a convex polygon, negative inside.
fn polygon_sdf(p: Point, poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut d = f64::INFINITY;
    let mut pos = 0;
    let mut neg = 0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        d = d.min(seg_dist(p, a, b));
        let c = geom::cross(geom::sub(b, a), geom::sub(p, a));
        if c > 0.0 {
            pos += 1;
        } else if c < 0.0 {
            neg += 1;
        }
    }
    if pos == 0 || neg == 0 {
        -d
    } else {
        d
    }
}

fn coverage(sdf: f64) -> f64 {
    (0.5 - sdf).clamp(0.0, 1.0)
}

fn over(dst: &mut [f64; 3], color: [f64; 3], a: f64) {
    if a > 0.0 {
        for c in 0..3 {
            dst[c] = dst[c] * (1.0 - a) + color[c] * a;
        }
    }
}

struct Layout {
    majors: Vec<f64>,
    minors: Vec<f64>,
    pointers: Vec<[Point; 5]>,
    band: (f64, f64),
}

impl Layout {
    fn new(spec: &DialSpec) -> Self {
        let majors: Vec<f64> = spec.tick_values.iter().map(|&v| spec.angle_of(v)).collect();
        let mut minors = Vec::new();
        for w in majors.windows(2) {
            for k in 1..=spec.minor_ticks {
                minors.push(w[0] + (w[1] - w[0]) * k as f64 / (spec.minor_ticks + 1) as f64);
            }
        }
        let pointers = spec
            .pointers
            .iter()
            .map(|p| {
                let u = DialSpec::unit(spec.angle_of(p.value));
                let n = [-u[1], u[0]];
                let r = spec.radius;
                let c = spec.center;
                let at = |along: f64, across: f64| geom::add(geom::add(c, geom::scale(u, along)), geom::scale(n, across));
                [
                    at(p.length_ratio * r, 0.0),
                    at(0.0, p.width / 2.0),
                    at(-p.tail_ratio * r, 0.35 * p.width),
                    at(-p.tail_ratio * r, -0.35 * p.width),
                    at(0.0, -p.width / 2.0),
                ]
            })
            .collect();
        let span = spec.arc_end - spec.arc_start;
        Self {
            majors,
            minors,
            pointers,
            band: (spec.arc_start + 0.8 * span, spec.arc_end),
        }
    }
}

/// The tick angle angularly nearest to `a`.
fn nearest_tick(a: f64, ticks: &[f64]) -> Option<f64> {
    let tau = std::f64::consts::TAU;
    let gap = |t: f64| {
        let d = (a - t).rem_euclid(tau);
        d.min(tau - d)
    };
    ticks.iter().copied().min_by(|x, y| gap(*x).total_cmp(&gap(*y)))
}

fn shade(spec: &DialSpec, layout: &Layout, p: Point) -> [f64; 3] {
    let r = spec.radius;
    let rel = geom::sub(p, spec.center);
    let dist = geom::norm(rel);
    let mut col = spec.background;
    // bezel ring then face
    over(&mut col, spec.bezel_color, coverage(dist - BEZEL * r));
    over(&mut col, spec.face_color, coverage(dist - r));
    if dist < r + 1.0 {
        let ang = rel[1].atan2(rel[0]);
        let tau = std::f64::consts::TAU;
        // range band near the top of the scale
        let rel_ang = |a: f64| (a - spec.arc_start).rem_euclid(tau) + spec.arc_start;
        let a = rel_ang(ang);
        if a >= layout.band.0 && a <= layout.band.1 {
            let d = (dist - 0.74 * r).abs() - 0.035 * r;
            over(&mut col, [0.8, 0.15, 0.1], 0.85 * coverage(d));
        }
        // scale arc line
        if a >= spec.arc_start && a <= spec.arc_end {
            let d = (dist - 0.95 * r).abs() - 0.006 * r - 0.3;
            over(&mut col, spec.tick_color, coverage(d));
        }
        let tick = |t: f64, r0: f64, r1: f64, w: f64| {
            let u = DialSpec::unit(t);
            seg_dist(p, geom::add(spec.center, geom::scale(u, r0)), geom::add(spec.center, geom::scale(u, r1))) - w / 2.0
        };
        if let Some(t) = nearest_tick(ang, &layout.minors) {
            over(&mut col, spec.tick_color, coverage(tick(t, 0.86 * r, 0.95 * r, (0.012 * r).max(0.8))));
        }
        if let Some(t) = nearest_tick(ang, &layout.majors) {
            over(&mut col, spec.tick_color, coverage(tick(t, 0.78 * r, 0.97 * r, (0.025 * r).max(1.2))));
        }
    }
    for (poly, ps) in layout.pointers.iter().zip(&spec.pointers) {
        over(&mut col, ps.color, coverage(polygon_sdf(p, poly)));
    }
    let cap = spec.pointers.first().map_or(spec.tick_color, |p| p.color);
    over(&mut col, cap, coverage(dist - 0.07 * r));
    col
}

fn gaussian_blur(data: &mut [f64], w: usize, h: usize, sigma: f64) {
    let rad = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-rad..=rad).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    for plane in data.chunks_mut(w * h) {
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * plane[y * w + clamp(x as i64 + i as i64 - rad, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp[clamp(y as i64 + i as i64 - rad, h) * w + x])
                    .sum();
            }
        }
    }
}

/// Render a dial. Labels come from the exact geometry; degradations only
/// touch pixels. All randomness is drawn from `spec.seed`.
pub fn render_dial(spec: &DialSpec) -> Result<RenderedDial, SynthError> {
    spec.validate()?;
    for p in &spec.pointers {
        if p.length_ratio > 1.0 {
            return Err(SynthError::Spec("pointer longer than the dial radius".into()));
        }
    }
    let [w, h] = spec.image_size;
    let hom = spec.homography();
    let inv_m = hom.matrix().try_inverse().ok_or_else(|| SynthError::Spec("singular warp".into()))?;
    let inv = Homography::from_matrix(std::array::from_fn(|r| std::array::from_fn(|c| inv_m[(r, c)])))
        .map_err(|e| SynthError::Spec(e.to_string()))?;
    let layout = Layout::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let q = inv.apply([x as f64, y as f64]).unwrap_or([f64::INFINITY; 2]);
            let c = if q[0].is_finite() { shade(spec, &layout, q) } else { spec.background };
            for ch in 0..3 {
                data[ch * plane + y * w + x] = c[ch];
            }
        }
    }

    let d = spec.degradations;
    if d.glare {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let off: f64 = rng.random_range(0.0..0.6);
        let g = hom
            .apply(geom::add(spec.center, geom::scale(DialSpec::unit(a), off * spec.radius)))
            .unwrap_or(spec.center);
        let s = rng.random_range(0.2..0.4) * spec.radius;
        let amp = rng.random_range(0.35..0.7);
        for y in 0..h {
            for x in 0..w {
                let k = amp * (-geom::dist2([x as f64, y as f64], g) / (2.0 * s * s)).exp();
                for ch in 0..3 {
                    data[ch * plane + y * w + x] += k;
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v *= d.brightness);
    if d.blur_radius > 0.0 {
        gaussian_blur(&mut data, w, h, d.blur_radius / 2.0);
    }
    if d.noise_std > 0.0 {
        let n = Normal::new(0.0, d.noise_std).map_err(|e| SynthError::Spec(e.to_string()))?;
        data.iter_mut().for_each(|v| *v += n.sample(&mut rng));
    }
    let image = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |ch: usize| (data[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });

    let to_img = |p: Point| hom.apply(p).map_err(|e| SynthError::Spec(e.to_string()));
    let outline = spec.bezel_outline().into_iter().map(to_img).collect::<Result<Vec<_>, _>>()?;
    let bbox = clip_box(BBox::around(outline).expect("non-empty outline"), w, h);
    let tmpl_pts = spec.template_scale_points();
    let pointers = spec
        .pointers
        .iter()
        .map(|p| {
            let (tip, tail) = spec.pointer_ends(p);
            Ok(PointerLabel {
                tip: to_img(tip)?,
                tail: to_img(tail)?,
                visibility: [2, 2, 2],
                value: Some(p.value),
                out_of_range: p.out_of_range,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let meter = MeterAnnotation {
        bbox,
        pointers,
        scale_points: tmpl_pts.iter().map(|&p| to_img(p)).collect::<Result<_, _>>()?,
        scale_values: spec.tick_values.clone(),
        template_id: None,
    };
    let t_bbox = BBox::around(spec.bezel_outline()).expect("non-empty outline");
    let template = MeterTemplate {
        id: String::new(),
        image: None,
        bbox: t_bbox,
        scale_points: tmpl_pts,
        scale_values: spec.tick_values.clone(),
        dial_groups: None,
    };
    Ok(RenderedDial {
        image,
        meter,
        template,
        hard: d.is_hard(),
    })
}

fn clip_box(b: BBox, w: usize, h: usize) -> BBox {
    let x0 = b.x.max(0.0);
    let y0 = b.y.max(0.0);
    let x1 = (b.x + b.w).min(w as f64);
    let y1 = (b.y + b.h).min(h as f64);
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

// --- spec sampling ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRanges {
    pub image_side: [usize; 2],
    /// Bezel diameter as a fraction of the image side.
    pub dial_fraction: [f64; 2],
    pub ticks: [usize; 2],
    pub pointers: [usize; 2],
    pub length_ratio: [f64; 2],
    pub tail_ratio: [f64; 2],
    /// Pointer width as a fraction of the radius.
    pub width_ratio: [f64; 2],
    /// Arc sweep in degrees.
    pub sweep_deg: [f64; 2],
    /// Minimum angular separation between pointers of one dial, degrees.
    pub min_separation_deg: f64,
    pub out_of_range_fraction: f64,
    /// Perspective strength; 0 disables warping.
    pub warp: f64,
    pub blur_prob: f64,
    pub max_blur: f64,
    pub noise_prob: f64,
    pub max_noise: f64,
    pub glare_prob: f64,
    pub brightness: [f64; 2],
}

impl Default for SynthRanges {
    fn default() -> Self {
        Self {
            image_side: [112, 192],
            dial_fraction: [0.55, 0.92],
            ticks: [7, 13],
            pointers: [1, 2],
            length_ratio: [0.55, 0.75],
            tail_ratio: [0.1, 0.25],
            width_ratio: [0.04, 0.09],
            sweep_deg: [240.0, 300.0],
            min_separation_deg: 75.0,
            out_of_range_fraction: 0.05,
            warp: 0.06,
            blur_prob: 0.3,
            max_blur: 3.0,
            noise_prob: 0.3,
            max_noise: 0.15,
            glare_prob: 0.15,
            brightness: [0.65, 1.15],
        }
    }
}

impl SynthRanges {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(format!("synth ranges: {m}")));
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.image_side[0] < 32 || self.image_side[0] > self.image_side[1] {
            return bad("image_side must be ordered and at least 32");
        }
        if self.ticks[0] < 2 || self.ticks[0] > self.ticks[1] {
            return bad("ticks must be ordered and at least 2");
        }
        if self.pointers[0] < 1 || self.pointers[0] > self.pointers[1] {
            return bad("pointers must be ordered and at least 1");
        }
        for (name, r, lo, hi) in [
            ("dial_fraction", self.dial_fraction, 0.05, 1.0),
            ("length_ratio", self.length_ratio, 0.05, 1.0),
            ("tail_ratio", self.tail_ratio, 0.0, 1.0),
            ("width_ratio", self.width_ratio, 0.0, 0.5),
            ("sweep_deg", self.sweep_deg, 10.0, 350.0),
            ("brightness", self.brightness, 0.0, 4.0),
        ] {
            if !ordered(r) || r[0] < lo || r[1] > hi {
                return bad(&format!("{name} must be ordered within [{lo}, {hi}]"));
            }
        }
        for (name, p) in [
            ("out_of_range_fraction", self.out_of_range_fraction),
            ("blur_prob", self.blur_prob),
            ("noise_prob", self.noise_prob),
            ("glare_prob", self.glare_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be a probability"));
            }
        }
        let sep = self.min_separation_deg * (self.pointers[1] as f64 - 1.0);
        if !(self.min_separation_deg >= 0.0) || sep >= 360.0 {
            return bad("min_separation_deg leaves no room for the pointers");
        }
        if !(self.warp >= 0.0 && self.warp < 0.5) || !(self.max_blur >= 0.0) || !(self.max_noise >= 0.0) {
            return bad("warp, max_blur and max_noise must be small and non-negative");
        }
        Ok(())
    }
}

fn range_f(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn range_u(rng: &mut impl Rng, r: [usize; 2]) -> usize {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn tinted(rng: &mut impl Rng, level: [f64; 2], spread: f64) -> [f64; 3] {
    let level = rng.random_range(level[0]..level[1]);
    std::array::from_fn(|_| (level * (1.0 + rng.random_range(-spread..=spread))).clamp(0.0, 1.0))
}

/// Draw a random dial. Pointer values are uniform over the scale, except a
/// configurable fraction placed past either end of the arc.
pub fn sample_spec(rng: &mut impl Rng, ranges: &SynthRanges) -> DialSpec {
    let side = range_u(rng, ranges.image_side);
    let frac = range_f(rng, ranges.dial_fraction);
    let radius = frac * side as f64 / (2.0 * BEZEL);
    let sweep = range_f(rng, ranges.sweep_deg).to_radians();
    // arc centered on "up" (−y) with a random tilt
    let mid = -std::f64::consts::FRAC_PI_2 + rng.random_range(-0.15..0.15);
    let (arc_start, arc_end) = (mid - sweep / 2.0, mid + sweep / 2.0);
    let e = range_u(rng, ranges.ticks);
    let step = [1.0, 2.0, 5.0, 10.0, 0.5, 0.1][rng.random_range(0..6)];
    let v0 = [0.0, 0.0, -step * (e / 2) as f64][rng.random_range(0..3)];
    let tick_values: Vec<f64> = (0..e).map(|i| v0 + step * i as f64).collect();
    let (lo, hi) = (tick_values[0], tick_values[e - 1]);

    let n_ptr = range_u(rng, ranges.pointers);
    let min_sep = ranges.min_separation_deg.to_radians();
    let gap = std::f64::consts::TAU - sweep;
    let mut angles: Vec<f64> = Vec::new();
    let mut pointers = Vec::new();
    let dark = rng.random_bool(0.7);
    while pointers.len() < n_ptr {
        let oor = rng.random_bool(ranges.out_of_range_fraction.clamp(0.0, 1.0));
        let (value, angle) = if oor {
            // past either end, staying clear of the other end of the arc
            let past = rng.random_range(0.1..0.45) * gap;
            let a = if rng.random_bool(0.5) { arc_start - past } else { arc_end + past };
            (lo + (a - arc_start) / sweep * (hi - lo), a)
        } else {
            let v = rng.random_range(lo..=hi);
            (v, arc_start + (v - lo) / (hi - lo) * sweep)
        };
        let clash = angles.iter().any(|&b| {
            let d = (angle - b).rem_euclid(std::f64::consts::TAU);
            d.min(std::f64::consts::TAU - d) < min_sep
        });
        if clash {
            continue;
        }
        angles.push(angle);
        let color = if dark || pointers.len() > 0 {
            tinted(rng, [0.05, 0.25], 0.2)
        } else {
            [rng.random_range(0.6..0.9), rng.random_range(0.05..0.2), rng.random_range(0.05..0.2)]
        };
        pointers.push(PointerSpec {
            value,
            length_ratio: range_f(rng, ranges.length_ratio),
            tail_ratio: range_f(rng, ranges.tail_ratio),
            width: (range_f(rng, ranges.width_ratio) * radius).max(1.5),
            color,
            out_of_range: oor,
        });
    }

    let c = [(side as f64 - 1.0) / 2.0 + rng.random_range(-0.03..0.03) * side as f64, (side as f64 - 1.0) / 2.0 + rng.random_range(-0.03..0.03) * side as f64];
    let mut warp = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if ranges.warp > 0.0 {
        let s = ranges.warp;
        let a = [[1.0 + rng.random_range(-s..s), rng.random_range(-s..s)], [rng.random_range(-s..s), 1.0 + rng.random_range(-s..s)]];
        let g = [rng.random_range(-s..s) / radius, rng.random_range(-s..s) / radius];
        // about the dial center: x' = A(x−c)/(1 + g·(x−c)) + c
        let ac = [a[0][0] * c[0] + a[0][1] * c[1], a[1][0] * c[0] + a[1][1] * c[1]];
        let gc = g[0] * c[0] + g[1] * c[1];
        warp = [
            [a[0][0] + c[0] * g[0], a[0][1] + c[0] * g[1], -ac[0] + c[0] * (1.0 - gc)],
            [a[1][0] + c[1] * g[0], a[1][1] + c[1] * g[1], -ac[1] + c[1] * (1.0 - gc)],
            [g[0], g[1], 1.0 - gc],
        ];
    }
    let mut spec = DialSpec {
        image_size: [side, side],
        center: c,
        radius,
        arc_start,
        arc_end,
        tick_values,
        minor_ticks: [0, 1, 4][rng.random_range(0..3)],
        pointers,
        warp,
        face_color: tinted(rng, [0.78, 1.0], 0.06),
        background: tinted(rng, [0.15, 0.7], 0.25),
        bezel_color: tinted(rng, [0.2, 0.6], 0.1),
        tick_color: tinted(rng, [0.05, 0.25], 0.1),
        degradations: Degradations {
            blur_radius: if rng.random_bool(ranges.blur_prob) { rng.random_range(0.5..ranges.max_blur.max(0.6)) } else { 0.0 },
            noise_std: if rng.random_bool(ranges.noise_prob) { rng.random_range(0.01..ranges.max_noise.max(0.02)) } else { 0.0 },
            brightness: range_f(rng, ranges.brightness),
            glare: rng.random_bool(ranges.glare_prob),
        },
        seed: rng.random(),
    };
    // keep the warped bezel inside the image
    for _ in 0..20 {
        let hom = spec.homography();
        let fits = spec.bezel_outline().iter().all(|&p| {
            hom.apply(p)
                .is_ok_and(|q| q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= side as f64 - 1.0 && q[1] <= side as f64 - 1.0)
        });
        if fits {
            break;
        }
        spec.radius *= 0.95;
        for p in &mut spec.pointers {
            p.width *= 0.95;
        }
    }
    spec
}

// --- annotation I/O --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
    #[serde(default)]
    hard: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: BBox,
    area: f64,
    iscrowd: u8,
    num_keypoints: usize,
    keypoints: Vec<f64>,
    #[serde(default)]
    scale_points: Vec<Point>,
    #[serde(default)]
    scale_values: Vec<f64>,
    #[serde(default)]
    pointer_values: Vec<Option<f64>>,
    #[serde(default)]
    out_of_range: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    keypoints: Vec<String>,
    skeleton: Vec<[u32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

fn to_coco(set: &AnnotationSet) -> CocoFile {
    let mut annotations = Vec::new();
    for img in &set.images {
        for m in &img.meters {
            let mut kp = Vec::with_capacity(9 * m.pointers.len());
            for p in &m.pointers {
                let mid = geom::scale(geom::add(p.tip, p.tail), 0.5);
                for (pt, v) in [p.tip, mid, p.tail].into_iter().zip(p.visibility) {
                    kp.extend([pt[0], pt[1], v as f64]);
                }
            }
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: img.id,
                category_id: 1,
                bbox: m.bbox,
                area: m.bbox.area(),
                iscrowd: 0,
                num_keypoints: m.pointers.iter().flat_map(|p| p.visibility).filter(|&v| v > 0).count(),
                keypoints: kp,
                scale_points: m.scale_points.clone(),
                scale_values: m.scale_values.clone(),
                pointer_values: m.pointers.iter().map(|p| p.value).collect(),
                out_of_range: m.pointers.iter().map(|p| p.out_of_range).collect(),
                template_id: m.template_id.clone(),
            });
        }
    }
    CocoFile {
        images: set
            .images
            .iter()
            .map(|i| CocoImage {
                id: i.id,
                file_name: i.file_name.clone(),
                width: i.width,
                height: i.height,
                hard: i.hard,
            })
            .collect(),
        annotations,
        categories: vec![CocoCategory {
            id: 1,
            name: "meter".into(),
            keypoints: vec!["tip".into(), "midpoint".into(), "tail".into()],
            skeleton: vec![[1, 2], [2, 3]],
        }],
    }
}

fn from_coco(f: CocoFile) -> Result<AnnotationSet, SynthError> {
    let mut images: Vec<ImageAnnotation> = f
        .images
        .into_iter()
        .map(|i| ImageAnnotation {
            id: i.id,
            file_name: i.file_name,
            width: i.width,
            height: i.height,
            hard: i.hard,
            meters: Vec::new(),
        })
        .collect();
    for a in f.annotations {
        if a.keypoints.len() % 9 != 0 {
            return Err(SynthError::Annotation(format!(
                "annotation {}: {} keypoint values is not a multiple of 9 (tip, midpoint, tail)",
                a.id,
                a.keypoints.len()
            )));
        }
        let n = a.keypoints.len() / 9;
        let pointers = a
            .keypoints
            .chunks(9)
            .enumerate()
            .map(|(k, c)| PointerLabel {
                tip: [c[0], c[1]],
                tail: [c[6], c[7]],
                visibility: [c[2] as u8, c[5] as u8, c[8] as u8],
                value: a.pointer_values.get(k).copied().flatten(),
                out_of_range: a.out_of_range.get(k).copied().unwrap_or(false),
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(pointers.len(), n);
        if a.scale_points.len() != a.scale_values.len() {
            return Err(SynthError::Annotation(format!("annotation {}: scale points and values differ in length", a.id)));
        }
        let img = images
            .iter_mut()
            .find(|i| i.id == a.image_id)
            .ok_or_else(|| SynthError::Annotation(format!("annotation {} refers to unknown image {}", a.id, a.image_id)))?;
        img.meters.push(MeterAnnotation {
            bbox: a.bbox,
            pointers,
            scale_points: a.scale_points,
            scale_values: a.scale_values,
            template_id: a.template_id,
        });
    }
    Ok(AnnotationSet { images })
}

pub fn annotations_to_json(set: &AnnotationSet) -> Result<String, SynthError> {
    Ok(serde_json::to_string(&to_coco(set))?)
}

pub fn annotations_from_json(s: &str) -> Result<AnnotationSet, SynthError> {
    from_coco(serde_json::from_str(s)?)
}

pub fn write_annotations(set: &AnnotationSet, path: &Path) -> Result<(), SynthError> {
    std::fs::write(path, annotations_to_json(set)?)?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet, SynthError> {
    annotations_from_json(&std::fs::read_to_string(path)?)
}

// --- splitting -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded disjoint split of `hard.len()` items by `ratios`. With a quota,
/// that fraction of the test split is filled from hard items when possible.
pub fn split_dataset(hard: &[bool], ratios: [f64; 3], seed: u64, hard_quota: Option<f64>) -> Result<Split, SynthError> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || !(total > 0.0) {
        return Err(SynthError::Split(format!("ratios {ratios:?} must be non-negative with a positive sum")));
    }
    if let Some(q) = hard_quota {
        if !(0.0..=1.0).contains(&q) {
            return Err(SynthError::Split(format!("hard quota {q} not in [0, 1]")));
        }
    }
    let n = hard.len();
    let n_val = (n as f64 * ratios[1] / total).round() as usize;
    let n_test = ((n as f64 * ratios[2] / total).round() as usize).min(n - n_val);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut test = Vec::with_capacity(n_test);
    if let Some(q) = hard_quota {
        let want_hard = (q * n_test as f64).round() as usize;
        let (h, e): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&i| hard[i]);
        let take_h = want_hard.min(h.len());
        let take_e = (n_test - take_h).min(e.len());
        let take_h = n_test - take_e;
        test.extend(&h[..take_h]);
        test.extend(&e[..take_e]);
    } else {
        test.extend(&order[..n_test]);
    }
    let mut in_test = vec![false; n];
    test.iter().for_each(|&i| in_test[i] = true);
    let rest: Vec<usize> = order.into_iter().filter(|&i| !in_test[i]).collect();
    let val = rest[..n_val].to_vec();
    let train = rest[n_val..].to_vec();
    Ok(Split { train, val, test })
}
