//! Meter reading from detected pointer vectors: box-to-template assignment,
//! homography estimation, scale-point projection, ray/scale intersection and
//! linear interpolation between ticks.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::VectorDetection;
use crate::geom::{self, BBox, Point};

pub const TEMPLATE_VERSION: &str = "meter-template-1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("need at least {need} correspondences, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("degenerate point configuration (rank deficient, singular value ratio {0:.3e})")]
    Rank(f64),
    #[error("singular homography")]
    Singular,
    #[error("point {0:?} maps to the line at infinity")]
    AtInfinity(Point),
    #[error("zero-length scale segment {0}")]
    ZeroSegment(usize),
    #[error("point {point:?} is {distance:.3e} px off segment {segment}")]
    OffSegment {
        point: Point,
        segment: usize,
        distance: f64,
    },
    #[error("invalid template: {0}")]
    Template(String),
    #[error("template version {found:?}, expected {TEMPLATE_VERSION:?}")]
    Version { found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Scale points belonging to one dial, in polyline order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialGroup {
    pub points: Vec<usize>,
    /// Representative center; the centroid of the group's scale points if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterTemplate {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub bbox: BBox,
    pub scale_points: Vec<Point>,
    pub scale_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dial_groups: Option<Vec<DialGroup>>,
}

impl MeterTemplate {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let e = self.scale_points.len();
        if e < 2 {
            return Err(PipelineError::Template(format!("{}: needs at least 2 scale points", self.id)));
        }
        if self.scale_values.len() != e {
            return Err(PipelineError::Template(format!("{}: {} points but {} values", self.id, e, self.scale_values.len())));
        }
        if self.scale_points.windows(2).any(|w| w[0] == w[1]) {
            return Err(PipelineError::Template(format!("{}: repeated consecutive scale point", self.id)));
        }
        if let Some(groups) = &self.dial_groups {
            let mut seen = vec![false; e];
            for g in groups {
                if g.points.len() < 2 {
                    return Err(PipelineError::Template(format!("{}: dial group with fewer than 2 points", self.id)));
                }
                for &i in &g.points {
                    if i >= e || std::mem::replace(&mut seen[i], true) {
                        return Err(PipelineError::Template(format!("{}: dial groups are not a partition", self.id)));
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(PipelineError::Template(format!("{}: dial groups are not a partition", self.id)));
            }
        }
        Ok(())
    }

    /// Dial groups, defaulting to one group over all scale points.
    pub fn groups(&self) -> Vec<DialGroup> {
        self.dial_groups.clone().unwrap_or_else(|| {
            vec![DialGroup {
                points: (0..self.scale_points.len()).collect(),
                center: None,
            }]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateFile {
    pub version: String,
    pub templates: Vec<MeterTemplate>,
}

impl TemplateFile {
    pub fn new(templates: Vec<MeterTemplate>) -> Self {
        Self {
            version: TEMPLATE_VERSION.to_string(),
            templates,
        }
    }

    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let f: TemplateFile = serde_json::from_str(s)?;
        if f.version != TEMPLATE_VERSION {
            return Err(PipelineError::Version { found: f.version });
        }
        for t in &f.templates {
            t.validate()?;
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Result of matching detected boxes to template boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAssignment {
    /// `(detected index, template index)` pairs, ascending by detected index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub unassigned_detected: Vec<usize>,
    pub unassigned_template: Vec<usize>,
}

/// Minimum-cost assignment of `rows ≤ cols` by the shortest augmenting path
/// method with dual potentials. Returns the column of each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    debug_assert!(n <= m);
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Pair detected meter boxes with template boxes by minimum total center
/// distance. Either side may be larger; the excess is reported unassigned.
pub fn assign_boxes(detected: &[Point], template: &[Point]) -> BoxAssignment {
    let transpose = detected.len() > template.len();
    let (rows, cols) = if transpose { (template, detected) } else { (detected, template) };
    let cost: Vec<Vec<f64>> = rows.iter().map(|&r| cols.iter().map(|&c| geom::dist(r, c)).collect()).collect();
    let assign = if rows.is_empty() { Vec::new() } else { hungarian(&cost) };
    let mut pairs: Vec<(usize, usize)> = assign
        .iter()
        .enumerate()
        .map(|(r, &c)| if transpose { (c, r) } else { (r, c) })
        .collect();
    pairs.sort();
    let total_cost = pairs.iter().map(|&(d, t)| geom::dist(detected[d], template[t])).sum();
    let unassigned_detected = (0..detected.len()).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
    let unassigned_template = (0..template.len()).filter(|i| !pairs.iter().any(|p| p.1 == *i)).collect();
    BoxAssignment {
        pairs,
        total_cost,
        unassigned_detected,
        unassigned_template,
    }
}

/// Projective map of the plane, normalized so `m[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self, PipelineError> {
        let s = m[2][2];
        if !s.is_finite() || s.abs() < 1e-12 {
            return Err(PipelineError::Singular);
        }
        let mut n = m;
        n.iter_mut().flatten().for_each(|v| *v /= s);
        let h = Self { m: n };
        if h.matrix().determinant().abs() <= 1e-12 {
            return Err(PipelineError::Singular);
        }
        Ok(h)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    pub fn apply(&self, p: Point) -> Result<Point, PipelineError> {
        let m = &self.m;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if w.abs() < 1e-12 {
            return Err(PipelineError::AtInfinity(p));
        }
        Ok([
            (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w,
            (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w,
        ])
    }
}

/// Similarity taking the points to zero centroid and mean distance √2.
fn normalizer(pts: &[Point]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
    let mean = pts.iter().map(|&p| geom::dist(p, c)).sum::<f64>() / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c[0], 0.0, s, -s * c[1], 0.0, 0.0, 1.0)
}

fn apply_mat(m: &Matrix3<f64>, p: Point) -> Point {
    let v = m * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Normalized DLT from `(source, destination)` pairs. Returns the homography
/// and the maximum reprojection error in destination pixels.
pub fn estimate_homography(pairs: &[(Point, Point)]) -> Result<(Homography, f64), PipelineError> {
    if pairs.len() < 4 {
        return Err(PipelineError::TooFewPoints {
            need: 4,
            got: pairs.len(),
        });
    }
    let src: Vec<Point> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point> = pairs.iter().map(|p| p.1).collect();
    let ts = normalizer(&src);
    let td = normalizer(&dst);
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src.iter().zip(&dst).enumerate() {
        let [x, y] = apply_mat(&ts, *s);
        let [u, v] = apply_mat(&td, *d);
        let r = 2 * k;
        a.row_mut(r).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
        a.row_mut(r + 1).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u]);
    }
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    // singular values come sorted in descending order
    let ratio = sv[7] / sv[0];
    if !(ratio > 1e-9) {
        return Err(PipelineError::Rank(ratio));
    }
    let vt = svd.v_t.expect("requested V");
    let h = vt.row(8);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or(PipelineError::Singular)?;
    let full = td_inv * hn * ts;
    let hom = Homography::from_matrix(std::array::from_fn(|r| std::array::from_fn(|c| full[(r, c)])))?;
    let mut residual: f64 = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        residual = residual.max(geom::dist(hom.apply(*s)?, *d));
    }
    Ok((hom, residual))
}

/// Map template scale points into the image.
pub fn project_scale_points(h: &Homography, points: &[Point]) -> Result<Vec<Point>, PipelineError> {
    points.iter().map(|&p| h.apply(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayHit {
    /// Segment `(s_q, s_{q+1})`.
    pub segment: usize,
    pub point: Point,
    /// Ray parameter, the distance from the origin for a unit direction.
    pub t: f64,
}

/// First crossing of the ray `origin + t·dir, t > 0` with the polyline.
pub fn intersect_ray_polyline(origin: Point, dir: Point, points: &[Point]) -> Option<RayHit> {
    const EPS: f64 = 1e-12;
    let mut best: Option<RayHit> = None;
    for (q, w) in points.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let e = geom::sub(b, a);
        let denom = geom::cross(dir, e);
        if denom.abs() < EPS * geom::norm(e) {
            continue;
        }
        let ao = geom::sub(a, origin);
        let t = geom::cross(ao, e) / denom;
        let u = geom::cross(ao, dir) / denom;
        if !(t > 0.0) || u < -EPS || u > 1.0 + EPS {
            continue;
        }
        let u = u.clamp(0.0, 1.0);
        if best.is_none_or(|h| t < h.t) {
            best = Some(RayHit {
                segment: q,
                point: geom::add(a, geom::scale(e, u)),
                t,
            });
        }
    }
    best
}

/// Linear interpolation between the values at the ends of segment `q`.
pub fn compute_reading(p: Point, q: usize, points: &[Point], values: &[f64]) -> Result<f64, PipelineError> {
    let (a, b) = (points[q], points[q + 1]);
    let len = geom::dist(a, b);
    if len == 0.0 {
        return Err(PipelineError::ZeroSegment(q));
    }
    let off = geom::cross(geom::sub(p, a), geom::sub(b, a)).abs() / len;
    let along = geom::dot(geom::sub(p, a), geom::sub(b, a)) / len;
    if off > 1e-6 || along < -1e-6 || along > len + 1e-6 {
        return Err(PipelineError::OffSegment {
            point: p,
            segment: q,
            distance: off.max(-along).max(along - len),
        });
    }
    Ok(geom::dist(a, p) / len * (values[q + 1] - values[q]) + values[q])
}

/// Index of the nearest center; the lowest index wins ties.
pub fn assign_pointer_to_dial(pinpoint: Point, centers: &[Point]) -> usize {
    let mut best = 0;
    for (i, &c) in centers.iter().enumerate().skip(1) {
        if geom::dist2(pinpoint, c) < geom::dist2(pinpoint, centers[best]) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Reading {
    Read {
        pointer: usize,
        dial: usize,
        value: f64,
        segment: usize,
        point: Point,
    },
    /// The pointer's ray never crosses its dial's scale.
    Unread { pointer: usize, dial: usize },
}

impl Reading {
    pub fn value(&self) -> Option<f64> {
        match self {
            Reading::Read { value, .. } => Some(*value),
            Reading::Unread { .. } => None,
        }
    }

    pub fn dial(&self) -> usize {
        match self {
            Reading::Read { dial, .. } | Reading::Unread { dial, .. } => *dial,
        }
    }
}

/// Read every detection (given in image pixels) against a template mapped
/// into the image by `h`.
pub fn read_meter(
    detections: &[VectorDetection],
    template: &MeterTemplate,
    h: &Homography,
) -> Result<Vec<Reading>, PipelineError> {
    template.validate()?;
    let projected = project_scale_points(h, &template.scale_points)?;
    let groups = template.groups();
    let mut polylines = Vec::with_capacity(groups.len());
    let mut centers = Vec::with_capacity(groups.len());
    for g in &groups {
        let pts: Vec<Point> = g.points.iter().map(|&i| projected[i]).collect();
        let vals: Vec<f64> = g.points.iter().map(|&i| template.scale_values[i]).collect();
        let center = match g.center {
            Some(c) => h.apply(c)?,
            None => {
                let n = pts.len() as f64;
                [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n]
            }
        };
        centers.push(center);
        polylines.push((pts, vals));
    }
    detections
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let dial = assign_pointer_to_dial(d.tip(), &centers);
            let (pts, vals) = &polylines[dial];
            match intersect_ray_polyline(d.tip(), d.direction(), pts) {
                Some(hit) => Ok(Reading::Read {
                    pointer: k,
                    dial,
                    value: compute_reading(hit.point, hit.segment, pts, vals)?,
                    segment: hit.segment,
                    point: hit.point,
                }),
                None => Ok(Reading::Unread { pointer: k, dial }),
            }
        })
        .collect()
}

/// Post-processing that turns per-pointer readings into per-dial values.
pub trait CombineReadings {
    fn combine(&self, detections: &[VectorDetection], readings: &[Reading]) -> Vec<(usize, Option<f64>)>;
}

/// Each dial is independent and shows the reading of its most confident pointer.
#[derive(Debug, Clone, Copy, Default)]
pub struct IndependentDials;

impl CombineReadings for IndependentDials {
    fn combine(&self, detections: &[VectorDetection], readings: &[Reading]) -> Vec<(usize, Option<f64>)> {
        let mut dials: Vec<usize> = readings.iter().map(Reading::dial).collect();
        dials.sort_unstable();
        dials.dedup();
        dials
            .into_iter()
            .map(|dial| {
                let best = readings
                    .iter()
                    .filter(|r| r.dial() == dial && r.value().is_some())
                    .max_by(|a, b| {
                        let conf = |r: &Reading| match r {
                            Reading::Read { pointer, .. } => detections[*pointer].confidence,
                            Reading::Unread { .. } => f64::NEG_INFINITY,
                        };
                        conf(a).total_cmp(&conf(b))
                    });
                (dial, best.and_then(Reading::value))
            })
            .collect()
    }
}
