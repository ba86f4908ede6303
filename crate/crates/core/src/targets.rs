//! Groundtruth construction: patch cropping, augmentation, and the tip
//! heatmap / direction scalarmap targets.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Affine2, BBox, Point};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("pointer tip and tail coincide at {0:?}")]
    ZeroLength(Point),
    #[error("degenerate bounding box {0:?}")]
    DegenerateBox(BBox),
    #[error("bounding box {bbox:?} is not within the {width}x{height} image")]
    BoxOutside {
        bbox: BBox,
        width: usize,
        height: usize,
    },
    #[error("patch must be 3×h×w, got {0:?}")]
    PatchShape(Vec<usize>),
}

/// Labeled tip and tail of one pointer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointerAnnotation {
    pub tip: Point,
    pub tail: Point,
}

impl PointerAnnotation {
    pub fn new(tip: Point, tail: Point) -> Result<Self, TargetError> {
        if tip == tail {
            return Err(TargetError::ZeroLength(tip));
        }
        Ok(Self { tip, tail })
    }

    /// Tail-to-tip unit vector.
    pub fn direction(&self) -> Result<Point, TargetError> {
        let d = geom::sub(self.tip, self.tail);
        let n = geom::norm(d);
        if n == 0.0 {
            return Err(TargetError::ZeroLength(self.tip));
        }
        Ok([d[0] / n, d[1] / n])
    }

    pub fn to_vector(&self) -> Result<GroundTruthVector, TargetError> {
        let [alpha, beta] = self.direction()?;
        Ok(GroundTruthVector {
            x: self.tip[0],
            y: self.tip[1],
            alpha,
            beta,
        })
    }

    pub fn transformed(&self, t: &Affine2) -> Self {
        Self {
            tip: t.apply(self.tip),
            tail: t.apply(self.tail),
        }
    }
}

/// A pointer as a vector anchored at its tip; the confidence is implicitly 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthVector {
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl GroundTruthVector {
    pub fn tip(&self) -> Point {
        [self.x, self.y]
    }

    pub fn direction(&self) -> Point {
        [self.alpha, self.beta]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    /// `height × width`, row-major.
    pub heatmap: Vec<f64>,
    /// `2 × height × width`: alpha plane then beta plane.
    pub scalarmap: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub map_size: [usize; 2],
    pub lambda: f64,
    /// Gaussian standard deviation in map pixels.
    pub sigma: f64,
}

impl TargetConfig {
    pub fn new(map_size: [usize; 2], lambda: f64, sigma: f64) -> Self {
        Self {
            map_size,
            lambda,
            sigma,
        }
    }
}

/// Tip heatmap: `H(ρ) = exp(-min_k ‖ρ - λ p_k‖² / 2σ²)`, zero when there are
/// no vectors.
pub fn encode_heatmap(vectors: &[GroundTruthVector], w: usize, h: usize, lambda: f64, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    if vectors.is_empty() {
        return out;
    }
    let centers: Vec<Point> = vectors.iter().map(|v| [lambda * v.x, lambda * v.y]).collect();
    let denom = 2.0 * sigma * sigma;
    for j in 0..h {
        for i in 0..w {
            let rho = [i as f64, j as f64];
            let d2 = centers
                .iter()
                .map(|&c| geom::dist2(rho, c))
                .fold(f64::INFINITY, f64::min);
            out[j * w + i] = (-d2 / denom).exp();
        }
    }
    out
}

/// Number of pointers whose closed `3σ` disc contains each map pixel.
pub fn count_map(vectors: &[GroundTruthVector], w: usize, h: usize, lambda: f64, sigma: f64) -> Vec<u32> {
    let mut count = vec![0u32; w * h];
    let r = 3.0 * sigma;
    for v in vectors {
        let c = [lambda * v.x, lambda * v.y];
        for_disc(c, r, w, h, |idx| count[idx] += 1);
    }
    count
}

/// Visit every in-bounds pixel index within distance `r` of `c`.
fn for_disc(c: Point, r: f64, w: usize, h: usize, mut f: impl FnMut(usize)) {
    let r2 = r * r;
    let x0 = (c[0] - r).floor().max(0.0) as usize;
    let y0 = (c[1] - r).floor().max(0.0) as usize;
    let x1 = (c[0] + r).ceil().min(w as f64 - 1.0);
    let y1 = (c[1] + r).ceil().min(h as f64 - 1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    for j in y0..=y1 as usize {
        for i in x0..=x1 as usize {
            if geom::dist2([i as f64, j as f64], c) <= r2 {
                f(j * w + i);
            }
        }
    }
}

/// Direction scalarmap: inside each pointer's `3σ` disc the pixel holds the
/// pointer's unit vector; overlapping discs average their vectors.
pub fn encode_scalarmap(vectors: &[GroundTruthVector], w: usize, h: usize, lambda: f64, sigma: f64) -> Vec<f64> {
    let plane = w * h;
    let mut sum = vec![0.0; 2 * plane];
    let mut count = vec![0u32; plane];
    let r = 3.0 * sigma;
    for v in vectors {
        let c = [lambda * v.x, lambda * v.y];
        for_disc(c, r, w, h, |idx| {
            sum[idx] += v.alpha;
            sum[plane + idx] += v.beta;
            count[idx] += 1;
        });
    }
    for (idx, &n) in count.iter().enumerate() {
        if n > 0 {
            sum[idx] /= n as f64;
            sum[plane + idx] /= n as f64;
        }
    }
    sum
}

/// Whether a tip's scaled position lands on a map pixel.
pub fn tip_in_map(v: &GroundTruthVector, cfg: &TargetConfig) -> bool {
    let [w, h] = cfg.map_size;
    let (x, y) = (cfg.lambda * v.x, cfg.lambda * v.y);
    x >= -0.5 && y >= -0.5 && x < w as f64 - 0.5 && y < h as f64 - 0.5
}

/// Heatmap and scalarmap for the pointers of one patch. Tips that fall off
/// the map after augmentation are dropped.
pub fn encode_targets(annotations: &[PointerAnnotation], cfg: &TargetConfig) -> Result<TargetMaps, TargetError> {
    let vectors = annotations
        .iter()
        .map(PointerAnnotation::to_vector)
        .collect::<Result<Vec<_>, _>>()?;
    let kept: Vec<GroundTruthVector> = vectors.into_iter().filter(|v| tip_in_map(v, cfg)).collect();
    let [w, h] = cfg.map_size;
    Ok(TargetMaps {
        width: w,
        height: h,
        sigma: cfg.sigma,
        heatmap: encode_heatmap(&kept, w, h, cfg.lambda, cfg.sigma),
        scalarmap: encode_scalarmap(&kept, w, h, cfg.lambda, cfg.sigma),
    })
}

/// Planar RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    pub width: usize,
    pub height: usize,
    /// `3 × height × width`.
    pub data: Vec<f64>,
}

impl PlanarImage {
    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (w, h) = (self.width, self.height);
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = self.data[(c * h + y as usize) * w + x as usize];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, TargetError> {
        match t.shape() {
            &[3, h, w] | &[1, 3, h, w] => Ok(Self {
                width: w,
                height: h,
                data: t.data().to_vec(),
            }),
            s => Err(TargetError::PatchShape(s.to_vec())),
        }
    }

    /// `1×3×h×w` tensor for the model.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("consistent image")
    }
}

/// Letterboxed crop: the box is scaled uniformly so its longer side fills
/// `out_size`, centered, with zeros elsewhere. Returns the patch and the
/// map from patch pixels to image pixels.
pub fn crop_patch(img: &PlanarImage, bbox: BBox, out_size: usize) -> Result<(PlanarImage, Affine2), TargetError> {
    if !(bbox.w > 0.0 && bbox.h > 0.0 && bbox.x.is_finite() && bbox.y.is_finite()) || out_size == 0 {
        return Err(TargetError::DegenerateBox(bbox));
    }
    let (x0, y0, x1, y1) = bbox.span();
    let tol = 1e-9;
    if x0 < -0.5 - tol || y0 < -0.5 - tol || x1 > img.width as f64 - 0.5 + tol || y1 > img.height as f64 - 0.5 + tol {
        return Err(TargetError::BoxOutside {
            bbox,
            width: img.width,
            height: img.height,
        });
    }
    let s = out_size as f64 / bbox.w.max(bbox.h);
    let cp = (out_size as f64 - 1.0) / 2.0;
    let cb = bbox.center();
    let patch_to_image = Affine2::new([[1.0 / s, 0.0], [0.0, 1.0 / s]], [cb[0] - cp / s, cb[1] - cp / s]);
    let data = geom::warp_planar(
        &img.data,
        3,
        img.width,
        img.height,
        out_size,
        out_size,
        &patch_to_image,
        |q| bbox.contains(q),
    );
    Ok((
        PlanarImage {
            width: out_size,
            height: out_size,
            data,
        },
        patch_to_image,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    /// Maximum absolute rotation in degrees.
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: [0.98, 1.02],
            max_rotation_deg: 90.0,
        }
    }
}

/// Scale and rotate a patch about its center; annotations move with the pixels.
pub fn augment_with(
    patch: &PlanarImage,
    annotations: &[PointerAnnotation],
    scale: f64,
    angle: f64,
) -> (PlanarImage, Vec<PointerAnnotation>, Affine2) {
    let c = [(patch.width as f64 - 1.0) / 2.0, (patch.height as f64 - 1.0) / 2.0];
    let fwd = Affine2::similarity(scale, angle, c);
    let inv = fwd.inverse().expect("non-zero scale");
    let data = geom::warp_planar(
        &patch.data,
        3,
        patch.width,
        patch.height,
        patch.width,
        patch.height,
        &inv,
        |_| true,
    );
    let anns = annotations.iter().map(|a| a.transformed(&fwd)).collect();
    (
        PlanarImage {
            width: patch.width,
            height: patch.height,
            data,
        },
        anns,
        fwd,
    )
}

/// Random similarity augmentation drawn from `cfg`.
pub fn augment(
    patch: &PlanarImage,
    annotations: &[PointerAnnotation],
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> (PlanarImage, Vec<PointerAnnotation>) {
    let [lo, hi] = cfg.scale_range;
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let max = cfg.max_rotation_deg.to_radians();
    let a = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
    let (p, anns, _) = augment_with(patch, annotations, s, a);
    (p, anns)
}
