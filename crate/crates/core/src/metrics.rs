//! Keypoint (OKS) and direction (VDS) similarities, greedy matching, AP/AR
//! aggregation, and input perturbations for ablation sweeps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::VectorDetection;
use crate::geom::{self, Affine2};
use crate::targets::{GroundTruthVector, PlanarImage, PointerAnnotation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("angle {0} outside [0, π]")]
    ThetaRange(f64),
    #[error("object area must be positive, got {0}")]
    Area(f64),
    #[error("invalid perturbation: {0}")]
    Perturbation(String),
    #[error("invalid metric config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Oks,
    Vds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub tau: f64,
    pub kappa: f64,
    pub ap_thresholds: Vec<f64>,
    /// `[lo, hi)` area range of the medium split; large is `≥ hi`.
    pub medium_area: [f64; 2],
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            kappa: 0.2,
            ap_thresholds: (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect(),
            medium_area: [32.0 * 32.0, 96.0 * 96.0],
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.tau > 0.0 && self.kappa > 0.0) {
            return Err(MetricError::Config("tau and kappa must be positive".into()));
        }
        if self.ap_thresholds.is_empty()
            || self.ap_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0))
            || self.ap_thresholds.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(MetricError::Config("thresholds must be strictly increasing in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `exp(-d² / (2·area·τ²))`.
pub fn oks_pair(d: f64, area: f64, tau: f64) -> f64 {
    (-d * d / (2.0 * area * tau * tau)).exp()
}

/// `exp(-θ² / (2σ_θ²))` with `σ_θ = scale·κ`.
pub fn vds_pair(theta: f64, scale: f64, kappa: f64) -> Result<f64, MetricError> {
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(MetricError::ThetaRange(theta));
    }
    let s = scale * kappa;
    Ok((-theta * theta / (2.0 * s * s)).exp())
}

/// GT and detections of one meter, in a common pixel frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub gt: Vec<GroundTruthVector>,
    pub det: Vec<VectorDetection>,
    pub bbox_area: f64,
    pub patch_side: f64,
}

impl EvalInstance {
    fn similarity(&self, d: &VectorDetection, g: &GroundTruthVector, cfg: &MetricConfig, kind: SimilarityKind) -> f64 {
        match kind {
            SimilarityKind::Oks => oks_pair(geom::dist(d.tip(), g.tip()), self.bbox_area, cfg.tau),
            SimilarityKind::Vds => {
                // a zero direction points nowhere; score it as fully wrong
                let theta = if d.alpha == 0.0 && d.beta == 0.0 {
                    std::f64::consts::PI
                } else {
                    geom::angle_between(d.direction(), g.direction())
                };
                let scale = self.bbox_area.sqrt() / self.patch_side;
                vds_pair(theta.min(std::f64::consts::PI), scale, cfg.kappa).unwrap_or(0.0)
            }
        }
    }
}

/// One detection after matching: its GT index and similarity, or `None` for
/// a false positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub confidence: f64,
    pub matched: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub bbox_area: f64,
    pub num_gt: usize,
    /// In descending confidence order.
    pub detections: Vec<ScoredDetection>,
}

impl ImageMatches {
    /// Mean similarity over matched GT; `None` when nothing matched.
    pub fn mean_similarity(&self) -> Option<f64> {
        let sims: Vec<f64> = self.detections.iter().filter_map(|d| d.matched.map(|m| m.1)).collect();
        (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64)
    }
}

/// Greedy matching per image: detections in descending confidence each claim
/// their most similar unmatched GT (lowest index on ties).
pub fn match_and_score(
    instances: &[EvalInstance],
    cfg: &MetricConfig,
    kind: SimilarityKind,
) -> Result<Vec<ImageMatches>, MetricError> {
    instances
        .iter()
        .map(|inst| {
            if !(inst.bbox_area > 0.0) {
                return Err(MetricError::Area(inst.bbox_area));
            }
            let mut order: Vec<usize> = (0..inst.det.len()).collect();
            order.sort_by(|&a, &b| inst.det[b].confidence.total_cmp(&inst.det[a].confidence));
            let mut taken = vec![false; inst.gt.len()];
            let detections = order
                .into_iter()
                .map(|di| {
                    let d = &inst.det[di];
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, g) in inst.gt.iter().enumerate() {
                        if taken[gi] {
                            continue;
                        }
                        let s = inst.similarity(d, g, cfg, kind);
                        if best.is_none_or(|(_, bs)| s > bs) {
                            best = Some((gi, s));
                        }
                    }
                    if let Some((gi, _)) = best {
                        taken[gi] = true;
                    }
                    ScoredDetection {
                        confidence: d.confidence,
                        matched: best,
                    }
                })
                .collect();
            Ok(ImageMatches {
                bbox_area: inst.bbox_area,
                num_gt: inst.gt.len(),
                detections,
            })
        })
        .collect()
}

/// Table-style summary; `-1` marks a split with no groundtruth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApAr {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "APM")]
    pub ap_m: f64,
    #[serde(rename = "APL")]
    pub ap_l: f64,
    #[serde(rename = "AR")]
    pub ar: f64,
    #[serde(rename = "AR50")]
    pub ar50: f64,
    #[serde(rename = "AR75")]
    pub ar75: f64,
    #[serde(rename = "ARM")]
    pub ar_m: f64,
    #[serde(rename = "ARL")]
    pub ar_l: f64,
}

/// Interpolated precision averaged over 101 recall points, and final recall,
/// at one similarity threshold.
fn precision_recall(images: &[&ImageMatches], t: f64) -> Option<(f64, f64)> {
    let num_gt: usize = images.iter().map(|m| m.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let mut dets: Vec<(f64, bool)> = images
        .iter()
        .flat_map(|m| m.detections.iter().map(|d| (d.confidence, d.matched.is_some_and(|(_, s)| s >= t))))
        .collect();
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &dets {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some((sum / 101.0, recall.last().copied().unwrap_or(0.0)))
}

fn summarize(images: &[&ImageMatches], thresholds: &[f64]) -> (f64, f64) {
    let per: Vec<(f64, f64)> = thresholds.iter().filter_map(|&t| precision_recall(images, t)).collect();
    if per.is_empty() {
        return (-1.0, -1.0);
    }
    let n = per.len() as f64;
    (per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().map(|p| p.1).sum::<f64>() / n)
}

pub fn ap_ar(matches: &[ImageMatches], cfg: &MetricConfig) -> ApAr {
    let all: Vec<&ImageMatches> = matches.iter().collect();
    let [lo, hi] = cfg.medium_area;
    let medium: Vec<&ImageMatches> = matches.iter().filter(|m| m.bbox_area >= lo && m.bbox_area < hi).collect();
    let large: Vec<&ImageMatches> = matches.iter().filter(|m| m.bbox_area >= hi).collect();
    let (ap, ar) = summarize(&all, &cfg.ap_thresholds);
    let (ap50, ar50) = summarize(&all, &[0.5]);
    let (ap75, ar75) = summarize(&all, &[0.75]);
    let (ap_m, ar_m) = summarize(&medium, &cfg.ap_thresholds);
    let (ap_l, ar_l) = summarize(&large, &cfg.ap_thresholds);
    ApAr {
        ap,
        ap50,
        ap75,
        ap_m,
        ap_l,
        ar,
        ar50,
        ar75,
        ar_m,
        ar_l,
    }
}

/// OKS and VDS summaries for one instance set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    #[serde(rename = "OKS")]
    pub oks: ApAr,
    #[serde(rename = "VDS")]
    pub vds: ApAr,
}

pub fn evaluate(instances: &[EvalInstance], cfg: &MetricConfig) -> Result<EvalSummary, MetricError> {
    Ok(EvalSummary {
        oks: ap_ar(&match_and_score(instances, cfg, SimilarityKind::Oks)?, cfg),
        vds: ap_ar(&match_and_score(instances, cfg, SimilarityKind::Vds)?, cfg),
    })
}

/// Input perturbation for robustness sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    /// Zoom about the patch center; `> 1` crops the borders, `< 1` pads with zeros.
    Scale(f64),
    /// Zero a `(γσ+1)`-pixel square centered on every tip.
    MaskTip(u32),
    /// Same, centered on every tail.
    MaskTail(u32),
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Scale(s) => write!(f, "scale:{s}"),
            Perturbation::MaskTip(g) => write!(f, "mask_tip:{g}"),
            Perturbation::MaskTail(g) => write!(f, "mask_tail:{g}"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MetricError::Perturbation(s.to_string());
        let (mode, param) = s.split_once(':').ok_or_else(bad)?;
        let p = match mode {
            "scale" => {
                let v: f64 = param.parse().map_err(|_| bad())?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(bad());
                }
                Perturbation::Scale(v)
            }
            "mask_tip" => Perturbation::MaskTip(param.parse().map_err(|_| bad())?),
            "mask_tail" => Perturbation::MaskTail(param.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        if matches!(p, Perturbation::MaskTip(0) | Perturbation::MaskTail(0)) {
            return Err(bad());
        }
        Ok(p)
    }
}

/// Zero a `side × side` pixel square centered at `c`.
fn zero_square(img: &mut PlanarImage, c: geom::Point, side: f64) {
    let (w, h) = (img.width, img.height);
    let range = |center: f64, n: usize| {
        let lo = (center - side / 2.0).ceil().max(0.0) as usize;
        let hi = ((center + side / 2.0).ceil().max(0.0) as usize).min(n);
        lo..hi
    };
    for ch in 0..3 {
        for y in range(c[1], h) {
            for x in range(c[0], w) {
                img.data[(ch * h + y) * w + x] = 0.0;
            }
        }
    }
}

/// Apply a perturbation. Returns the new patch and the map taking original
/// patch coordinates to perturbed ones (identity for masks).
pub fn perturb_input(
    patch: &PlanarImage,
    p: Perturbation,
    annotations: &[PointerAnnotation],
    sigma: f64,
) -> Result<(PlanarImage, Affine2), MetricError> {
    match p {
        Perturbation::Scale(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(MetricError::Perturbation(p.to_string()));
            }
            let c = [(patch.width as f64 - 1.0) / 2.0, (patch.height as f64 - 1.0) / 2.0];
            let fwd = Affine2::similarity(s, 0.0, c);
            let inv = fwd.inverse().expect("positive scale");
            let (w, h) = (patch.width as f64, patch.height as f64);
            let data = geom::warp_planar(&patch.data, 3, patch.width, patch.height, patch.width, patch.height, &inv, |q| {
                q[0] >= -0.5 && q[1] >= -0.5 && q[0] <= w - 0.5 && q[1] <= h - 0.5
            });
            Ok((
                PlanarImage {
                    width: patch.width,
                    height: patch.height,
                    data,
                },
                fwd,
            ))
        }
        Perturbation::MaskTip(g) | Perturbation::MaskTail(g) => {
            let side = g as f64 * sigma + 1.0;
            let mut out = patch.clone();
            for a in annotations {
                let c = if matches!(p, Perturbation::MaskTip(_)) { a.tip } else { a.tail };
                zero_square(&mut out, c, side);
            }
            Ok((out, Affine2::identity()))
        }
    }
}
