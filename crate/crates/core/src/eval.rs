//! End-to-end evaluation: detect on meter patches, score detections in
//! image pixels, and read values through the template geometry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PatchSample;
use crate::decode::{self, DecodeConfig, DecodeError, VectorDetection};
use crate::exec::{self, ExecMode};
use crate::geom::{self, Affine2, BBox, Point};
use crate::metrics::{self, ApAr, EvalInstance, MetricConfig, MetricError, Perturbation};
use crate::model::{ModelError, VdnModel};
use crate::pipeline::{self, Homography, MeterTemplate, PipelineError, Reading};
use crate::targets::PlanarImage;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("patch is {got}px, model expects {expected}px")]
    PatchSize { expected: usize, got: usize },
    #[error("{detections} detection lists for {samples} samples")]
    Count { samples: usize, detections: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub metrics: MetricConfig,
    /// Unit of the tip/tail mask side `γσ+1`, in patch pixels.
    pub mask_sigma: f64,
    /// Patches per forward pass.
    pub batch_size: usize,
    pub exec: ExecMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            metrics: MetricConfig::default(),
            mask_sigma: 3.0,
            batch_size: 16,
            exec: ExecMode::default(),
        }
    }
}

/// Run the model on patches and decode each, in patch pixels.
pub fn detect_patches(
    model: &VdnModel,
    patches: &[PlanarImage],
    cfg: &DecodeConfig,
    batch_size: usize,
    mode: ExecMode,
) -> Result<Vec<Vec<VectorDetection>>, EvalError> {
    cfg.validate()?;
    let [w, h] = model.config().input_size;
    let lambda = model.config().lambda;
    let [mw, mh] = model.config().map_size();
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * w * h);
        for p in chunk {
            if p.width != w || p.height != h {
                return Err(EvalError::PatchSize {
                    expected: w,
                    got: p.width,
                });
            }
            data.extend_from_slice(&p.data);
        }
        let input = Tensor::new(vec![chunk.len(), 3, h, w], data).map_err(ModelError::from)?;
        let (hh, vh) = model.forward(mode, &input)?;
        let plane = mw * mh;
        out.extend(exec::map_indexed(mode, chunk.len(), |i| {
            let heat = &hh.data()[i * plane..(i + 1) * plane];
            let scalar = &vh.data()[2 * i * plane..2 * (i + 1) * plane];
            decode::decode_maps(heat, scalar, mw, mh, lambda, cfg)
        }));
    }
    Ok(out)
}

/// Carry detections through an affine map; directions are renormalized.
pub fn transform_detections(dets: &[VectorDetection], t: &Affine2) -> Vec<VectorDetection> {
    dets.iter()
        .map(|d| {
            let [x, y] = t.apply(d.tip());
            let v = t.apply_vector(d.direction());
            let n = geom::norm(v);
            let (alpha, beta) = if n > 0.0 { (v[0] / n, v[1] / n) } else { (0.0, 0.0) };
            VectorDetection {
                x,
                y,
                alpha,
                beta,
                ..*d
            }
        })
        .collect()
}

/// Template-to-image homography for one meter: from labeled scale points
/// when the annotation has them, otherwise from the bounding box corners.
pub fn meter_homography(template: &MeterTemplate, scale_points: &[Point], bbox: &BBox) -> Result<Homography, PipelineError> {
    let pairs: Vec<(Point, Point)> = if scale_points.len() == template.scale_points.len() && scale_points.len() >= 4 {
        template.scale_points.iter().copied().zip(scale_points.iter().copied()).collect()
    } else {
        let corners = |b: &BBox| {
            let (x0, y0, x1, y1) = b.span();
            [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
        };
        corners(&template.bbox).into_iter().zip(corners(bbox)).collect()
    };
    Ok(pipeline::estimate_homography(&pairs)?.0)
}

/// Reading of one groundtruth pointer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointerReading {
    pub image_id: u64,
    pub meter: usize,
    pub pointer: usize,
    pub truth: f64,
    pub value: Option<f64>,
    /// `|value − truth| / full scale`; 1 when the pointer was missed or not read.
    pub error: f64,
}

/// Read every in-range labeled pointer of a meter. Detections (image
/// pixels) are paired with labeled tips by minimum total tip distance.
pub fn read_sample(
    sample: &PatchSample,
    template: &MeterTemplate,
    detections: &[VectorDetection],
) -> Result<Vec<PointerReading>, PipelineError> {
    let h = meter_homography(template, &sample.meter.scale_points, &sample.meter.bbox)?;
    let readings = pipeline::read_meter(detections, template, &h)?;
    let full = (template.scale_values[template.scale_values.len() - 1] - template.scale_values[0]).abs();
    let gt: Vec<(usize, f64, Point)> = sample
        .meter
        .pointers
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.out_of_range)
        .filter_map(|(k, p)| p.value.map(|v| (k, v, p.tip)))
        .collect();
    let tips: Vec<Point> = gt.iter().map(|g| g.2).collect();
    let det_tips: Vec<Point> = detections.iter().map(VectorDetection::tip).collect();
    let assign = pipeline::assign_boxes(&det_tips, &tips);
    Ok(gt
        .iter()
        .enumerate()
        .map(|(gi, &(k, truth, _))| {
            let value = assign
                .pairs
                .iter()
                .find(|p| p.1 == gi)
                .and_then(|&(di, _)| readings.iter().find(|r| matches!(r, Reading::Read { pointer, .. } if *pointer == di)))
                .and_then(Reading::value);
            let error = value.map_or(1.0, |v| ((v - truth).abs() / full).min(1.0));
            PointerReading {
                image_id: sample.image_id,
                meter: sample.meter_index,
                pointer: k,
                truth,
                value,
                error,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingStats {
    pub pointers: usize,
    pub read: usize,
    /// Fractions of full scale.
    pub median_error: Option<f64>,
    pub mean_error: Option<f64>,
    pub within_5pct: Option<f64>,
}

impl ReadingStats {
    pub fn from_readings(readings: &[PointerReading]) -> Self {
        let mut errs: Vec<f64> = readings.iter().map(|r| r.error).collect();
        errs.sort_by(f64::total_cmp);
        let n = errs.len();
        let median = match n {
            0 => None,
            _ if n % 2 == 1 => Some(errs[n / 2]),
            _ => Some(0.5 * (errs[n / 2 - 1] + errs[n / 2])),
        };
        let frac = |f: f64| (n > 0).then(|| f / n as f64);
        Self {
            pointers: n,
            read: readings.iter().filter(|r| r.value.is_some()).count(),
            median_error: median,
            mean_error: frac(errs.iter().sum()),
            within_5pct: frac(errs.iter().filter(|&&e| e <= 0.05).count() as f64),
        }
    }
}

/// Scores for one evaluation setting. Metric columns keep their table names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perturbation: Option<String>,
    pub patches: usize,
    pub gt_pointers: usize,
    pub detections: usize,
    #[serde(rename = "OKS")]
    pub oks: ApAr,
    #[serde(rename = "VDS")]
    pub vds: ApAr,
    pub reading: Option<ReadingStats>,
}

/// Everything produced by one evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Per patch, in image pixels.
    pub detections: Vec<Vec<VectorDetection>>,
    pub readings: Vec<PointerReading>,
}

/// Evaluate `model` on `samples`, optionally perturbing each input patch.
/// Readings are computed when `templates` resolves every sample's template.
pub fn evaluate_samples(
    model: &VdnModel,
    samples: &[PatchSample],
    templates: Option<&[MeterTemplate]>,
    cfg: &EvalConfig,
    perturbation: Option<Perturbation>,
) -> Result<EvalOutcome, EvalError> {
    cfg.metrics.validate()?;
    let prepared = exec::map_slice(cfg.exec, samples, |s| {
        let img = s.image();
        match perturbation {
            Some(p) => {
                let (out, fwd) = metrics::perturb_input(&img, p, &s.pointers, cfg.mask_sigma)?;
                let back = fwd.inverse().ok_or_else(|| MetricError::Perturbation(p.to_string()))?;
                Ok((out, s.patch_to_image.then_after(&back)))
            }
            None => Ok((img, s.patch_to_image)),
        }
    });
    let (patches, to_image): (Vec<PlanarImage>, Vec<Affine2>) =
        prepared.into_iter().collect::<Result<Vec<_>, MetricError>>()?.into_iter().unzip();
    let raw = detect_patches(model, &patches, &cfg.decode, cfg.batch_size, cfg.exec)?;
    let detections: Vec<Vec<VectorDetection>> = raw.iter().zip(&to_image).map(|(d, t)| transform_detections(d, t)).collect();
    score_detections(samples, detections, templates, cfg, perturbation.map(|p| p.to_string()))
}

/// Score given detections (image pixels, one list per sample).
pub fn score_detections(
    samples: &[PatchSample],
    detections: Vec<Vec<VectorDetection>>,
    templates: Option<&[MeterTemplate]>,
    cfg: &EvalConfig,
    label: Option<String>,
) -> Result<EvalOutcome, EvalError> {
    cfg.metrics.validate()?;
    if detections.len() != samples.len() {
        return Err(EvalError::Count {
            samples: samples.len(),
            detections: detections.len(),
        });
    }
    let instances: Vec<EvalInstance> = samples
        .iter()
        .zip(&detections)
        .map(|(s, d)| EvalInstance {
            gt: s.gt_image(),
            det: d.clone(),
            bbox_area: s.bbox().area(),
            patch_side: s.image_side,
        })
        .collect();
    let summary = metrics::evaluate(&instances, &cfg.metrics)?;

    let mut readings = Vec::new();
    let mut reading = None;
    if let Some(templates) = templates {
        let found: Option<Vec<&MeterTemplate>> = samples
            .iter()
            .map(|s| {
                let id = s.meter.template_id.as_deref()?;
                templates.iter().find(|t| t.id == id)
            })
            .collect();
        if let Some(found) = found {
            let per = exec::map_indexed(cfg.exec, samples.len(), |i| read_sample(&samples[i], found[i], &detections[i]));
            for r in per {
                readings.extend(r?);
            }
            reading = Some(ReadingStats::from_readings(&readings));
        }
    }

    Ok(EvalOutcome {
        report: EvalReport {
            perturbation: label,
            patches: samples.len(),
            gt_pointers: instances.iter().map(|i| i.gt.len()).sum(),
            detections: detections.iter().map(Vec::len).sum(),
            oks: summary.oks,
            vds: summary.vds,
            reading,
        },
        detections,
        readings,
    })
}
