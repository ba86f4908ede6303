use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::json;

use vecgauge::data::{self, Dataset, PatchSample};
use vecgauge::decode::VectorDetection;
use vecgauge::eval::{self, EvalReport};
use vecgauge::geom::{BBox, Point};
use vecgauge::gradcheck;
use vecgauge::metrics::Perturbation;
use vecgauge::model::VdnModel;
use vecgauge::pipeline::{self, CombineReadings, Homography, IndependentDials, MeterTemplate, Reading, TemplateFile};
use vecgauge::synth::{self, ImageAnnotation, MeterAnnotation};
use vecgauge::train::{self, TrainError, TrainOutput};

use crate::config::{RunConfig, SplitName};
use crate::overlay;
use crate::CliError;

fn data_err(e: impl Display) -> CliError {
    CliError::Data(e.to_string())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| data_err(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(data_err)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| data_err(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn manifest(command: &str, cfg: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg,
        "args": extra,
    })
}

fn load_model(path: &Path) -> Result<VdnModel, CliError> {
    VdnModel::load(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn patch_size(model: &VdnModel) -> Result<usize, CliError> {
    let [w, h] = model.config().input_size;
    if w != h {
        return Err(CliError::Usage(format!("model input must be square, got {w}x{h}")));
    }
    Ok(w)
}

fn select_split(ds: &Dataset, dir: &Path, split: SplitName) -> Result<Dataset, CliError> {
    let path = dir.join(data::SPLIT_FILE);
    if split == SplitName::All {
        return Ok(ds.clone());
    }
    if !path.exists() {
        eprintln!("note: {} not found, using every image", path.display());
        return Ok(ds.clone());
    }
    let s = data::load_split(&path).map_err(data_err)?;
    let idx = match split {
        SplitName::Train => s.train,
        SplitName::Val => s.val,
        SplitName::Test => s.test,
        SplitName::All => unreachable!(),
    };
    if let Some(&bad) = idx.iter().find(|&&i| i >= ds.len()) {
        return Err(data_err(format!("split index {bad} out of range for {} images", ds.len())));
    }
    Ok(ds.subset(&idx))
}

pub fn render_dataset(config: Option<&Path>, out: &Path, count: usize, seed: u64) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    cfg.data.synth.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = Dataset::generate(count, seed, &cfg.data.synth, cfg.pipeline.exec).map_err(data_err)?;
    let hard: Vec<bool> = ds.annotations.images.iter().map(|a| a.hard).collect();
    let split = synth::split_dataset(&hard, cfg.data.split_ratios, seed, cfg.data.hard_quota).map_err(|e| CliError::Usage(e.to_string()))?;
    ds.save(out).map_err(data_err)?;
    data::save_split(&split, &out.join(data::SPLIT_FILE)).map_err(data_err)?;
    write_json(&out.join("run.json"), &manifest("render-dataset", &cfg, json!({"count": count, "seed": seed})))?;
    eprintln!(
        "rendered {count} images ({} hard): train {}, val {}, test {}",
        hard.iter().filter(|&&h| h).count(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

pub fn train(config: Option<&Path>, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let model = VdnModel::new(cfg.model.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let size = patch_size(&model)?;
    let ds = Dataset::load(data_dir).map_err(data_err)?;
    let ds = select_split(&ds, data_dir, cfg.data.train_split)?;
    let samples = data::build_patches(&ds, size, cfg.train.exec).map_err(data_err)?;
    let hash = cfg.hash();
    let output = TrainOutput {
        dir: Some(out.to_path_buf()),
        meta: Some(json!({ "config_hash": hash })),
    };
    let epochs = cfg.train.epochs;
    let result = train::train(model, &samples, &cfg.train, &output, |r| {
        eprintln!(
            "epoch {:>3}/{epochs}  loss {:.6}  l_H {:.6}  l_V {:.6}  lr {:e}  {:.1}s",
            r.epoch + 1,
            r.loss,
            r.loss_heatmap,
            r.loss_scalarmap,
            r.lr,
            r.wall_time_s
        )
    });
    match result {
        Ok(_) => {}
        Err(e @ TrainError::NonFinite { .. }) => return Err(CliError::Numeric(e.to_string())),
        Err(e @ TrainError::Config(_)) => return Err(CliError::Usage(e.to_string())),
        Err(e) => return Err(data_err(e)),
    }
    write_json(
        &out.join("run.json"),
        &manifest("train", &cfg, json!({"data": data_dir, "samples": samples.len()})),
    )
}

/// Images with meter boxes: a dataset directory, or bare PNGs where each
/// whole image is one meter.
struct Inputs {
    images: Vec<RgbImage>,
    annotations: Vec<ImageAnnotation>,
}

fn load_inputs(dir: &Path) -> Result<Inputs, CliError> {
    if dir.join(data::ANNOTATIONS_FILE).exists() {
        let ds = Dataset::load(dir).map_err(data_err)?;
        return Ok(Inputs {
            images: ds.images,
            annotations: ds.annotations.images,
        });
    }
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| data_err(format!("{}: {e}", dir.display())))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(data_err(format!("{}: no PNG images or {}", dir.display(), data::ANNOTATIONS_FILE)));
    }
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let img = data::load_rgb(f).map_err(data_err)?;
        let (w, h) = img.dimensions();
        annotations.push(ImageAnnotation {
            id: i as u64,
            file_name: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            width: w as usize,
            height: h as usize,
            hard: false,
            meters: vec![MeterAnnotation {
                bbox: BBox::new(0.0, 0.0, w as f64, h as f64),
                pointers: Vec::new(),
                scale_points: Vec::new(),
                scale_values: Vec::new(),
                template_id: None,
            }],
        });
        images.push(img);
    }
    Ok(Inputs { images, annotations })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MeterDetections {
    meter: usize,
    bbox: BBox,
    template_id: Option<String>,
    detections: Vec<VectorDetection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageDetections {
    file_name: String,
    meters: Vec<MeterDetections>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectionsFile {
    config_hash: String,
    checkpoint: String,
    images: Vec<ImageDetections>,
}

/// Detections in image pixels, per image then per meter.
fn run_detection(cfg: &RunConfig, model: &VdnModel, inputs: &Inputs) -> Result<Vec<Vec<(PatchSample, Vec<VectorDetection>)>>, CliError> {
    let size = patch_size(model)?;
    let mut per_image = Vec::with_capacity(inputs.images.len());
    for (img, ann) in inputs.images.iter().zip(&inputs.annotations) {
        per_image.push(data::patches_from_image(img, ann, size).map_err(data_err)?);
    }
    let patches: Vec<_> = per_image.iter().flatten().map(PatchSample::image).collect();
    let ecfg = cfg.eval_config();
    let raw = eval::detect_patches(model, &patches, &ecfg.decode, ecfg.batch_size, ecfg.exec).map_err(data_err)?;
    let mut raw = raw.into_iter();
    Ok(per_image
        .into_iter()
        .map(|samples| {
            samples
                .into_iter()
                .map(|s| {
                    let d = eval::transform_detections(&raw.next().expect("one list per patch"), &s.patch_to_image);
                    (s, d)
                })
                .collect()
        })
        .collect())
}

fn write_overlays(dir: &Path, inputs: &Inputs, results: &[Vec<(PatchSample, Vec<VectorDetection>)>]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    for ((img, ann), meters) in inputs.images.iter().zip(&inputs.annotations).zip(results) {
        let boxes: Vec<(BBox, &[VectorDetection])> = meters.iter().map(|(s, d)| (s.bbox(), d.as_slice())).collect();
        let p = dir.join(&ann.file_name).with_extension("png");
        overlay::draw(img, &boxes).save(&p).map_err(|e| data_err(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

pub fn detect(config: Option<&Path>, ckpt: &Path, images: &Path, out: &Path, overlays: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let model = load_model(ckpt)?;
    let inputs = load_inputs(images)?;
    let results = run_detection(&cfg, &model, &inputs)?;
    let file = DetectionsFile {
        config_hash: cfg.hash(),
        checkpoint: ckpt.display().to_string(),
        images: inputs
            .annotations
            .iter()
            .zip(&results)
            .map(|(a, meters)| ImageDetections {
                file_name: a.file_name.clone(),
                meters: meters
                    .iter()
                    .map(|(s, d)| MeterDetections {
                        meter: s.meter_index,
                        bbox: s.bbox(),
                        template_id: s.meter.template_id.clone(),
                        detections: d.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    if let Some(dir) = overlays {
        write_overlays(dir, &inputs, &results)?;
    }
    write_json(out, &file)?;
    let n: usize = results.iter().flatten().map(|m| m.1.len()).sum();
    eprintln!("{n} pointers in {} images", inputs.images.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DialValue {
    dial: usize,
    value: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MeterReadings {
    meter: usize,
    bbox: BBox,
    template_id: String,
    homography: Homography,
    detections: Vec<VectorDetection>,
    readings: Vec<Reading>,
    dials: Vec<DialValue>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageReadings {
    file_name: String,
    meters: Vec<MeterReadings>,
}

/// Template for each meter of one image: by id when the annotation names
/// one, otherwise by minimum-distance assignment of box centers.
fn match_templates<'a>(meters: &[&PatchSample], templates: &'a [MeterTemplate]) -> Vec<Option<&'a MeterTemplate>> {
    let by_id: HashMap<&str, &MeterTemplate> = templates.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut out: Vec<Option<&MeterTemplate>> = meters
        .iter()
        .map(|s| s.meter.template_id.as_deref().and_then(|id| by_id.get(id).copied()))
        .collect();
    let open: Vec<usize> = (0..meters.len()).filter(|&i| out[i].is_none()).collect();
    let centers: Vec<Point> = open.iter().map(|&i| meters[i].bbox().center()).collect();
    let tcenters: Vec<Point> = templates.iter().map(|t| t.bbox.center()).collect();
    for (k, t) in pipeline::assign_boxes(&centers, &tcenters).pairs {
        out[open[k]] = Some(&templates[t]);
    }
    out
}

pub fn read(
    config: Option<&Path>,
    ckpt: &Path,
    images: &Path,
    templates: &Path,
    out: &Path,
    overlays: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let model = load_model(ckpt)?;
    let tfile = TemplateFile::load(templates).map_err(data_err)?;
    if tfile.templates.is_empty() {
        return Err(data_err(format!("{}: no templates", templates.display())));
    }
    for t in &tfile.templates {
        t.validate().map_err(|e| data_err(format!("template {:?}: {e}", t.id)))?;
    }
    let inputs = load_inputs(images)?;
    let results = run_detection(&cfg, &model, &inputs)?;
    let mut out_images = Vec::with_capacity(results.len());
    for (ann, meters) in inputs.annotations.iter().zip(&results) {
        let samples: Vec<&PatchSample> = meters.iter().map(|m| &m.0).collect();
        let chosen = match_templates(&samples, &tfile.templates);
        let mut out_meters = Vec::new();
        for ((s, dets), t) in meters.iter().zip(chosen) {
            let Some(t) = t else {
                eprintln!("note: {} meter {}: no template left to assign", ann.file_name, s.meter_index);
                continue;
            };
            let h = eval::meter_homography(t, &s.meter.scale_points, &s.bbox()).map_err(data_err)?;
            let readings = pipeline::read_meter(dets, t, &h).map_err(data_err)?;
            let dials = IndependentDials
                .combine(dets, &readings)
                .into_iter()
                .map(|(dial, value)| DialValue { dial, value })
                .collect();
            out_meters.push(MeterReadings {
                meter: s.meter_index,
                bbox: s.bbox(),
                template_id: t.id.clone(),
                homography: h,
                detections: dets.clone(),
                readings,
                dials,
            });
        }
        out_images.push(ImageReadings {
            file_name: ann.file_name.clone(),
            meters: out_meters,
        });
    }
    if let Some(dir) = overlays {
        write_overlays(dir, &inputs, &results)?;
    }
    write_json(
        out,
        &json!({
            "config_hash": cfg.hash(),
            "checkpoint": ckpt.display().to_string(),
            "templates": templates.display().to_string(),
            "images": out_images,
        }),
    )
}

#[derive(Debug, Serialize)]
struct EvaluateFile {
    config_hash: String,
    checkpoint: Option<String>,
    detections: Option<String>,
    split: SplitName,
    reports: Vec<EvalReport>,
}

pub fn evaluate(
    config: Option<&Path>,
    ckpt: Option<&Path>,
    detections: Option<&Path>,
    data_dir: &Path,
    perturb: &[String],
    out: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let perturbations = perturb
        .iter()
        .map(|p| p.parse::<Perturbation>().map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let ecfg = cfg.eval_config();
    let ds = Dataset::load(data_dir).map_err(data_err)?;
    let ds = select_split(&ds, data_dir, cfg.data.eval_split)?;
    let templates = (!ds.templates.is_empty()).then_some(ds.templates.as_slice());
    let reports = match (ckpt, detections) {
        (Some(ckpt), _) => {
            let model = load_model(ckpt)?;
            let samples = data::build_patches(&ds, patch_size(&model)?, ecfg.exec).map_err(data_err)?;
            std::iter::once(None)
                .chain(perturbations.iter().copied().map(Some))
                .map(|p| eval::evaluate_samples(&model, &samples, templates, &ecfg, p).map(|o| o.report))
                .collect::<Result<Vec<_>, _>>()
                .map_err(data_err)?
        }
        (None, Some(path)) => {
            if !perturbations.is_empty() {
                return Err(CliError::Usage("--perturb needs --ckpt".into()));
            }
            let text = fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
            let file: DetectionsFile = serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
            let mut by_key: HashMap<(&str, usize), &Vec<VectorDetection>> = HashMap::new();
            for img in &file.images {
                for m in &img.meters {
                    by_key.insert((img.file_name.as_str(), m.meter), &m.detections);
                }
            }
            // patch size only matters for the pixels, which are not used here
            let samples = data::build_patches(&ds, 8, ecfg.exec).map_err(data_err)?;
            let names: HashMap<u64, &str> = ds.annotations.images.iter().map(|a| (a.id, a.file_name.as_str())).collect();
            let dets = samples
                .iter()
                .map(|s| {
                    by_key
                        .get(&(names[&s.image_id], s.meter_index))
                        .map(|d| (*d).clone())
                        .unwrap_or_default()
                })
                .collect();
            vec![eval::score_detections(&samples, dets, templates, &ecfg, None).map_err(data_err)?.report]
        }
        (None, None) => return Err(CliError::Usage("one of --ckpt or --detections is required".into())),
    };
    for r in &reports {
        eprintln!(
            "{:<14} OKS AP {:.3} AP50 {:.3} | VDS AP {:.3} AP50 {:.3} | median reading error {}",
            r.perturbation.as_deref().unwrap_or("clean"),
            r.oks.ap,
            r.oks.ap50,
            r.vds.ap,
            r.vds.ap50,
            r.reading
                .as_ref()
                .and_then(|s| s.median_error)
                .map_or("n/a".to_string(), |e| format!("{:.2}%", 100.0 * e))
        );
    }
    write_json(
        out,
        &EvaluateFile {
            config_hash: cfg.hash(),
            checkpoint: ckpt.map(|p| p.display().to_string()),
            detections: detections.map(|p| p.display().to_string()),
            split: cfg.data.eval_split,
            reports,
        },
    )
}

pub fn gradcheck(config: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let rows = gradcheck::run_suite(cfg.train.seed).map_err(|e| CliError::Numeric(e.to_string()))?;
    println!("{:<28} {:>12} {:>10} {:>8}  result", "check", "max rel err", "tolerance", "entries");
    for r in &rows {
        println!(
            "{:<28} {:>12.3e} {:>10.0e} {:>8}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    if let Some(path) = out {
        write_json(path, &json!({ "config_hash": cfg.hash(), "checks": rows }))?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}
