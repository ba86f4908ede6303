//! Datasets of rendered dials and the meter patches cut from them.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::geom::{Affine2, BBox};
use crate::pipeline::{MeterTemplate, PipelineError, TemplateFile};
use crate::synth::{self, AnnotationSet, ImageAnnotation, MeterAnnotation, Split, SynthError, SynthRanges};
use crate::targets::{self, GroundTruthVector, PlanarImage, PointerAnnotation, TargetError};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const TEMPLATES_FILE: &str = "templates.json";
pub const SPLIT_FILE: &str = "split.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image {file}: {message}")]
    Image { file: String, message: String },
    #[error("image {id}, meter {meter}: {source}")]
    Target {
        id: u64,
        meter: usize,
        #[source]
        source: TargetError,
    },
    #[error("image {id}, meter {meter}: unknown template {template:?}")]
    MissingTemplate { id: u64, meter: usize, template: Option<String> },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Images with COCO-style annotations and the templates their meters refer to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<RgbImage>,
    pub annotations: AnnotationSet,
    pub templates: Vec<MeterTemplate>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Render `count` random dials. Dial `i` depends only on `(seed, i)`.
    pub fn generate(count: usize, seed: u64, ranges: &SynthRanges, mode: ExecMode) -> Result<Self, DataError> {
        let rendered = exec::map_indexed(mode, count, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(exec::derive_seed(seed, &[i as u64]));
            synth::render_dial(&synth::sample_spec(&mut rng, ranges))
        });
        let mut images = Vec::with_capacity(count);
        let mut anns = Vec::with_capacity(count);
        let mut templates = Vec::with_capacity(count);
        for (i, r) in rendered.into_iter().enumerate() {
            let r = r?;
            let tid = format!("dial-{i:06}");
            let (w, h) = r.image.dimensions();
            let mut meter = r.meter;
            meter.template_id = Some(tid.clone());
            let mut template = r.template;
            template.id = tid;
            anns.push(ImageAnnotation {
                id: i as u64,
                file_name: format!("{i:06}.png"),
                width: w as usize,
                height: h as usize,
                hard: r.hard,
                meters: vec![meter],
            });
            images.push(r.image);
            templates.push(template);
        }
        Ok(Self {
            images,
            annotations: AnnotationSet { images: anns },
            templates,
        })
    }

    /// Keep the images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            annotations: AnnotationSet {
                images: indices.iter().map(|&i| self.annotations.images[i].clone()).collect(),
            },
            templates: self.templates.clone(),
        }
    }

    pub fn template(&self, id: Option<&str>) -> Option<&MeterTemplate> {
        let id = id?;
        self.templates.iter().find(|t| t.id == id)
    }

    /// Write `images/`, the annotation file and the template file under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let img_dir = dir.join(IMAGES_DIR);
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        for (img, ann) in self.images.iter().zip(&self.annotations.images) {
            let p = img_dir.join(&ann.file_name);
            img.save(&p).map_err(|e| DataError::Image {
                file: p.display().to_string(),
                message: e.to_string(),
            })?;
        }
        synth::write_annotations(&self.annotations, &dir.join(ANNOTATIONS_FILE))?;
        TemplateFile::new(self.templates.clone()).save(&dir.join(TEMPLATES_FILE))?;
        Ok(())
    }

    /// Load a directory written by [`Dataset::save`]. The template file is optional.
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let annotations = synth::read_annotations(&dir.join(ANNOTATIONS_FILE))?;
        let tpath = dir.join(TEMPLATES_FILE);
        let templates = if tpath.exists() {
            TemplateFile::load(&tpath)?.templates
        } else {
            Vec::new()
        };
        let images = annotations
            .images
            .iter()
            .map(|a| load_rgb(&dir.join(IMAGES_DIR).join(&a.file_name)))
            .collect::<Result<Vec<_>, _>>()?;
        for (img, a) in images.iter().zip(&annotations.images) {
            if img.dimensions() != (a.width as u32, a.height as u32) {
                return Err(DataError::Image {
                    file: a.file_name.clone(),
                    message: format!("size {:?} does not match annotation {}x{}", img.dimensions(), a.width, a.height),
                });
            }
        }
        Ok(Self {
            images,
            annotations,
            templates,
        })
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, DataError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| DataError::Image {
            file: path.display().to_string(),
            message: e.to_string(),
        })
}

pub fn save_split(split: &Split, path: &Path) -> Result<(), DataError> {
    fs::write(path, serde_json::to_string_pretty(split)?).map_err(io_err(path))
}

pub fn load_split(path: &Path) -> Result<Split, DataError> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&s)?)
}

/// One meter cut out of its image at network input size. Pixels are kept as
/// 8-bit planar RGB to bound memory on large sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub image_id: u64,
    pub meter_index: usize,
    pub size: usize,
    pixels: Vec<u8>,
    /// Pointers in patch pixels.
    pub pointers: Vec<PointerAnnotation>,
    pub meter: MeterAnnotation,
    pub patch_to_image: Affine2,
    /// Longer side of the source image.
    pub image_side: f64,
    pub hard: bool,
}

impl PatchSample {
    /// A square patch that is its own source image.
    pub fn standalone(image_id: u64, patch: &PlanarImage, pointers: Vec<PointerAnnotation>) -> Self {
        assert_eq!(patch.width, patch.height, "patches are square");
        let n = patch.width as f64;
        Self {
            image_id,
            meter_index: 0,
            size: patch.width,
            pixels: quantize(patch),
            meter: MeterAnnotation {
                bbox: BBox::new(-0.5, -0.5, n, n),
                pointers: pointers
                    .iter()
                    .map(|a| synth::PointerLabel {
                        tip: a.tip,
                        tail: a.tail,
                        visibility: [2, 2, 2],
                        value: None,
                        out_of_range: false,
                    })
                    .collect(),
                scale_points: Vec::new(),
                scale_values: Vec::new(),
                template_id: None,
            },
            pointers,
            patch_to_image: Affine2::identity(),
            image_side: n,
            hard: false,
        }
    }

    pub fn image(&self) -> PlanarImage {
        PlanarImage {
            width: self.size,
            height: self.size,
            data: self.pixels.iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    pub fn bbox(&self) -> BBox {
        self.meter.bbox
    }

    /// Groundtruth vectors in source-image pixels.
    pub fn gt_image(&self) -> Vec<GroundTruthVector> {
        self.meter
            .pointers
            .iter()
            .filter_map(|p| PointerAnnotation::new(p.tip, p.tail).ok()?.to_vector().ok())
            .collect()
    }
}

fn quantize(img: &PlanarImage) -> Vec<u8> {
    img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Crop every meter of one image.
pub fn patches_from_image(img: &RgbImage, ann: &ImageAnnotation, size: usize) -> Result<Vec<PatchSample>, DataError> {
    let planar = PlanarImage::from_rgb8(img);
    ann.meters
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let wrap = |source| DataError::Target {
                id: ann.id,
                meter: k,
                source,
            };
            let (patch, to_image) = targets::crop_patch(&planar, m.bbox, size).map_err(wrap)?;
            let to_patch = to_image.inverse().expect("crop scale is positive");
            let pointers = m
                .pointers
                .iter()
                .map(|p| PointerAnnotation::new(p.tip, p.tail).map(|a| a.transformed(&to_patch)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(wrap)?;
            Ok(PatchSample {
                image_id: ann.id,
                meter_index: k,
                size,
                pixels: quantize(&patch),
                pointers,
                meter: m.clone(),
                patch_to_image: to_image,
                image_side: ann.width.max(ann.height) as f64,
                hard: ann.hard,
            })
        })
        .collect()
}

/// Crop every meter of every image, in image order.
pub fn build_patches(ds: &Dataset, size: usize, mode: ExecMode) -> Result<Vec<PatchSample>, DataError> {
    let per_image = exec::map_indexed(mode, ds.len(), |i| {
        patches_from_image(&ds.images[i], &ds.annotations.images[i], size)
    });
    let mut out = Vec::new();
    for p in per_image {
        out.extend(p?);
    }
    Ok(out)
}

/// Templates keyed by id, checking each meter's reference resolves.
pub fn template_index<'a>(ds: &'a Dataset) -> Result<HashMap<&'a str, &'a MeterTemplate>, DataError> {
    let map: HashMap<&str, &MeterTemplate> = ds.templates.iter().map(|t| (t.id.as_str(), t)).collect();
    for a in &ds.annotations.images {
        for (k, m) in a.meters.iter().enumerate() {
            if !m.template_id.as_deref().is_some_and(|id| map.contains_key(id)) {
                return Err(DataError::MissingTemplate {
                    id: a.id,
                    meter: k,
                    template: m.template_id.clone(),
                });
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom;

    #[test]
    fn generation_is_seeded_per_index() {
        let r = SynthRanges::default();
        let a = Dataset::generate(4, 3, &r, ExecMode::Parallel).unwrap();
        let b = Dataset::generate(4, 3, &r, ExecMode::Sequential).unwrap();
        assert_eq!(a.annotations, b.annotations);
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.as_raw() == y.as_raw()));
        let c = Dataset::generate(2, 3, &r, ExecMode::Sequential).unwrap();
        assert_eq!(c.annotations.images[..], a.annotations.images[..2]);
        assert!(template_index(&a).is_ok());
    }

    #[test]
    fn patch_pointers_map_back_to_image() {
        let ds = Dataset::generate(6, 11, &SynthRanges::default(), ExecMode::Sequential).unwrap();
        let patches = build_patches(&ds, 64, ExecMode::Parallel).unwrap();
        assert_eq!(patches.len(), 6);
        for p in &patches {
            for (a, l) in p.pointers.iter().zip(&p.meter.pointers) {
                assert!(geom::dist(p.patch_to_image.apply(a.tip), l.tip) < 1e-9);
                assert!(geom::dist(p.patch_to_image.apply(a.tail), l.tail) < 1e-9);
            }
            assert_eq!(p.image().data.len(), 3 * 64 * 64);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ds = Dataset::generate(3, 5, &SynthRanges::default(), ExecMode::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.annotations, ds.annotations);
        assert_eq!(back.templates, ds.templates);
        assert!(back.images.iter().zip(&ds.images).all(|(x, y)| x.as_raw() == y.as_raw()));
    }

    #[test]
    fn missing_template_is_reported() {
        let mut ds = Dataset::generate(1, 5, &SynthRanges::default(), ExecMode::Sequential).unwrap();
        ds.templates.clear();
        assert!(matches!(template_index(&ds), Err(DataError::MissingTemplate { .. })));
    }
}
