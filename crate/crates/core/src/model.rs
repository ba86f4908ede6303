//! The vector detection network: a stride-2 convolutional encoder, a stack of
//! ×2 transposed convolutions, and two 1×1 heads producing the tip heatmap
//! and the tanh-bounded two-channel direction map.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::ExecMode;
use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_VERSION: &str = "vdn-ckpt-1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input patch {got:?} does not match configured N×3×{h}×{w}", h = .expected[1], w = .expected[0])]
    InputSize { expected: [usize; 2], got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found:?}, expected {CHECKPOINT_VERSION:?}")]
    Version { found: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Patch width and height in pixels.
    pub input_size: [usize; 2],
    /// Output channels of each stride-2 encoder stage.
    pub encoder_channels: Vec<usize>,
    /// Output channels of each ×2 deconvolution stage.
    pub deconv_channels: Vec<usize>,
    /// Map-to-patch scale; must equal `2^(deconvs - encoder stages)`.
    pub lambda: f64,
    /// Add a stride-1 residual block after every encoder stage.
    pub residual: bool,
    /// Seed for weight initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: [128, 128],
            encoder_channels: vec![16, 32, 32, 32, 32],
            deconv_channels: vec![32, 32, 32],
            lambda: 0.25,
            residual: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 2-stage, single-deconvolution config used for end-to-end gradient checks.
    pub fn toy() -> Self {
        Self {
            input_size: [8, 8],
            encoder_channels: vec![3, 4],
            deconv_channels: vec![3],
            lambda: 0.5,
            residual: false,
            init_seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let e = self.encoder_channels.len();
        let d = self.deconv_channels.len();
        if e == 0 || d == 0 {
            return Err(ModelError::Config("encoder and deconv stages must be non-empty".into()));
        }
        if self.encoder_channels.iter().chain(&self.deconv_channels).any(|&c| c == 0) {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        if d > e {
            return Err(ModelError::Config(format!(
                "{d} deconvolutions exceed {e} encoder stages (lambda would exceed 1)"
            )));
        }
        let expected = 2f64.powi(d as i32 - e as i32);
        if self.lambda != expected {
            return Err(ModelError::Config(format!(
                "lambda {} inconsistent with architecture (expected {expected})",
                self.lambda
            )));
        }
        let down = 1usize << e;
        for &s in &self.input_size {
            if s == 0 || s % down != 0 {
                return Err(ModelError::Config(format!(
                    "input extent {s} must be a positive multiple of {down}"
                )));
            }
        }
        Ok(())
    }

    /// Output map width and height.
    pub fn map_size(&self) -> [usize; 2] {
        let e = self.encoder_channels.len();
        let d = self.deconv_channels.len();
        [
            (self.input_size[0] >> e) << d,
            (self.input_size[1] >> e) << d,
        ]
    }
}

/// Kind of layer a parameter group belongs to; drives both init and forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    Conv { stride: usize, pad: usize },
    Deconv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VdnModel {
    config: ModelConfig,
    params: Vec<NamedParam>,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

enum Init {
    Kaiming(f64),
    Normal(f64),
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<Spec> {
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<Spec>, prefix: String, kind: LayerKind, cin: usize, cout: usize, k: usize, norm: bool| {
        let (shape, fan_in) = match kind {
            LayerKind::Conv { .. } => (vec![cout, cin, k, k], (cin * k * k) as f64),
            // each deconv output pixel sees k*k/stride^2 taps per input channel
            LayerKind::Deconv => (vec![cin, cout, k, k], (cin * k * k / 4) as f64),
        };
        specs.push(Spec {
            name: format!("{prefix}.weight"),
            shape,
            init: Init::Kaiming(fan_in),
        });
        specs.push(Spec {
            name: format!("{prefix}.bias"),
            shape: vec![cout],
            init: Init::Zeros,
        });
        if norm {
            specs.push(Spec {
                name: format!("{prefix}.norm.scale"),
                shape: vec![cout],
                init: Init::Ones,
            });
            specs.push(Spec {
                name: format!("{prefix}.norm.shift"),
                shape: vec![cout],
                init: Init::Zeros,
            });
        }
    };
    let mut cin = 3;
    for (i, &c) in cfg.encoder_channels.iter().enumerate() {
        conv(&mut specs, format!("enc.{i}.conv"), LayerKind::Conv { stride: 2, pad: 1 }, cin, c, 3, true);
        if cfg.residual {
            conv(&mut specs, format!("enc.{i}.res"), LayerKind::Conv { stride: 1, pad: 1 }, c, c, 3, true);
        }
        cin = c;
    }
    for (i, &c) in cfg.deconv_channels.iter().enumerate() {
        conv(&mut specs, format!("dec.{i}.deconv"), LayerKind::Deconv, cin, c, 4, true);
        cin = c;
    }
    for (name, cout) in [("head.heatmap", 1), ("head.scalarmap", 2)] {
        specs.push(Spec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, 1, 1],
            init: Init::Normal(0.001),
        });
        specs.push(Spec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            init: Init::Zeros,
        });
    }
    specs
}

/// Walks the parameter list in layout order during a forward pass.
struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    /// Free-form provenance (config hash and the like); ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
    config: ModelConfig,
    params: Vec<CheckpointParam>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Parameter handles of one forward pass, for reading gradients back.
pub struct ForwardVars {
    pub heatmap: Var,
    pub scalarmap: Var,
    pub params: Vec<Var>,
}

impl VdnModel {
    /// Build a model with seeded Kaiming-normal kernels and zero biases.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let params = layout(&config)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<f64> = match s.init {
                    Init::Kaiming(fan_in) => {
                        let d = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                        (0..n).map(|_| d.sample(&mut rng)).collect()
                    }
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| d.sample(&mut rng)).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Ok(NamedParam {
                    name: s.name,
                    tensor: Tensor::new(s.shape, data)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Overwrite parameter values; shapes must match the layout.
    pub fn set_param_tensors(&mut self, tensors: Vec<Tensor>) -> Result<(), ModelError> {
        if tensors.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (p, t) in self.params.iter().zip(&tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{}: shape {:?} vs {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            p.tensor = t;
        }
        Ok(())
    }

    pub fn param_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Record a forward pass of `input` (N×3×h×w) on `g`. Parameters are
    /// added as leaves that require gradients when `track` is set.
    pub fn forward_on(&self, g: &mut Graph, input: Var, track: bool) -> Result<ForwardVars, ModelError> {
        let [w, h] = self.config.input_size;
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            return Err(ModelError::InputSize {
                expected: self.config.input_size,
                got: shape,
            });
        }
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.set_requires_grad(track);
                g.leaf(t)
            })
            .collect();
        let mut cur = Cursor { vars: &vars, next: 0 };

        let block = |g: &mut Graph, cur: &mut Cursor, x: Var, kind: LayerKind| -> Result<Var, ModelError> {
            let (wt, b, sc, sh) = (cur.take(), cur.take(), cur.take(), cur.take());
            let y = match kind {
                LayerKind::Conv { stride, pad } => g.conv2d(x, wt, b, stride, pad)?,
                LayerKind::Deconv => g.deconv2d(x, wt, b, 2, 1)?,
            };
            Ok(g.channel_affine(y, sc, sh)?)
        };

        let mut x = input;
        for _ in &self.config.encoder_channels {
            let y = block(g, &mut cur, x, LayerKind::Conv { stride: 2, pad: 1 })?;
            x = g.relu(y);
            if self.config.residual {
                let r = block(g, &mut cur, x, LayerKind::Conv { stride: 1, pad: 1 })?;
                let r = g.relu(r);
                x = g.add(x, r)?;
            }
        }
        for _ in &self.config.deconv_channels {
            let y = block(g, &mut cur, x, LayerKind::Deconv)?;
            x = g.relu(y);
        }
        let (hw, hb) = (cur.take(), cur.take());
        let heatmap = g.conv2d(x, hw, hb, 1, 0)?;
        let (vw, vb) = (cur.take(), cur.take());
        let v = g.conv2d(x, vw, vb, 1, 0)?;
        let scalarmap = g.tanh(v);
        debug_assert_eq!(cur.next, vars.len());
        Ok(ForwardVars {
            heatmap,
            scalarmap,
            params: vars,
        })
    }

    /// Inference: `(Ĥ, V̂)` with shapes `N×1×h*×w*` and `N×2×h*×w*`.
    pub fn forward(&self, mode: ExecMode, patch: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let mut g = Graph::new(mode);
        let input = g.leaf(patch.clone());
        let fv = self.forward_on(&mut g, input, false)?;
        let h = g.value(fv.heatmap).clone();
        let v = g.into_value(fv.scalarmap);
        Ok((h, v))
    }

    fn to_checkpoint(&self) -> CheckpointFile {
        CheckpointFile {
            version: CHECKPOINT_VERSION.to_string(),
            meta: None,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| CheckpointParam {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        self.to_json_with(None)
    }

    pub fn to_json_with(&self, meta: Option<&serde_json::Value>) -> Result<String, ModelError> {
        let mut file = self.to_checkpoint();
        file.meta = meta.cloned();
        Ok(serde_json::to_string(&file)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.save_with(path, None)
    }

    /// Write atomically (temp file, then rename), embedding `meta`.
    pub fn save_with(&self, path: impl AsRef<Path>, meta: Option<&serde_json::Value>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json_with(meta)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// The `meta` object of a checkpoint, if any.
    pub fn read_meta(path: impl AsRef<Path>) -> Result<Option<serde_json::Value>, ModelError> {
        let file: CheckpointFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(file.meta)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(ModelError::Version {
                found: file.version,
            });
        }
        let mut model = VdnModel::new(file.config)?;
        if file.params.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                file.params.len()
            )));
        }
        let mut tensors = Vec::with_capacity(file.params.len());
        for (slot, p) in model.params.iter().zip(file.params) {
            if slot.name != p.name || slot.tensor.shape() != p.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {:?} {:?} does not match expected {:?} {:?}",
                    p.name,
                    p.shape,
                    slot.name,
                    slot.tensor.shape()
                )));
            }
            let t = Tensor::new(p.shape, p.values).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            if !t.all_finite() {
                return Err(ModelError::Checkpoint(format!("{}: non-finite values", p.name)));
            }
            tensors.push(t);
        }
        model.set_param_tensors(tensors)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Load and require the embedded architecture to equal `expected`
    /// (the init seed is ignored).
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self, ModelError> {
        let model = Self::load(path)?;
        let mut found = model.config.clone();
        found.init_seed = expected.init_seed;
        if &found != expected {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint config {:?} does not match expected {:?}",
                model.config, expected
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_patch(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w, h] = cfg.input_size;
        Tensor::new(vec![n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            input_size: [64, 32],
            encoder_channels: vec![4, 4, 6, 6, 6],
            deconv_channels: vec![6, 5, 5],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_shapes_and_tanh_range() {
        let cfg = small();
        let m = VdnModel::new(cfg.clone()).unwrap();
        let (h, v) = m.forward(ExecMode::Sequential, &random_patch(&cfg, 2, 1)).unwrap();
        assert_eq!(h.shape(), &[2, 1, 8, 16]);
        assert_eq!(v.shape(), &[2, 2, 8, 16]);
        assert!(v.data().iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let m = VdnModel::new(small()).unwrap();
        let bad = Tensor::zeros(&[1, 3, 64, 64]);
        assert!(matches!(m.forward(ExecMode::Sequential, &bad), Err(ModelError::InputSize { .. })));
    }

    #[test]
    fn hand_counted_parameters() {
        let cfg = ModelConfig {
            encoder_channels: vec![8, 16, 32, 32, 32],
            deconv_channels: vec![32, 32, 32],
            ..ModelConfig::default()
        };
        let m = VdnModel::new(cfg).unwrap();
        // conv 3x3: in*out*9 + bias out + norm 2*out
        let enc = (3 * 8 * 9 + 8 + 16)
            + (8 * 16 * 9 + 16 + 32)
            + (16 * 32 * 9 + 32 + 64)
            + 2 * (32 * 32 * 9 + 32 + 64);
        // deconv 4x4: in*out*16 + bias + norm
        let dec = 3 * (32 * 32 * 16 + 32 + 64);
        let heads = (32 + 1) + (2 * 32 + 2);
        assert_eq!(enc + dec + heads, 74_307);
        assert_eq!(m.count_params(), 74_307);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.lambda = 0.5;
        assert!(VdnModel::new(c).is_err());
        let mut c = ModelConfig::default();
        c.input_size = [100, 128];
        assert!(VdnModel::new(c).is_err());
        assert!(VdnModel::new(ModelConfig::toy()).is_ok());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let cfg = small();
        let m = VdnModel::new(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = VdnModel::load(&path).unwrap();
        assert_eq!(back, m);
        let x = random_patch(&cfg, 1, 9);
        assert_eq!(
            m.forward(ExecMode::Sequential, &x).unwrap(),
            back.forward(ExecMode::Sequential, &x).unwrap()
        );
    }

    #[test]
    fn checkpoint_mismatch_errors() {
        let m = VdnModel::new(small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert!(VdnModel::load_expecting(&path, &ModelConfig::default()).is_err());

        let mut json: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        json["version"] = "vdn-ckpt-0".into();
        assert!(matches!(VdnModel::from_json(&json.to_string()), Err(ModelError::Version { .. })));

        let mut json: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        json["config"]["encoder_channels"][0] = 5.into();
        assert!(matches!(VdnModel::from_json(&json.to_string()), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn modes_bit_identical() {
        let cfg = small();
        let m = VdnModel::new(cfg.clone()).unwrap();
        let x = random_patch(&cfg, 3, 4);
        assert_eq!(
            m.forward(ExecMode::Sequential, &x).unwrap(),
            m.forward(ExecMode::Parallel, &x).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shape_algebra(e in 1usize..5, d_off in 0usize..4, wm in 1usize..4, hm in 1usize..4, res in any::<bool>()) {
            let d = e.saturating_sub(d_off).max(1);
            let cfg = ModelConfig {
                input_size: [wm << e, hm << e],
                encoder_channels: vec![2; e],
                deconv_channels: vec![2; d],
                lambda: 2f64.powi(d as i32 - e as i32),
                residual: res,
                init_seed: 3,
            };
            let m = VdnModel::new(cfg.clone()).unwrap();
            let (h, v) = m.forward(ExecMode::Sequential, &random_patch(&cfg, 1, 0)).unwrap();
            let [mw, mh] = cfg.map_size();
            prop_assert_eq!(h.shape(), &[1, 1, mh, mw]);
            prop_assert_eq!(v.shape(), &[1, 2, mh, mw]);
            prop_assert_eq!(mw as f64, cfg.input_size[0] as f64 * cfg.lambda);
        }
    }
}
