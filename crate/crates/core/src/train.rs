//! Scheduled two-term loss and the training loop.
//!
//! The loss at epoch `ε` of `E` is `l_H + μ·(ε/E)·l_V`: the heatmap term
//! alone at first, with the direction term phased in linearly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PatchSample;
use crate::exec::{self, ExecMode};
use crate::graph::Graph;
use crate::model::{ModelError, VdnModel};
use crate::ops;
use crate::optim::{adam_step, AdamConfig, AdamState, OptimError};
use crate::targets::{self, AugmentConfig, TargetConfig, TargetError};
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "train_report.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset: need at least one full batch of {0}")]
    EmptyDataset(usize),
    #[error("sample {index}: {source}")]
    Target {
        index: usize,
        #[source]
        source: TargetError,
    },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epoch at which each learning rate takes over.
    pub milestones: BTreeMap<usize, f64>,
    pub mu: f64,
    /// Gaussian spread of the heatmap target, in map pixels.
    pub sigma: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    /// Write a numbered checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 30 epochs with drops at 21 and 28.
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            base_lr: 1e-3,
            milestones: BTreeMap::from([(21, 1e-4), (28, 1e-5)]),
            mu: 1.0,
            sigma: 3.0,
            seed: 0,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule: 200 epochs, 1e-3 dropping to 1e-4 at 140 and 1e-5 at 190.
    pub fn long_schedule() -> Self {
        Self {
            epochs: 200,
            milestones: BTreeMap::from([(140, 1e-4), (190, 1e-5)]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        for (&e, &lr) in &self.milestones {
            if e >= self.epochs {
                return bad(format!("milestone epoch {e} not below epochs {}", self.epochs));
            }
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("milestone lr {lr} must be positive"));
            }
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu {} must be non-negative", self.mu));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        let [lo, hi] = self.augment.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) || !(self.augment.max_rotation_deg >= 0.0) {
            return bad(format!("bad augmentation ranges {:?}", self.augment));
        }
        Ok(())
    }

    /// Learning rate in force at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .range(..=epoch)
            .next_back()
            .map_or(self.base_lr, |(_, &lr)| lr)
    }

    /// Weight of the direction term at `epoch`: `μ·ε/E`.
    pub fn scalar_weight(&self, epoch: usize) -> f64 {
        scalar_weight(epoch, self.epochs, self.mu)
    }
}

pub fn scalar_weight(epoch: usize, epochs: usize, mu: f64) -> f64 {
    mu * (epoch as f64 / epochs as f64)
}

/// `(l, l_H, l_V)` for one batch of predictions and targets.
pub fn scheduled_loss(
    hhat: &Tensor,
    h: &Tensor,
    vhat: &Tensor,
    v: &Tensor,
    epoch: usize,
    epochs: usize,
    mu: f64,
) -> Result<(f64, f64, f64), TensorError> {
    let lh = ops::mse(hhat, h)?;
    let lv = ops::mse(vhat, v)?;
    Ok((lh + scalar_weight(epoch, epochs, mu) * lv, lh, lv))
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of the three loss terms.
    pub loss: f64,
    pub loss_heatmap: f64,
    pub loss_scalarmap: f64,
    pub scalar_weight: f64,
    pub lr: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> Result<String, serde_json::Error> {
        let mut s = String::new();
        for r in &self.epochs {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(s: &str) -> Result<Self, serde_json::Error> {
        let epochs = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { epochs })
    }

    /// Equal in everything but wall time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let strip = |r: &EpochRecord| EpochRecord {
            wall_time_s: 0.0,
            ..r.clone()
        };
        self.epochs.len() == other.epochs.len() && self.epochs.iter().zip(&other.epochs).all(|(a, b)| strip(a) == strip(b))
    }
}

/// Where training writes checkpoints and the report; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    /// Embedded in every checkpoint written.
    pub meta: Option<serde_json::Value>,
}

impl TrainOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            meta: None,
        }
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
        move |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn prepare(&self) -> Result<(), TrainError> {
        if let Some(dir) = &self.dir {
            fs::create_dir_all(dir).map_err(Self::io(dir))?;
            let p = dir.join(REPORT_FILE);
            fs::write(&p, "").map_err(Self::io(&p))?;
        }
        Ok(())
    }

    fn append(&self, rec: &EpochRecord) -> Result<(), TrainError> {
        if let Some(dir) = &self.dir {
            let p = dir.join(REPORT_FILE);
            let mut f = fs::OpenOptions::new().append(true).open(&p).map_err(Self::io(&p))?;
            writeln!(f, "{}", serde_json::to_string(rec)?).map_err(Self::io(&p))?;
        }
        Ok(())
    }

    fn checkpoint(&self, model: &VdnModel, numbered: Option<usize>) -> Result<(), TrainError> {
        if let Some(dir) = &self.dir {
            if let Some(e) = numbered {
                model.save_with(dir.join(format!("checkpoint_epoch{e:03}.json")), self.meta.as_ref())?;
            }
            model.save_with(dir.join(CHECKPOINT_FILE), self.meta.as_ref())?;
        }
        Ok(())
    }
}

/// Inputs and targets for one batch, stacked along N.
struct Batch {
    input: Tensor,
    heatmap: Tensor,
    scalarmap: Tensor,
}

fn assemble(
    samples: &[PatchSample],
    indices: &[usize],
    model: &VdnModel,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Batch, TrainError> {
    let [w, h] = model.config().input_size;
    let [mw, mh] = model.config().map_size();
    let tcfg = TargetConfig::new([mw, mh], model.config().lambda, cfg.sigma);
    let items = exec::map_slice(cfg.exec, indices, |&i| {
        let s = &samples[i];
        let mut rng = ChaCha8Rng::seed_from_u64(exec::derive_seed(cfg.seed, &[epoch as u64, i as u64]));
        let (patch, anns) = targets::augment(&s.image(), &s.pointers, &mut rng, &cfg.augment);
        let maps = targets::encode_targets(&anns, &tcfg).map_err(|source| TrainError::Target { index: i, source })?;
        Ok::<_, TrainError>((patch, maps))
    });
    let n = indices.len();
    let mut input = Vec::with_capacity(n * 3 * w * h);
    let mut heat = Vec::with_capacity(n * mw * mh);
    let mut scalar = Vec::with_capacity(n * 2 * mw * mh);
    for item in items {
        let (patch, maps) = item?;
        if patch.width != w || patch.height != h {
            return Err(TrainError::Config(format!(
                "patch {}x{} does not match model input {w}x{h}",
                patch.width, patch.height
            )));
        }
        input.extend_from_slice(&patch.data);
        heat.extend_from_slice(&maps.heatmap);
        scalar.extend_from_slice(&maps.scalarmap);
    }
    Ok(Batch {
        input: Tensor::new(vec![n, 3, h, w], input)?,
        heatmap: Tensor::new(vec![n, 1, mh, mw], heat)?,
        scalarmap: Tensor::new(vec![n, 2, mh, mw], scalar)?,
    })
}

/// Loss terms and parameter gradients for one batch.
fn batch_gradients(
    model: &VdnModel,
    batch: Batch,
    weight: f64,
    mode: ExecMode,
) -> Result<((f64, f64, f64), Vec<Vec<f64>>), TrainError> {
    let mut g = Graph::new(mode);
    let x = g.leaf(batch.input);
    let fv = model.forward_on(&mut g, x, true)?;
    let ht = g.leaf(batch.heatmap);
    let vt = g.leaf(batch.scalarmap);
    let lh = g.mse(fv.heatmap, ht)?;
    let lv = g.mse(fv.scalarmap, vt)?;
    let wv = g.scale(lv, weight);
    let l = g.add(lh, wv)?;
    let terms = (g.value(l).data()[0], g.value(lh).data()[0], g.value(lv).data()[0]);
    if !(terms.0.is_finite() && terms.1.is_finite() && terms.2.is_finite()) {
        return Ok((terms, Vec::new()));
    }
    let mut grads = g.backward(l)?;
    let out = fv
        .params
        .iter()
        .map(|&p| grads.take(p).unwrap_or_else(|| vec![0.0; g.value(p).len()]))
        .collect();
    Ok((terms, out))
}

/// Train `model` on `samples`. Each epoch shuffles with an epoch-seeded RNG,
/// drops the last partial batch, and augments every sample with a seed
/// derived from `(seed, epoch, sample index)`, so the run is a function of
/// the config alone. A non-finite loss aborts before any parameter changes;
/// the last checkpoint on disk is the last good state.
pub fn train(
    mut model: VdnModel,
    samples: &[PatchSample],
    cfg: &TrainConfig,
    out: &TrainOutput,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(VdnModel, TrainReport), TrainError> {
    cfg.validate()?;
    let steps_per_epoch = samples.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(TrainError::EmptyDataset(cfg.batch_size));
    }
    out.prepare()?;
    let mut state = AdamState::new(&model.param_tensors());
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let weight = cfg.scalar_weight(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(exec::derive_seed(cfg.seed, &[epoch as u64])));
        let mut sums = (0.0, 0.0, 0.0);
        for (step, idx) in order.chunks_exact(cfg.batch_size).enumerate() {
            let batch = assemble(samples, idx, &model, cfg, epoch)?;
            let ((l, lh, lv), grads) = batch_gradients(&model, batch, weight, cfg.exec)?;
            if grads.is_empty() {
                return Err(TrainError::NonFinite { epoch, step });
            }
            let mut params = model.param_tensors();
            adam_step(&mut params, &grads, &mut state, lr, &cfg.adam).map_err(|e| match e {
                OptimError::NonFiniteGradient { .. } => TrainError::NonFinite { epoch, step },
                other => other.into(),
            })?;
            model.set_param_tensors(params)?;
            sums = (sums.0 + l, sums.1 + lh, sums.2 + lv);
        }
        let n = steps_per_epoch as f64;
        let rec = EpochRecord {
            epoch,
            loss: sums.0 / n,
            loss_heatmap: sums.1 / n,
            loss_scalarmap: sums.2 / n,
            scalar_weight: weight,
            lr,
            steps: steps_per_epoch,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        out.append(&rec)?;
        on_epoch(&rec);
        report.epochs.push(rec);
        let last = epoch + 1 == cfg.epochs;
        let periodic = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        if periodic || last {
            out.checkpoint(&model, periodic.then_some(epoch + 1))?;
        }
    }
    Ok((model, report))
}
