//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each check builds a scalar loss `mse(op(inputs), target)` on a fresh
//! [`Graph`], takes the analytic gradient from [`Graph::backward`], and
//! compares it with `(L(x + h e_i) - L(x - h e_i)) / 2h` evaluated through
//! forward passes only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::exec::ExecMode;
use crate::graph::{Graph, Var};
use crate::model::{ModelConfig, VdnModel};
use crate::tensor::{Tensor, TensorError};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Relative error with a small absolute floor so vanishing gradients do not
/// blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Builds the loss from leaf tensors; returns the graph, the leaf vars and the loss var.
type Builder<'a> = dyn Fn(&[Tensor]) -> Result<(Graph, Vec<Var>, Var), TensorError> + 'a;

/// Compare analytic and numeric gradients for every listed `(leaf, element)`.
pub fn check_leaves(
    build: &Builder<'_>,
    leaves: &[Tensor],
    which: &[(usize, usize)],
) -> Result<f64, TensorError> {
    let (g, vars, loss) = build(leaves)?;
    let grads = g.backward(loss)?;
    let eval = |ls: &[Tensor]| -> Result<f64, TensorError> {
        let (g, _, loss) = build(ls)?;
        Ok(g.value(loss).data()[0])
    };
    let mut worst: f64 = 0.0;
    for &(leaf, idx) in which {
        let analytic = grads.get(vars[leaf]).map(|g| g[idx]).unwrap_or(0.0);
        let mut plus = leaves.to_vec();
        plus[leaf].data_mut()[idx] += STEP;
        let mut minus = leaves.to_vec();
        minus[leaf].data_mut()[idx] -= STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("valid shape")
        .with_requires_grad()
}

/// Random values kept at least `margin` away from zero (keeps ReLU off its kink).
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(margin..1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape").with_requires_grad()
}

fn all_indices(leaves: &[Tensor]) -> Vec<(usize, usize)> {
    leaves
        .iter()
        .enumerate()
        .filter(|(_, t)| t.requires_grad())
        .flat_map(|(l, t)| (0..t.len()).map(move |i| (l, i)))
        .collect()
}

fn row(name: &str, build: &Builder<'_>, leaves: Vec<Tensor>, tol: f64) -> Result<CheckRow, TensorError> {
    let which = all_indices(&leaves);
    Ok(CheckRow {
        name: name.to_string(),
        max_rel_error: check_leaves(build, &leaves, &which)?,
        checked: which.len(),
        tolerance: tol,
    })
}

/// Loss head shared by the op checks: mse against a fixed random target.
fn with_target(mut g: Graph, out: Var, target: &Tensor) -> Result<(Graph, Var), TensorError> {
    let t = g.leaf(target.clone());
    let l = g.mse(out, t)?;
    Ok((g, l))
}

pub fn check_conv2d(seed: u64, stride: usize, pad: usize) -> Result<CheckRow, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
    let k = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[3], -1.0, 1.0);
    let oh = (5 + 2 * pad - 3) / stride + 1;
    let target = random(&mut rng, &[2, 3, oh, oh], -1.0, 1.0);
    let build = move |ls: &[Tensor]| {
        let mut g = Graph::new(ExecMode::Sequential);
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
        let y = g.conv2d(vars[0], vars[1], vars[2], stride, pad)?;
        let (g, l) = with_target(g, y, &target)?;
        Ok((g, vars, l))
    };
    row(&format!("conv2d(stride={stride},pad={pad})"), &build, vec![x, k, b], OP_TOLERANCE)
}

pub fn check_deconv2d(seed: u64) -> Result<CheckRow, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let k = random(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let b = random(&mut rng, &[3], -1.0, 1.0);
    let target = random(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let build = move |ls: &[Tensor]| {
        let mut g = Graph::new(ExecMode::Sequential);
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
        let y = g.deconv2d(vars[0], vars[1], vars[2], 2, 1)?;
        let (g, l) = with_target(g, y, &target)?;
        Ok((g, vars, l))
    };
    row("deconv2d", &build, vec![x, k, b], OP_TOLERANCE)
}

pub fn check_relu(seed: u64) -> Result<CheckRow, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_off_zero(&mut rng, &[1, 2, 4, 4], 1e-3);
    let target = random(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let build = move |ls: &[Tensor]| {
        let mut g = Graph::new(ExecMode::Sequential);
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
        let y = g.relu(vars[0]);
        let (g, l) = with_target(g, y, &target)?;
        Ok((g, vars, l))
    };
    row("relu", &build, vec![x], OP_TOLERANCE)
}

pub fn check_tanh(seed: u64) -> Result<CheckRow, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, &[1, 2, 4, 4], -3.0, 3.0);
    let target = random(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let build = move |ls: &[Tensor]| {
        let mut g = Graph::new(ExecMode::Sequential);
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
        let y = g.tanh(vars[0]);
        let (g, l) = with_target(g, y, &target)?;
        Ok((g, vars, l))
    };
    row("tanh", &build, vec![x], OP_TOLERANCE)
}

pub fn check_channel_affine(seed: u64) -> Result<CheckRow, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let s = random(&mut rng, &[3], 0.5, 1.5);
    let b = random(&mut rng, &[3], -1.0, 1.0);
    let target = random(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let build = move |ls: &[Tensor]| {
        let mut g = Graph::new(ExecMode::Sequential);
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
        let y = g.channel_affine(vars[0], vars[1], vars[2])?;
        let (g, l) = with_target(g, y, &target)?;
        Ok((g, vars, l))
    };
    row("channel_affine", &build, vec![x, s, b], OP_TOLERANCE)
}

pub fn check_mse(seed: u64) -> Result<CheckRow, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random(&mut rng, &[1, 1, 3, 4], -1.0, 1.0);
    let t = random(&mut rng, &[1, 1, 3, 4], -1.0, 1.0);
    let build = |ls: &[Tensor]| {
        let mut g = Graph::new(ExecMode::Sequential);
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
        let l = g.mse(vars[0], vars[1])?;
        Ok((g, vars, l))
    };
    row("mse", &build, vec![p, t], OP_TOLERANCE)
}

pub fn check_add_scale(seed: u64) -> Result<CheckRow, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(&mut rng, &[1, 1, 2, 3], -1.0, 1.0);
    let b = random(&mut rng, &[1, 1, 2, 3], -1.0, 1.0);
    let target = random(&mut rng, &[1, 1, 2, 3], -1.0, 1.0);
    let build = move |ls: &[Tensor]| {
        let mut g = Graph::new(ExecMode::Sequential);
        let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
        let s = g.scale(vars[1], -0.7);
        let y = g.add(vars[0], s)?;
        let (g, l) = with_target(g, y, &target)?;
        Ok((g, vars, l))
    };
    row("add+scale", &build, vec![a, b], OP_TOLERANCE)
}

/// End-to-end check of the two-term loss through a whole model, on a
/// sampled subset of `samples` parameter entries.
pub fn check_model(cfg: &ModelConfig, seed: u64, samples: usize, scalar_weight: f64) -> Result<CheckRow, TensorError> {
    let model = VdnModel::new(cfg.clone()).map_err(|e| TensorError::NonFinite(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [w, h] = cfg.input_size;
    let [mw, mh] = cfg.map_size();
    let input = random(&mut rng, &[2, 3, h, w], 0.0, 1.0);
    let target_h = random(&mut rng, &[2, 1, mh, mw], 0.0, 1.0);
    let target_v = random(&mut rng, &[2, 2, mh, mw], -1.0, 1.0);
    // heads start near zero; scale them up so every layer's gradient is well above noise
    let leaves: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| {
            let mut t = p.tensor.clone();
            if p.name.starts_with("head") && p.name.ends_with("weight") {
                t.data_mut().iter_mut().for_each(|v| *v *= 300.0);
            }
            if p.name.ends_with("bias") || p.name.ends_with("shift") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
            t.with_requires_grad()
        })
        .collect();
    let build = |ls: &[Tensor]| -> Result<(Graph, Vec<Var>, Var), TensorError> {
        let mut m = model.clone();
        m.set_param_tensors(ls.to_vec())
            .map_err(|e| TensorError::NonFinite(e.to_string()))?;
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.leaf(input.clone());
        let fv = m
            .forward_on(&mut g, x, true)
            .map_err(|e| TensorError::NonFinite(e.to_string()))?;
        let th = g.leaf(target_h.clone());
        let tv = g.leaf(target_v.clone());
        let lh = g.mse(fv.heatmap, th)?;
        let lv = g.mse(fv.scalarmap, tv)?;
        let lv = g.scale(lv, scalar_weight);
        let l = g.add(lh, lv)?;
        Ok((g, fv.params, l))
    };
    let all = all_indices(&leaves);
    let mut which = Vec::with_capacity(samples);
    // always include at least one entry of every parameter tensor
    for l in 0..leaves.len() {
        which.push((l, rng.random_range(0..leaves[l].len())));
    }
    while which.len() < samples.max(leaves.len()) {
        which.push(all[rng.random_range(0..all.len())]);
    }
    Ok(CheckRow {
        name: format!("model(end-to-end, {} stages)", cfg.encoder_channels.len()),
        max_rel_error: check_leaves(&build, &leaves, &which)?,
        checked: which.len(),
        tolerance: MODEL_TOLERANCE,
    })
}

/// Every op check plus the toy end-to-end model check.
pub fn run_suite(seed: u64) -> Result<Vec<CheckRow>, TensorError> {
    Ok(vec![
        check_conv2d(seed, 1, 1)?,
        check_conv2d(seed + 1, 2, 1)?,
        check_deconv2d(seed + 2)?,
        check_relu(seed + 3)?,
        check_tanh(seed + 4)?,
        check_channel_affine(seed + 5)?,
        check_mse(seed + 6)?,
        check_add_scale(seed + 7)?,
        check_model(&ModelConfig::toy(), seed + 8, 60, 0.5)?,
    ])
}
