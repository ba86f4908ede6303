//! Heatmap peak finding and vector read-out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Raw scalarmap magnitude below which a direction is flagged degenerate.
pub const DEGENERATE_NORM: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("heatmap {heatmap:?} and scalarmap {scalarmap:?} are not congruent")]
    Shape {
        heatmap: Vec<usize>,
        scalarmap: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorDetection {
    /// Tip position in patch pixels.
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub beta: f64,
    pub confidence: f64,
    #[serde(default)]
    pub degenerate: bool,
}

impl VectorDetection {
    pub fn tip(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn direction(&self) -> [f64; 2] {
        [self.alpha, self.beta]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub threshold: f64,
    /// Suppression radius in map pixels.
    pub nms_radius: f64,
    pub subpixel: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            nms_radius: 6.0,
            subpixel: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(DecodeError::Config(format!("threshold {} not in (0, 1)", self.threshold)));
        }
        if !(self.nms_radius >= 1.0) {
            return Err(DecodeError::Config(format!("nms_radius {} below 1", self.nms_radius)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub confidence: f64,
}

/// Strict 3×3 local maxima at or above the threshold, greedily suppressed
/// within `nms_radius`, in descending confidence order (row-major on ties).
pub fn find_peaks(heat: &[f64], w: usize, h: usize, cfg: &DecodeConfig) -> Vec<Peak> {
    let mut cands = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = heat[y * w + x];
            if !(v >= cfg.threshold) {
                continue;
            }
            let mut strict = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if heat[ny as usize * w + nx as usize] >= v {
                        strict = false;
                        break 'nb;
                    }
                }
            }
            if strict {
                cands.push(Peak { x, y, confidence: v });
            }
        }
    }
    // stable sort keeps row-major order among equal confidences
    cands.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let r2 = cfg.nms_radius * cfg.nms_radius;
    let mut kept: Vec<Peak> = Vec::new();
    for c in cands {
        let close = kept.iter().any(|k| {
            let (dx, dy) = (k.x as f64 - c.x as f64, k.y as f64 - c.y as f64);
            dx * dx + dy * dy <= r2
        });
        if !close {
            kept.push(c);
        }
    }
    kept
}

fn subpixel_shift(heat: &[f64], w: usize, h: usize, p: &Peak) -> (f64, f64) {
    let at = |x: usize, y: usize| heat[y * w + x];
    let mut sx = 0.0;
    let mut sy = 0.0;
    if p.x > 0 && p.x + 1 < w {
        let (l, r) = (at(p.x - 1, p.y), at(p.x + 1, p.y));
        if r > l {
            sx = 0.25;
        } else if l > r {
            sx = -0.25;
        }
    }
    if p.y > 0 && p.y + 1 < h {
        let (u, d) = (at(p.x, p.y - 1), at(p.x, p.y + 1));
        if d > u {
            sy = 0.25;
        } else if u > d {
            sy = -0.25;
        }
    }
    (sx, sy)
}

/// Decode one patch from planar maps: `heat` is `h×w`, `scalar` is `2×h×w`.
pub fn decode_maps(
    heat: &[f64],
    scalar: &[f64],
    w: usize,
    h: usize,
    lambda: f64,
    cfg: &DecodeConfig,
) -> Vec<VectorDetection> {
    let plane = w * h;
    find_peaks(heat, w, h, cfg)
        .into_iter()
        .map(|p| {
            let (sx, sy) = if cfg.subpixel {
                subpixel_shift(heat, w, h, &p)
            } else {
                (0.0, 0.0)
            };
            let idx = p.y * w + p.x;
            let (a, b) = (scalar[idx], scalar[plane + idx]);
            let n = a.hypot(b);
            let (alpha, beta) = if n > 0.0 { (a / n, b / n) } else { (0.0, 0.0) };
            VectorDetection {
                x: (p.x as f64 + sx) / lambda,
                y: (p.y as f64 + sy) / lambda,
                alpha,
                beta,
                confidence: p.confidence,
                degenerate: n < DEGENERATE_NORM,
            }
        })
        .collect()
}

fn spatial(t: &Tensor, channels: usize) -> Option<(usize, usize)> {
    match *t.shape() {
        [1, c, h, w] | [c, h, w] if c == channels => Some((h, w)),
        [h, w] if channels == 1 => Some((h, w)),
        _ => None,
    }
}

/// Decode one patch from network outputs `Ĥ` (`1×1×h×w`) and `V̂` (`1×2×h×w`).
pub fn decode(
    heatmap: &Tensor,
    scalarmap: &Tensor,
    lambda: f64,
    cfg: &DecodeConfig,
) -> Result<Vec<VectorDetection>, DecodeError> {
    let mismatch = || DecodeError::Shape {
        heatmap: heatmap.shape().to_vec(),
        scalarmap: scalarmap.shape().to_vec(),
    };
    let hs = spatial(heatmap, 1).ok_or_else(mismatch)?;
    let vs = spatial(scalarmap, 2).ok_or_else(mismatch)?;
    if hs != vs {
        return Err(mismatch());
    }
    Ok(decode_maps(heatmap.data(), scalarmap.data(), hs.1, hs.0, lambda, cfg))
}
