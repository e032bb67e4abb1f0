//! Gaussian keypoint heatmaps.
//!
//! A frame of `K` keypoints becomes a `[H, W, K]` tensor (channels last)
//! where channel `k` holds `exp(-((i-x)² + (j-y)²) / 2σ²)` at column `i`,
//! row `j` for keypoint `(x, y)` given in heatmap pixel units. Invalid
//! keypoints leave their channel at zero.

use serde::{Deserialize, Serialize};
use tensornet::Tensor;

use crate::error::{Error, Result};

/// Reference resolution at which the default width of 4 pixels applies.
pub const REFERENCE_SIZE: usize = 112;
pub const REFERENCE_SIGMA: f64 = 4.0;

/// Gaussian width that keeps the reference width-to-size ratio at `size`.
pub fn scaled_sigma(size: usize) -> f64 {
    REFERENCE_SIGMA * size as f64 / REFERENCE_SIZE as f64
}

/// One frame of 2D keypoints in heatmap pixel coordinates (x = column,
/// y = row) with per-keypoint validity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub points: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl KeypointFrame {
    pub fn new(points: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        if points.len() != valid.len() {
            return Err(Error::Shape(format!(
                "{} keypoints but {} validity flags",
                points.len(),
                valid.len()
            )));
        }
        Ok(Self { points, valid })
    }

    pub fn all_valid(points: Vec<[f64; 2]>) -> Self {
        let valid = vec![true; points.len()];
        Self { points, valid }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    /// Pixels farther than `cutoff · σ` from the keypoint are left at zero.
    #[serde(default)]
    pub cutoff: Option<f64>,
}

impl HeatmapConfig {
    pub fn new(height: usize, width: usize, sigma: f64) -> Self {
        Self {
            height,
            width,
            sigma,
            cutoff: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "heatmap sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParameter(format!(
                "heatmap size {}x{} is empty",
                self.height, self.width
            )));
        }
        if let Some(c) = self.cutoff {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "heatmap cutoff must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Writes one frame into `out` (length `H·W·K`, channels last).
fn render_into(frame: &KeypointFrame, cfg: &HeatmapConfig, out: &mut [f64]) -> Result<()> {
    let k = frame.len();
    let (h, w) = (cfg.height, cfg.width);
    let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let r2_max = cfg.cutoff.map(|c| (c * cfg.sigma).powi(2));
    for (c, (&[x, y], &valid)) in frame.points.iter().zip(&frame.valid).enumerate() {
        if !valid {
            continue;
        }
        if !(x.is_finite() && y.is_finite())
            || x < 0.0
            || y < 0.0
            || x > (w - 1) as f64
            || y > (h - 1) as f64
        {
            return Err(Error::InvalidParameter(format!(
                "keypoint {c} at ({x}, {y}) lies outside the {w}x{h} heatmap"
            )));
        }
        // Separable Gaussian: one exp per row and per column.
        let gx: Vec<f64> = (0..w)
            .map(|i| (-(i as f64 - x).powi(2) * inv).exp())
            .collect();
        for j in 0..h {
            let dy2 = (j as f64 - y).powi(2);
            let gy = (-dy2 * inv).exp();
            for (i, gxi) in gx.iter().enumerate() {
                if let Some(r2) = r2_max {
                    if (i as f64 - x).powi(2) + dy2 > r2 {
                        continue;
                    }
                }
                out[(j * w + i) * k + c] = gy * gxi;
            }
        }
    }
    Ok(())
}

/// Rasterizes one frame into a `[H, W, K]` tensor.
pub fn rasterize_frame(frame: &KeypointFrame, cfg: &HeatmapConfig) -> Result<Tensor> {
    cfg.validate()?;
    let k = frame.len();
    let mut data = vec![0.0; cfg.height * cfg.width * k];
    render_into(frame, cfg, &mut data)?;
    Ok(Tensor::new(&[cfg.height, cfg.width, k], data)?)
}

/// Stacks frames into a `[T, H, W, K]` tensor. All frames must carry the
/// same number of keypoints.
pub fn stack_sequence(frames: &[KeypointFrame], cfg: &HeatmapConfig) -> Result<Tensor> {
    cfg.validate()?;
    let Some(first) = frames.first() else {
        return Err(Error::EmptySequence);
    };
    let k = first.len();
    let per = cfg.height * cfg.width * k;
    let mut data = vec![0.0; frames.len() * per];
    for (t, f) in frames.iter().enumerate() {
        if f.len() != k {
            return Err(Error::Shape(format!(
                "frame {t} has {} keypoints, expected {k}",
                f.len()
            )));
        }
        render_into(f, cfg, &mut data[t * per..(t + 1) * per])?;
    }
    Ok(Tensor::new(
        &[frames.len(), cfg.height, cfg.width, k],
        data,
    )?)
}
