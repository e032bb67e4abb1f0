//! Temporal windows and spatial crop augmentation for paired RGB/heatmap clips.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensornet::Tensor;

use super::RawSample;
use crate::error::{Error, Result};
use crate::heatmap::{stack_sequence, HeatmapConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Uniformly random windows.
    Train,
    /// Centered windows.
    Eval,
}

/// A long window and a half-length short window inside it (absolute frames).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalWindow {
    pub long_start: usize,
    pub long_len: usize,
    pub short_start: usize,
    pub short_len: usize,
}

impl TemporalWindow {
    fn centered_short(long_start: usize, long_len: usize) -> Self {
        let short_len = long_len / 2;
        Self {
            long_start,
            long_len,
            short_start: long_start + (long_len - short_len) / 2,
            short_len,
        }
    }
}

fn check_lengths(raw_len: usize, long_len: usize) -> Result<()> {
    if long_len < 2 || long_len % 2 != 0 {
        return Err(Error::Config(format!(
            "long clip length must be even and >= 2, got {long_len}"
        )));
    }
    if raw_len < long_len {
        return Err(Error::Length {
            needed: long_len,
            available: raw_len,
        });
    }
    Ok(())
}

/// Picks the long window and the short window inside it.
pub fn temporal_crop<R: Rng + ?Sized>(
    raw_len: usize,
    long_len: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<TemporalWindow> {
    check_lengths(raw_len, long_len)?;
    match mode {
        CropMode::Eval => Ok(TemporalWindow::centered_short(
            (raw_len - long_len) / 2,
            long_len,
        )),
        CropMode::Train => {
            let long_start = rng.gen_range(0..=raw_len - long_len);
            let short_len = long_len / 2;
            let short_start = long_start + rng.gen_range(0..=long_len - short_len);
            Ok(TemporalWindow {
                long_start,
                long_len,
                short_start,
                short_len,
            })
        }
    }
}

/// Start, middle and end windows used for multi-crop inference.
pub fn three_crop_windows(raw_len: usize, long_len: usize) -> Result<[TemporalWindow; 3]> {
    check_lengths(raw_len, long_len)?;
    let span = raw_len - long_len;
    Ok([0, span / 2, span].map(|s| TemporalWindow::centered_short(s, long_len)))
}

/// Crop rectangle in normalized image coordinates (`[0, 1]` on each axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl CropRect {
    pub const FULL: CropRect = CropRect {
        x0: 0.0,
        y0: 0.0,
        width: 1.0,
        height: 1.0,
    };

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Maps a normalized point into the normalized frame of the resized crop.
    pub fn map_point(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.x0) / self.width,
            (p[1] - self.y0) / self.height,
        ]
    }
}

/// Square-in-normalized-units crop covering an area fraction drawn
/// uniformly from `scale_range`, placed uniformly inside the frame.
pub fn sample_crop_rect<R: Rng + ?Sized>(rng: &mut R, scale_range: [f64; 2]) -> Result<CropRect> {
    let [lo, hi] = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!(
            "crop scale range {scale_range:?} must satisfy 0 < lo <= hi <= 1"
        )));
    }
    let area = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let side = area.sqrt();
    let slack = 1.0 - side;
    let (x0, y0) = if slack > 0.0 {
        (rng.gen_range(0.0..=slack), rng.gen_range(0.0..=slack))
    } else {
        (0.0, 0.0)
    };
    Ok(CropRect {
        x0,
        y0,
        width: side,
        height: side,
    })
}

/// Crops `[T, H, W, C]` frames to `rect` and resizes back to `H×W` with
/// bilinear interpolation (half-pixel centers, edge clamping).
pub fn crop_resize(frames: &Tensor, rect: &CropRect) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "expected [T,H,W,C] frames, got {s:?}"
        )));
    }
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (cw, ch) = (rect.width * w as f64, rect.height * h as f64);
    if cw < 2.0 || ch < 2.0 {
        return Err(Error::Crop(format!(
            "crop of {cw:.2}x{ch:.2} pixels on a {w}x{h} frame is degenerate"
        )));
    }
    if *rect == CropRect::FULL {
        return Ok(frames.clone());
    }
    let axis = |n: usize, start: f64, len: f64| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|o| {
                let src = ((o as f64 + 0.5) * len / n as f64 + start * n as f64 - 0.5)
                    .clamp(0.0, (n - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xs = axis(w, rect.x0, cw);
    let ys = axis(h, rect.y0, ch);
    let src = frames.data();
    let mut out = vec![0.0; src.len()];
    let frame = h * w * c;
    for f in 0..t {
        let base = f * frame;
        for (j, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (i, &(x0, x1, fx)) in xs.iter().enumerate() {
                let o = base + (j * w + i) * c;
                let p00 = base + (y0 * w + x0) * c;
                let p01 = base + (y0 * w + x1) * c;
                let p10 = base + (y1 * w + x0) * c;
                let p11 = base + (y1 * w + x1) * c;
                for k in 0..c {
                    let top = src[p00 + k] * (1.0 - fx) + src[p01 + k] * fx;
                    let bot = src[p10 + k] * (1.0 - fx) + src[p11 + k] * fx;
                    out[o + k] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(Tensor::new(s, out)?)
}

/// Applies one sampled crop to both modalities.
pub fn spatial_crop_pair<R: Rng + ?Sized>(
    video: &Tensor,
    heatmaps: &Tensor,
    scale_range: [f64; 2],
    rng: &mut R,
) -> Result<(Tensor, Tensor, CropRect)> {
    let rect = sample_crop_rect(rng, scale_range)?;
    Ok((
        crop_resize(video, &rect)?,
        crop_resize(heatmaps, &rect)?,
        rect,
    ))
}

/// Network inputs cut from one raw sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPair {
    pub video_long: Tensor,
    pub heat_long: Tensor,
    pub video_short: Tensor,
    pub heat_short: Tensor,
}

fn frame_range(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = t.shape();
    let per: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = len;
    Ok(Tensor::new(
        &shape,
        t.data()[start * per..(start + len) * per].to_vec(),
    )?)
}

/// Cuts the long and short clips of `window`, renders their heatmaps and
/// applies the same crop rectangle to every frame of both modalities.
pub fn extract_clips(
    sample: &RawSample,
    window: &TemporalWindow,
    heatmap: &HeatmapConfig,
    rect: &CropRect,
) -> Result<ClipPair> {
    let w = window;
    if w.long_start + w.long_len > sample.raw_len() || sample.keypoints.len() != sample.raw_len() {
        return Err(Error::Length {
            needed: w.long_start + w.long_len,
            available: sample.raw_len().min(sample.keypoints.len()),
        });
    }
    if w.short_start < w.long_start || w.short_start + w.short_len > w.long_start + w.long_len {
        return Err(Error::Config(format!(
            "short window outside the long window: {w:?}"
        )));
    }
    let video = crop_resize(&sample.video_frames(w.long_start, w.long_len)?, rect)?;
    let heat = crop_resize(
        &stack_sequence(
            &sample.keypoints[w.long_start..w.long_start + w.long_len],
            heatmap,
        )?,
        rect,
    )?;
    let offset = w.short_start - w.long_start;
    Ok(ClipPair {
        video_short: frame_range(&video, offset, w.short_len)?,
        heat_short: frame_range(&heat, offset, w.short_len)?,
        video_long: video,
        heat_long: heat,
    })
}
