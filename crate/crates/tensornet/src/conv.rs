//! Channels-last 3D convolution kernels (`[T, H, W, C]` per sample).
//!
//! Both the direct and the transposed convolution are expressed through one
//! im2col / col2im pair. A direct convolution maps an `X`-space input to a
//! `Y`-space output; its transpose maps `Y` back onto `X` with the same
//! kernel footprint, which is exactly the adjoint of the direct map.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};

/// Kernel footprint, stride and padding along (T, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// Extra trailing extent added by a transposed convolution.
    #[serde(default)]
    pub output_padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            padding,
            output_padding: [0; 3],
        }
    }

    /// `k×k×k` kernel, unit stride, "same" padding (odd `k`).
    pub fn same(k: usize) -> Self {
        Self::new([k; 3], [1; 3], [k / 2; 3])
    }

    /// Per-frame spatial convolution: kernel `1×k×k`, stride `1×s×s`, padding `k/2`.
    pub fn spatial(k: usize, s: usize) -> Self {
        Self::new([1, k, k], [1, s, s], [0, k / 2, k / 2])
    }

    /// Per-position temporal convolution: kernel `k×1×1`, stride `s×1×1`, padding `k/2`.
    pub fn temporal(k: usize, s: usize) -> Self {
        Self::new([k, 1, 1], [s, 1, 1], [k / 2, 0, 0])
    }

    /// Output padding chosen so a stride-`s` transposed convolution multiplies
    /// the extent by exactly `s` (for odd kernels with padding `k/2`).
    pub fn with_exact_upsampling(mut self) -> Self {
        for a in 0..3 {
            self.output_padding[a] = if self.stride[a] > 1 {
                self.stride[a] + 2 * self.padding[a] - self.kernel[a]
            } else {
                0
            };
        }
        self
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self, op: &'static str) -> Result<()> {
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 {
                return arg_err(op, format!("zero kernel or stride in {self:?}"));
            }
            if self.output_padding[a] >= self.stride[a] && self.output_padding[a] > 0 {
                return arg_err(op, format!("output padding must be < stride in {self:?}"));
            }
        }
        Ok(())
    }

    /// Output extents of the direct convolution.
    pub fn forward_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return shape_err(
                    "conv",
                    format!("extent {:?} too small for kernel {:?}", input, self.kernel),
                );
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output extents of the transposed convolution.
    pub fn transpose_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] == 0 {
                return shape_err("conv_transpose", "zero input extent");
            }
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a] + self.output_padding[a];
            if full <= 2 * self.padding[a] {
                return shape_err(
                    "conv_transpose",
                    format!("padding {:?} consumes the whole output", self.padding),
                );
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

/// Unfolds one sample of `ext`-shaped `[T,H,W,C]` data into a
/// `(positions × kernel_volume·C)` matrix for the given output extents.
pub(crate) fn im2col(
    src: &[f64],
    ext: [usize; 3],
    channels: usize,
    geom: &ConvGeometry,
    out_ext: [usize; 3],
    cols: &mut [f64],
) {
    let [kt, kh, kw] = geom.kernel;
    let row_len = kt * kh * kw * channels;
    debug_assert_eq!(cols.len(), out_ext.iter().product::<usize>() * row_len);
    let mut row = 0;
    for to in 0..out_ext[0] {
        for ho in 0..out_ext[1] {
            for wo in 0..out_ext[2] {
                let dst = &mut cols[row * row_len..(row + 1) * row_len];
                let mut off = 0;
                for dt in 0..kt {
                    let ti = (to * geom.stride[0] + dt) as isize - geom.padding[0] as isize;
                    for dh in 0..kh {
                        let hi = (ho * geom.stride[1] + dh) as isize - geom.padding[1] as isize;
                        for dw in 0..kw {
                            let wi = (wo * geom.stride[2] + dw) as isize - geom.padding[2] as isize;
                            let seg = &mut dst[off..off + channels];
                            if ti < 0
                                || hi < 0
                                || wi < 0
                                || ti as usize >= ext[0]
                                || hi as usize >= ext[1]
                                || wi as usize >= ext[2]
                            {
                                seg.fill(0.0);
                            } else {
                                let base = ((ti as usize * ext[1] + hi as usize) * ext[2]
                                    + wi as usize)
                                    * channels;
                                seg.copy_from_slice(&src[base..base + channels]);
                            }
                            off += channels;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto `dst`.
pub(crate) fn col2im(
    cols: &[f64],
    ext: [usize; 3],
    channels: usize,
    geom: &ConvGeometry,
    out_ext: [usize; 3],
    dst: &mut [f64],
) {
    let [kt, kh, kw] = geom.kernel;
    let row_len = kt * kh * kw * channels;
    let mut row = 0;
    for to in 0..out_ext[0] {
        for ho in 0..out_ext[1] {
            for wo in 0..out_ext[2] {
                let srow = &cols[row * row_len..(row + 1) * row_len];
                let mut off = 0;
                for dt in 0..kt {
                    let ti = (to * geom.stride[0] + dt) as isize - geom.padding[0] as isize;
                    for dh in 0..kh {
                        let hi = (ho * geom.stride[1] + dh) as isize - geom.padding[1] as isize;
                        for dw in 0..kw {
                            let wi = (wo * geom.stride[2] + dw) as isize - geom.padding[2] as isize;
                            if ti >= 0
                                && hi >= 0
                                && wi >= 0
                                && (ti as usize) < ext[0]
                                && (hi as usize) < ext[1]
                                && (wi as usize) < ext[2]
                            {
                                let base = ((ti as usize * ext[1] + hi as usize) * ext[2]
                                    + wi as usize)
                                    * channels;
                                for (d, s) in dst[base..base + channels]
                                    .iter_mut()
                                    .zip(&srow[off..off + channels])
                                {
                                    *d += s;
                                }
                            }
                            off += channels;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Non-overlapping average pooling of one `[T,H,W,C]` sample.
pub(crate) fn avg_pool(src: &[f64], ext: [usize; 3], c: usize, win: [usize; 3], dst: &mut [f64]) {
    let out = [ext[0] / win[0], ext[1] / win[1], ext[2] / win[2]];
    let scale = 1.0 / (win[0] * win[1] * win[2]) as f64;
    dst.fill(0.0);
    for t in 0..ext[0] {
        for h in 0..ext[1] {
            for w in 0..ext[2] {
                let s = ((t * ext[1] + h) * ext[2] + w) * c;
                let d = (((t / win[0]) * out[1] + h / win[1]) * out[2] + w / win[2]) * c;
                for ch in 0..c {
                    dst[d + ch] += src[s + ch];
                }
            }
        }
    }
    dst.iter_mut().for_each(|x| *x *= scale);
}

pub(crate) fn avg_pool_backward(
    grad_out: &[f64],
    ext: [usize; 3],
    c: usize,
    win: [usize; 3],
    grad_in: &mut [f64],
) {
    let out = [ext[0] / win[0], ext[1] / win[1], ext[2] / win[2]];
    let scale = 1.0 / (win[0] * win[1] * win[2]) as f64;
    for t in 0..ext[0] {
        for h in 0..ext[1] {
            for w in 0..ext[2] {
                let s = ((t * ext[1] + h) * ext[2] + w) * c;
                let d = (((t / win[0]) * out[1] + h / win[1]) * out[2] + w / win[2]) * c;
                for ch in 0..c {
                    grad_in[s + ch] += grad_out[d + ch] * scale;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_two_halves_even_extents() {
        let g = ConvGeometry::spatial(3, 2);
        assert_eq!(g.forward_extent([4, 112, 112]).unwrap(), [4, 56, 56]);
        let t = ConvGeometry::temporal(3, 2).with_exact_upsampling();
        assert_eq!(t.output_padding, [1, 0, 0]);
        assert_eq!(t.transpose_extent([16, 5, 5]).unwrap(), [32, 5, 5]);
    }

    #[test]
    fn transpose_inverts_forward_shape_map() {
        let g = ConvGeometry::new([3, 3, 3], [2, 2, 2], [1, 1, 1]).with_exact_upsampling();
        for e in [2usize, 4, 8, 14] {
            let down = g.forward_extent([e, e, e]).unwrap();
            assert_eq!(g.transpose_extent(down).unwrap(), [e, e, e]);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let geom = ConvGeometry::new([2, 3, 3], [1, 2, 1], [1, 1, 0]);
        let ext = [3, 5, 4];
        let c = 2;
        let out = geom.forward_extent(ext).unwrap();
        let n_in = ext.iter().product::<usize>() * c;
        let n_cols = out.iter().product::<usize>() * geom.kernel_volume() * c;
        let x: Vec<f64> = (0..n_in).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let y: Vec<f64> = (0..n_cols).map(|i| ((i * 3 % 13) as f64) * 0.25).collect();
        let mut cols = vec![0.0; n_cols];
        im2col(&x, ext, c, &geom, out, &mut cols);
        let mut back = vec![0.0; n_in];
        col2im(&y, ext, c, &geom, out, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
