//! Matrix products backing convolution and linear layers.
//!
//! Values are stored as `f64`. Under [`Precision::F32`] the operands of each
//! product are rounded to `f32`, multiplied with single-precision kernels and
//! widened back, which is what "32-bit training" means in this crate.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Row-major matrix view with an optional transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of this matrix, as seen by [`gemm`].
    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a · b + beta · c` with `c` row-major `m × n`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64, precision: Precision) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "inner extents differ");
    assert_eq!(c.len(), m * n, "output buffer has wrong size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    match precision {
        Precision::F64 => unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Precision::F32 => {
            let a32: Vec<f32> = a.data.iter().map(|&x| x as f32).collect();
            let b32: Vec<f32> = b.data.iter().map(|&x| x as f32).collect();
            let mut c32 = vec![0.0f32; m * n];
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    rsa,
                    csa,
                    b32.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for (dst, &src) in c.iter_mut().zip(&c32) {
                *dst = beta * *dst + f64::from(src);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(
            Mat::new(&a, m, k),
            Mat::new(&b, k, n),
            &mut c,
            0.0,
            Precision::F64,
        );
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // (bᵀ)ᵀ route: store b transposed and ask for its transpose.
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(
            Mat::new(&a, m, k),
            Mat::new(&bt, n, k).t(),
            &mut c2,
            1.0,
            Precision::F64,
        );
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_precision_is_close() {
        let a = vec![0.1, 0.2, 0.3, 0.4];
        let b = vec![1.0, -1.0, 0.5, 2.0];
        let mut c = vec![0.0; 4];
        gemm(
            Mat::new(&a, 2, 2),
            Mat::new(&b, 2, 2),
            &mut c,
            0.0,
            Precision::F32,
        );
        let want = naive(&a, &b, 2, 2, 2);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
