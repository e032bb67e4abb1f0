//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its output
//! value immediately and appends a node. [`Graph::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products. Inputs are never mutated.

use rayon::prelude::*;

use crate::conv::{self, ConvGeometry};
use crate::error::{arg_err, shape_err, Result};
use crate::gemm::{gemm, Mat, Precision};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    AvgPool {
        input: Var,
        window: [usize; 3],
    },
    GlobalAvgPool(Var),
    Relu(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Concat(Vec<Var>),
    SliceLast {
        input: Var,
        start: usize,
    },
    Add(Var, Var),
    Scale(Var, f64),
    BroadcastRows {
        rows: Var,
        table: Var,
    },
    Softmax(Var),
    SoftCrossEntropy {
        logits: Var,
        targets: Tensor,
    },
    WeightedSum {
        input: Var,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when the loss does
    /// not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[var.0], g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but returns zeros for unreached nodes.
    pub fn get_or_zero(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn is_zero_or_absent(&self, var: Var) -> bool {
        match &self.grads[var.0] {
            None => true,
            Some(g) => g.iter().all(|&x| x == 0.0),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

fn ext3(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf (gradients are tracked).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Direct 3D cross-correlation. `input` is `[B,T,H,W,Cin]`, `kernel` is
    /// `[kt,kh,kw,Cin,Cout]`, `bias` is `[Cout]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        geom.validate("conv3d")?;
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 5 || ks.len() != 5 {
            return shape_err(
                "conv3d",
                format!("input {xs:?} / kernel {ks:?} must be rank 5"),
            );
        }
        if ks[..3] != geom.kernel || ks[3] != xs[4] {
            return shape_err(
                "conv3d",
                format!("kernel {ks:?} incompatible with input {xs:?} and geometry {geom:?}"),
            );
        }
        let cout = ks[4];
        self.check_bias("conv3d", bias, cout)?;
        let out_ext = geom.forward_extent(ext3(&xs))?;
        let batch = xs[0];
        let cin = xs[4];
        let in_len: usize = xs[1..].iter().product();
        let pos: usize = out_ext.iter().product();
        let kc = geom.kernel_volume() * cin;
        let precision = self.precision;

        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = bias.map(|b| self.value(b).data());
        let per_sample: Vec<Vec<f64>> = (0..batch)
            .into_par_iter()
            .map(|s| {
                let mut cols = vec![0.0; pos * kc];
                conv::im2col(
                    &x[s * in_len..(s + 1) * in_len],
                    ext3(&xs),
                    cin,
                    &geom,
                    out_ext,
                    &mut cols,
                );
                let mut out = vec![0.0; pos * cout];
                if let Some(b) = b {
                    for row in out.chunks_mut(cout) {
                        row.copy_from_slice(b);
                    }
                }
                gemm(
                    Mat::new(&cols, pos, kc),
                    Mat::new(w, kc, cout),
                    &mut out,
                    1.0,
                    precision,
                );
                out
            })
            .collect();
        let value = Tensor::new(
            &[batch, out_ext[0], out_ext[1], out_ext[2], cout],
            per_sample.concat(),
        )?;
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Transposed 3D convolution (adjoint of [`Graph::conv3d`] with the same
    /// geometry). `kernel` is `[kt,kh,kw,Cout,Cin]`.
    pub fn conv_transpose3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        geom.validate("conv_transpose3d")?;
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 5 || ks.len() != 5 {
            return shape_err(
                "conv_transpose3d",
                format!("input {xs:?} / kernel {ks:?} must be rank 5"),
            );
        }
        if ks[..3] != geom.kernel || ks[4] != xs[4] {
            return shape_err(
                "conv_transpose3d",
                format!("kernel {ks:?} incompatible with input {xs:?} and geometry {geom:?}"),
            );
        }
        let cout = ks[3];
        let cin = xs[4];
        self.check_bias("conv_transpose3d", bias, cout)?;
        let in_ext = ext3(&xs);
        let out_ext = geom.transpose_extent(in_ext)?;
        let batch = xs[0];
        let in_pos: usize = in_ext.iter().product();
        let out_len: usize = out_ext.iter().product::<usize>() * cout;
        let kc = geom.kernel_volume() * cout;
        let precision = self.precision;

        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = bias.map(|b| self.value(b).data());
        let per_sample: Vec<Vec<f64>> = (0..batch)
            .into_par_iter()
            .map(|s| {
                let xb = &x[s * in_pos * cin..(s + 1) * in_pos * cin];
                let mut cols = vec![0.0; in_pos * kc];
                gemm(
                    Mat::new(xb, in_pos, cin),
                    Mat::new(w, kc, cin).t(),
                    &mut cols,
                    0.0,
                    precision,
                );
                let mut out = vec![0.0; out_len];
                conv::col2im(&cols, out_ext, cout, &geom, in_ext, &mut out);
                if let Some(b) = b {
                    for row in out.chunks_mut(cout) {
                        for (o, bb) in row.iter_mut().zip(b) {
                            *o += bb;
                        }
                    }
                }
                out
            })
            .collect();
        let value = Tensor::new(
            &[batch, out_ext[0], out_ext[1], out_ext[2], cout],
            per_sample.concat(),
        )?;
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::ConvTranspose {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err(op, format!("bias {:?} != [{cout}]", self.shape(b)));
            }
        }
        Ok(())
    }

    /// 2D convolution over `[B,H,W,C]` input with a `[kh,kw,Cin,Cout]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return shape_err(
                "conv2d",
                format!("input {xs:?} / kernel {ks:?} must be rank 4"),
            );
        }
        let x5 = self.reshape(input, &[xs[0], 1, xs[1], xs[2], xs[3]])?;
        let k5 = self.reshape(kernel, &[1, ks[0], ks[1], ks[2], ks[3]])?;
        let geom = ConvGeometry::new(
            [1, ks[0], ks[1]],
            [1, stride, stride],
            [0, padding, padding],
        );
        let y = self.conv3d(x5, k5, bias, geom)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[2], ys[3], ys[4]])
    }

    /// Transposed 2D convolution; the output extent is exactly `stride ×`
    /// the input extent for odd kernels with padding `k/2`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return shape_err(
                "conv_transpose2d",
                format!("input {xs:?} / kernel {ks:?} must be rank 4"),
            );
        }
        let x5 = self.reshape(input, &[xs[0], 1, xs[1], xs[2], xs[3]])?;
        let k5 = self.reshape(kernel, &[1, ks[0], ks[1], ks[2], ks[3]])?;
        let geom = ConvGeometry::new(
            [1, ks[0], ks[1]],
            [1, stride, stride],
            [0, padding, padding],
        )
        .with_exact_upsampling();
        let y = self.conv_transpose3d(x5, k5, bias, geom)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[2], ys[3], ys[4]])
    }

    /// 1D convolution over `[B,L,C]` input with a `[k,Cin,Cout]` kernel.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 3 || ks.len() != 3 {
            return shape_err(
                "conv1d",
                format!("input {xs:?} / kernel {ks:?} must be rank 3"),
            );
        }
        let x5 = self.reshape(input, &[xs[0], xs[1], 1, 1, xs[2]])?;
        let k5 = self.reshape(kernel, &[ks[0], 1, 1, ks[1], ks[2]])?;
        let geom = ConvGeometry::new([ks[0], 1, 1], [stride, 1, 1], [padding, 0, 0]);
        let y = self.conv3d(x5, k5, bias, geom)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[4]])
    }

    /// Transposed 1D convolution with exact `stride ×` upsampling.
    pub fn conv_transpose1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 3 || ks.len() != 3 {
            return shape_err(
                "conv_transpose1d",
                format!("input {xs:?} / kernel {ks:?} must be rank 3"),
            );
        }
        let x5 = self.reshape(input, &[xs[0], xs[1], 1, 1, xs[2]])?;
        let k5 = self.reshape(kernel, &[ks[0], 1, 1, ks[1], ks[2]])?;
        let geom = ConvGeometry::new([ks[0], 1, 1], [stride, 1, 1], [padding, 0, 0])
            .with_exact_upsampling();
        let y = self.conv_transpose3d(x5, k5, bias, geom)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[4]])
    }

    /// Non-overlapping average pooling over (T, H, W) of a `[B,T,H,W,C]` tensor.
    pub fn avg_pool3d(&mut self, input: Var, window: [usize; 3]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 5 {
            return shape_err("avg_pool3d", format!("input {xs:?} must be rank 5"));
        }
        for a in 0..3 {
            if window[a] == 0 || xs[a + 1] % window[a] != 0 {
                return shape_err(
                    "avg_pool3d",
                    format!("window {window:?} does not tile extent {xs:?}"),
                );
            }
        }
        let c = xs[4];
        let ext = ext3(&xs);
        let out_shape = [
            xs[0],
            xs[1] / window[0],
            xs[2] / window[1],
            xs[3] / window[2],
            c,
        ];
        let in_len: usize = xs[1..].iter().product();
        let out_len: usize = out_shape[1..].iter().product();
        let mut data = vec![0.0; xs[0] * out_len];
        let x = self.value(input).data();
        for s in 0..xs[0] {
            conv::avg_pool(
                &x[s * in_len..(s + 1) * in_len],
                ext,
                c,
                window,
                &mut data[s * out_len..(s + 1) * out_len],
            );
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::AvgPool { input, window },
            rg,
        ))
    }

    /// Mean over (T, H, W): `[B,T,H,W,C]` to `[B,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 5 {
            return shape_err("global_avg_pool", format!("input {xs:?} must be rank 5"));
        }
        let (b, c) = (xs[0], xs[4]);
        let n = xs[1] * xs[2] * xs[3];
        let x = self.value(input).data();
        let mut out = vec![0.0; b * c];
        for s in 0..b {
            let dst = &mut out[s * c..(s + 1) * c];
            for p in 0..n {
                let base = (s * n + p) * c;
                for (d, v) in dst.iter_mut().zip(&x[base..base + c]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|v| *v /= n as f64);
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&[b, c], out)?, Op::GlobalAvgPool(input), rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.max(0.0));
        let rg = self.rg(input);
        self.push(value, Op::Relu(input), rg)
    }

    /// `[R,Din] · [Din,Dout] + [Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return shape_err(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            );
        }
        let (rows, din, dout) = (xs[0], xs[1], ws[1]);
        self.check_bias("linear", bias, dout)?;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(b);
            }
        }
        gemm(
            Mat::new(self.value(input).data(), rows, din),
            Mat::new(self.value(weight).data(), din, dout),
            &mut out,
            1.0,
            self.precision,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&[rows, dout], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_last(&values)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat(inputs.to_vec()), rg))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let Some(&last) = xs.last() else {
            return shape_err("slice_last", "rank-0 input");
        };
        if start + len > last {
            return shape_err(
                "slice_last",
                format!("[{start}, {}) exceeds {last}", start + len),
            );
        }
        let pieces = self
            .value(input)
            .split_last(&[start, len, last - start - len])?;
        let rg = self.rg(input);
        Ok(self.push(pieces[1].clone(), Op::SliceLast { input, start }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|x| x * factor);
        let rg = self.rg(input);
        self.push(value, Op::Scale(input, factor), rg)
    }

    /// `out[b·N + n] = rows[b] + table[n]` for `rows: [B,D]`, `table: [N,D]`.
    pub fn broadcast_rows(&mut self, rows: Var, table: Var) -> Result<Var> {
        let (rs, ts) = (self.shape(rows).to_vec(), self.shape(table).to_vec());
        if rs.len() != 2 || ts.len() != 2 || rs[1] != ts[1] {
            return shape_err("broadcast_rows", format!("rows {rs:?} vs table {ts:?}"));
        }
        let (b, n, d) = (rs[0], ts[0], rs[1]);
        let r = self.value(rows).data();
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(b * n * d);
        for i in 0..b {
            for j in 0..n {
                out.extend(
                    r[i * d..(i + 1) * d]
                        .iter()
                        .zip(&t[j * d..(j + 1) * d])
                        .map(|(x, y)| x + y),
                );
            }
        }
        let rg = self.rg(rows) || self.rg(table);
        Ok(self.push(
            Tensor::new(&[b * n, d], out)?,
            Op::BroadcastRows { rows, table },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let Some(&n) = xs.last() else {
            return shape_err("softmax", "rank-0 input");
        };
        let mut data = self.value(input).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&xs, data)?, Op::Softmax(input), rg))
    }

    /// Soft-target cross entropy averaged over rows:
    /// `-(1/R) Σ_r Σ_i y[r,i] · log softmax(z[r])_i`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let zs = self.shape(logits).to_vec();
        if zs.len() != 2 || targets.shape() != zs.as_slice() {
            return shape_err(
                "soft_cross_entropy",
                format!("logits {zs:?} vs targets {:?}", targets.shape()),
            );
        }
        if zs[0] == 0 {
            return arg_err("soft_cross_entropy", "empty batch");
        }
        let (rows, n) = (zs[0], zs[1]);
        let z = self.value(logits).data();
        let y = targets.data();
        let mut total = 0.0;
        for r in 0..rows {
            let zr = &z[r * n..(r + 1) * n];
            let lse = log_sum_exp(zr);
            let row: f64 = y[r * n..(r + 1) * n]
                .iter()
                .zip(zr)
                .map(|(&yi, &zi)| if yi == 0.0 { 0.0 } else { -yi * (zi - lse) })
                .sum();
            total += row;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// `Σ x ⊙ w` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor) -> Result<Var> {
        if self.shape(input) != weights.shape() {
            return shape_err(
                "weighted_sum",
                format!("{:?} vs {:?}", self.shape(input), weights.shape()),
            );
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return arg_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            );
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(gout);
                continue;
            }
            self.propagate(&node.op, &node.value, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Reshape(x) => self.accumulate(grads, *x, |g| add_into(g, gout)),
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => self.conv_backward(*input, *kernel, *bias, geom, out, gout, grads),
            Op::ConvTranspose {
                input,
                kernel,
                bias,
                geom,
            } => self.conv_transpose_backward(*input, *kernel, *bias, geom, out, gout, grads),
            Op::AvgPool { input, window } => {
                let xs = self.shape(*input).to_vec();
                let in_len: usize = xs[1..].iter().product();
                let out_len = out.len() / xs[0];
                self.accumulate(grads, *input, |g| {
                    for s in 0..xs[0] {
                        conv::avg_pool_backward(
                            &gout[s * out_len..(s + 1) * out_len],
                            ext3(&xs),
                            xs[4],
                            *window,
                            &mut g[s * in_len..(s + 1) * in_len],
                        );
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x).to_vec();
                let (b, c) = (xs[0], xs[4]);
                let n = xs[1] * xs[2] * xs[3];
                self.accumulate(grads, *x, |g| {
                    for s in 0..b {
                        for p in 0..n {
                            let base = (s * n + p) * c;
                            for ch in 0..c {
                                g[base + ch] += gout[s * c + ch] / n as f64;
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((gi, &xi), &go) in g.iter_mut().zip(xv).zip(gout) {
                        if xi > 0.0 {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let ws = self.shape(*weight);
                let (rows, din, dout) = (xs[0], xs[1], ws[1]);
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let gy = Mat::new(gout, rows, dout);
                self.accumulate(grads, *input, |g| {
                    gemm(gy, Mat::new(w, din, dout).t(), g, 1.0, self.precision);
                });
                self.accumulate(grads, *weight, |g| {
                    gemm(Mat::new(x, rows, din).t(), gy, g, 1.0, self.precision);
                });
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |g| {
                        for row in gout.chunks(dout) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Concat(inputs) => {
                let width = *out.shape().last().unwrap();
                let rows = out.len() / width.max(1);
                let mut offset = 0;
                for &v in inputs {
                    let w = *self.shape(v).last().unwrap();
                    self.accumulate(grads, v, |g| {
                        for r in 0..rows {
                            add_into(
                                &mut g[r * w..(r + 1) * w],
                                &gout[r * width + offset..r * width + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast { input, start } => {
                let full = *self.shape(*input).last().unwrap();
                let w = *out.shape().last().unwrap();
                let rows = out.len() / w.max(1);
                self.accumulate(grads, *input, |g| {
                    for r in 0..rows {
                        add_into(
                            &mut g[r * full + start..r * full + start + w],
                            &gout[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gout));
                self.accumulate(grads, *b, |g| add_into(g, gout));
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += f * go;
                    }
                });
            }
            Op::BroadcastRows { rows, table } => {
                let (b, d) = (self.shape(*rows)[0], self.shape(*rows)[1]);
                let n = self.shape(*table)[0];
                self.accumulate(grads, *rows, |g| {
                    for i in 0..b {
                        for j in 0..n {
                            add_into(
                                &mut g[i * d..(i + 1) * d],
                                &gout[(i * n + j) * d..(i * n + j + 1) * d],
                            );
                        }
                    }
                });
                self.accumulate(grads, *table, |g| {
                    for i in 0..b {
                        for j in 0..n {
                            add_into(
                                &mut g[j * d..(j + 1) * d],
                                &gout[(i * n + j) * d..(i * n + j + 1) * d],
                            );
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().unwrap();
                let y = out.data();
                self.accumulate(grads, *x, |g| {
                    for ((gr, yr), gor) in g.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gor).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            gr[i] += yr[i] * (gor[i] - dot);
                        }
                    }
                });
            }
            Op::SoftCrossEntropy { logits, targets } => {
                let zs = self.shape(*logits);
                let (rows, n) = (zs[0], zs[1]);
                let z = self.value(*logits).data();
                let y = targets.data();
                let scale = gout[0] / rows as f64;
                self.accumulate(grads, *logits, |g| {
                    let mut p = vec![0.0; n];
                    for r in 0..rows {
                        p.copy_from_slice(&z[r * n..(r + 1) * n]);
                        softmax_in_place(&mut p);
                        let yr = &y[r * n..(r + 1) * n];
                        let mass: f64 = yr.iter().sum();
                        for i in 0..n {
                            g[r * n + i] += scale * (p[i] * mass - yr[i]);
                        }
                    }
                });
            }
            Op::WeightedSum { input, weights } => {
                self.accumulate(grads, *input, |g| {
                    for (gi, w) in g.iter_mut().zip(weights.data()) {
                        *gi += gout[0] * w;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: &ConvGeometry,
        out: &Tensor,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel);
        let (batch, cin, cout) = (xs[0], xs[4], ks[4]);
        let in_ext = ext3(&xs);
        let out_ext = ext3(out.shape());
        let pos: usize = out_ext.iter().product();
        let in_len: usize = xs[1..].iter().product();
        let kc = geom.kernel_volume() * cin;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let precision = self.precision;
        let need_x = self.rg(input);
        let need_w = self.rg(kernel);

        let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..batch)
            .into_par_iter()
            .map(|s| {
                let gy = &gout[s * pos * cout..(s + 1) * pos * cout];
                let dw = need_w.then(|| {
                    let mut cols = vec![0.0; pos * kc];
                    conv::im2col(
                        &x[s * in_len..(s + 1) * in_len],
                        in_ext,
                        cin,
                        geom,
                        out_ext,
                        &mut cols,
                    );
                    let mut dw = vec![0.0; kc * cout];
                    gemm(
                        Mat::new(&cols, pos, kc).t(),
                        Mat::new(gy, pos, cout),
                        &mut dw,
                        0.0,
                        precision,
                    );
                    dw
                });
                let dx = need_x.then(|| {
                    let mut dcols = vec![0.0; pos * kc];
                    gemm(
                        Mat::new(gy, pos, cout),
                        Mat::new(w, kc, cout).t(),
                        &mut dcols,
                        0.0,
                        precision,
                    );
                    let mut dx = vec![0.0; in_len];
                    conv::col2im(&dcols, in_ext, cin, geom, out_ext, &mut dx);
                    dx
                });
                (dw, dx)
            })
            .collect();

        self.accumulate(grads, kernel, |g| {
            for (dw, _) in &parts {
                if let Some(dw) = dw {
                    add_into(g, dw);
                }
            }
        });
        self.accumulate(grads, input, |g| {
            for (s, (_, dx)) in parts.iter().enumerate() {
                if let Some(dx) = dx {
                    add_into(&mut g[s * in_len..(s + 1) * in_len], dx);
                }
            }
        });
        if let Some(b) = bias {
            self.accumulate(grads, b, |g| {
                for row in gout.chunks(cout) {
                    add_into(g, row);
                }
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: &ConvGeometry,
        out: &Tensor,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel);
        let (batch, cin, cout) = (xs[0], xs[4], ks[3]);
        let in_ext = ext3(&xs);
        let out_ext = ext3(out.shape());
        let in_pos: usize = in_ext.iter().product();
        let out_len: usize = out_ext.iter().product::<usize>() * cout;
        let kc = geom.kernel_volume() * cout;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let precision = self.precision;
        let need_x = self.rg(input);
        let need_w = self.rg(kernel);

        let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..batch)
            .into_par_iter()
            .map(|s| {
                let gy = &gout[s * out_len..(s + 1) * out_len];
                let mut cols = vec![0.0; in_pos * kc];
                conv::im2col(gy, out_ext, cout, geom, in_ext, &mut cols);
                let xb = &x[s * in_pos * cin..(s + 1) * in_pos * cin];
                let dw = need_w.then(|| {
                    let mut dw = vec![0.0; kc * cin];
                    gemm(
                        Mat::new(&cols, in_pos, kc).t(),
                        Mat::new(xb, in_pos, cin),
                        &mut dw,
                        0.0,
                        precision,
                    );
                    dw
                });
                let dx = need_x.then(|| {
                    let mut dx = vec![0.0; in_pos * cin];
                    gemm(
                        Mat::new(&cols, in_pos, kc),
                        Mat::new(w, kc, cin),
                        &mut dx,
                        0.0,
                        precision,
                    );
                    dx
                });
                (dw, dx)
            })
            .collect();

        self.accumulate(grads, kernel, |g| {
            for (dw, _) in &parts {
                if let Some(dw) = dw {
                    add_into(g, dw);
                }
            }
        });
        self.accumulate(grads, input, |g| {
            let n = in_pos * cin;
            for (s, (_, dx)) in parts.iter().enumerate() {
                if let Some(dx) = dx {
                    add_into(&mut g[s * n..(s + 1) * n], dx);
                }
            }
        });
        if let Some(b) = bias {
            self.accumulate(grads, b, |g| {
                for row in gout.chunks(cout) {
                    add_into(g, row);
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
