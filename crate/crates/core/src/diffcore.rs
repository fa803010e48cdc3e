//! Reverse-mode differentiation over the closed set of operations a small
//! residual CNN needs.
//!
//! A [`Tape`] records every operation in execution order. Image tensors use
//! NHWC layout and convolution kernels are `[3, 3, c_in, c_out]`. Calling
//! [`Tape::backward`] walks the tape in reverse, so each node's adjoint is
//! complete before it is propagated to its inputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy {
        input: Var,
        scalar: Var,
    },
    Sum(Var),
    Flatten(Var),
    GlobalAvgPool(Var),
    MaskMul {
        input: Var,
        factors: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Adjoint of any recorded node; zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.nodes[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("adjoint shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Adjoint of the parameter registered under `id`.
    pub fn param(&self, id: usize) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|&(_, var)| self.wrt(var))
    }

    /// All registered parameters as `(id, adjoint)`, in registration order.
    pub fn params(&self) -> Vec<(usize, Tensor)> {
        self.params.iter().map(|&(id, var)| (id, self.wrt(var))).collect()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op_name, value.data())?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Records a differentiable parameter identified by `id`.
    pub fn param(&mut self, id: usize, value: Tensor) -> Result<Var> {
        self.push("param", value, Op::Param(id))
    }

    /// 3x3 convolution with zero padding of one pixel. `input` is
    /// `[n, h, w, c_in]`, `kernel` is `[3, 3, c_in, c_out]`, `bias` is `[c_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::shape("conv2d", format!("unsupported stride {stride}")));
        }
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let (n, h, w, cin) = match *x.shape() {
            [n, h, w, c] => (n, h, w, c),
            ref s => return Err(Error::shape("conv2d", format!("input must be NHWC, got {s:?}"))),
        };
        let cout = match *k.shape() {
            [3, 3, ci, co] if ci == cin => co,
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {s:?} incompatible with {cin} input channels"),
                ))
            }
        };
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} != [{cout}]", b.shape()),
            ));
        }
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let (xd, kd, bd) = (x.data(), k.data(), b.data());
        let mut out = vec![0.0; n * oh * ow * cout];
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((ni * oh + oy) * ow + ox) * cout;
                    let acc = &mut out[o..o + cout];
                    acc.copy_from_slice(bd);
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xo = ((ni * h + iy as usize) * w + ix as usize) * cin;
                            let ko = (ky * 3 + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[xo + ci];
                                let krow = &kd[ko + ci * cout..ko + (ci + 1) * cout];
                                for (a, &kv) in acc.iter_mut().zip(krow) {
                                    *a += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, cout], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
        )
    }

    /// `input [n, d] x weight [d, k] + bias [k]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let (n, d) = match *x.shape() {
            [n, d] => (n, d),
            ref s => return Err(Error::shape("linear", format!("input must be 2-D, got {s:?}"))),
        };
        let k = match *wt.shape() {
            [wd, k] if wd == d => k,
            ref s => return Err(Error::shape("linear", format!("weight {s:?} vs input width {d}"))),
        };
        if b.shape() != [k] {
            return Err(Error::shape("linear", format!("bias {:?} != [{k}]", b.shape())));
        }
        let (xd, wd, bd) = (x.data(), wt.data(), b.data());
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let mut row = bd.to_vec();
            for j in 0..d {
                let xv = xd[i * d + j];
                for (r, &wv) in row.iter_mut().zip(&wd[j * k..(j + 1) * k]) {
                    *r += xv * wv;
                }
            }
            out.extend(row);
        }
        let value = Tensor::new(vec![n, k], out)?;
        self.push("linear", value, Op::Linear { input, weight, bias })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(input, factor))
    }

    /// Multiplication by a recorded one-element tensor (the residual gain).
    pub fn scale_by(&mut self, input: Var, scalar: Var) -> Result<Var> {
        let s = self.value(scalar);
        if !s.is_scalar() {
            return Err(Error::shape(
                "scale_by",
                format!("scalar has shape {:?}", s.shape()),
            ));
        }
        let s = s.data()[0];
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("scale_by", value, Op::ScaleBy { input, scalar })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(input))
    }

    /// `[n, ...] -> [n, rest]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape().first().copied().unwrap_or(1);
        let value = x.clone().reshape(vec![n, x.len() / n])?;
        self.push("flatten", value, Op::Flatten(input))
    }

    /// `[n, h, w, c] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, h, w, c) = match *x.shape() {
            [n, h, w, c] => (n, h, w, c),
            ref s => return Err(Error::shape("global_avg_pool", format!("need NHWC, got {s:?}"))),
        };
        let inv = 1.0 / (h * w) as f64;
        let xd = x.data();
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            let row = &mut out[ni * c..(ni + 1) * c];
            for p in 0..h * w {
                let o = (ni * h * w + p) * c;
                for (r, &v) in row.iter_mut().zip(&xd[o..o + c]) {
                    *r += v;
                }
            }
            row.iter_mut().for_each(|r| *r *= inv);
        }
        let value = Tensor::new(vec![n, c], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(input))
    }

    /// Multiplies by fixed per-element factors: a dropout mask with the
    /// `1 / (1 - p)` rescaling already folded in.
    pub fn mask_mul(&mut self, input: Var, factors: &Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != factors.shape() {
            return Err(Error::shape(
                "mask_mul",
                format!("mask {:?} vs input {:?}", factors.shape(), x.shape()),
            ));
        }
        let data = x.data().iter().zip(factors.data()).map(|(v, f)| v * f).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(
            "mask_mul",
            value,
            Op::MaskMul {
                input,
                factors: factors.data().to_vec(),
            },
        )
    }

    /// Mean softmax cross-entropy over the rows of `logits [n, k]`, with
    /// optional label smoothing towards the uniform distribution.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = match *z.shape() {
            [n, k] => (n, k),
            ref s => {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("need [n, k], got {s:?}"),
                ))
            }
        };
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} >= {k} classes"),
            ));
        }
        if !(0.0..=1.0).contains(&smoothing) {
            return Err(Error::config(format!(
                "label smoothing {smoothing} outside [0, 1]"
            )));
        }
        let zd = z.data();
        let mut probs = Vec::with_capacity(n * k);
        let mut targets = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &zd[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (j, &v) in row.iter().enumerate() {
                let t = if j == label { 1.0 - smoothing } else { 0.0 } + smoothing / k as f64;
                if t != 0.0 {
                    total -= t * (v - lse);
                }
                probs.push((v - lse).exp());
                targets.push(t);
            }
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            },
        )
    }

    /// Propagates adjoints from the scalar `loss` back through the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.nodes[loss.0].value.shape();
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                } => {
                    let (dx, dk, db) = conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        node.value.shape(),
                        &g,
                        *stride,
                    );
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *kernel, dk);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Linear { input, weight, bias } => {
                    let x = self.value(*input);
                    let wt = self.value(*weight);
                    let (n, d) = (x.shape()[0], x.shape()[1]);
                    let k = wt.shape()[1];
                    let (xd, wd) = (x.data(), wt.data());
                    let mut dx = vec![0.0; n * d];
                    let mut dw = vec![0.0; d * k];
                    let mut db = vec![0.0; k];
                    for r in 0..n {
                        let grow = &g[r * k..(r + 1) * k];
                        for (b, &gv) in db.iter_mut().zip(grow) {
                            *b += gv;
                        }
                        for j in 0..d {
                            let wrow = &wd[j * k..(j + 1) * k];
                            dx[r * d + j] = wrow.iter().zip(grow).map(|(w, g)| w * g).sum();
                            let xv = xd[r * d + j];
                            for (dwv, &gv) in dw[j * k..(j + 1) * k].iter_mut().zip(grow) {
                                *dwv += xv * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let dx = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *input, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a).data(), self.value(*b).data());
                    let da = g.iter().zip(y).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(x).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(input, factor) => {
                    let dx = g.iter().map(|&v| v * factor).collect();
                    accumulate(&mut grads, *input, dx);
                }
                Op::ScaleBy { input, scalar } => {
                    let s = self.value(*scalar).data()[0];
                    let x = self.value(*input).data();
                    let ds: f64 = g.iter().zip(x).map(|(g, x)| g * x).sum();
                    let dx = g.iter().map(|&v| v * s).collect();
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *scalar, vec![ds]);
                }
                Op::Sum(input) => {
                    let len = self.value(*input).len();
                    accumulate(&mut grads, *input, vec![g[0]; len]);
                }
                Op::Flatten(input) => accumulate(&mut grads, *input, g.clone()),
                Op::GlobalAvgPool(input) => {
                    let shape = self.value(*input).shape();
                    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                    let inv = 1.0 / (h * w) as f64;
                    let mut dx = vec![0.0; n * h * w * c];
                    for ni in 0..n {
                        for p in 0..h * w {
                            let o = (ni * h * w + p) * c;
                            for ci in 0..c {
                                dx[o + ci] = g[ni * c + ci] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::MaskMul { input, factors } => {
                    let dx = g.iter().zip(factors).map(|(g, f)| g * f).collect();
                    accumulate(&mut grads, *input, dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    targets,
                } => {
                    let n = self.value(*logits).shape()[0] as f64;
                    let scale = g[0] / n;
                    let dz = probs.iter().zip(targets).map(|(p, t)| (p - t) * scale).collect();
                    accumulate(&mut grads, *logits, dz);
                }
            }
            grads[i] = Some(g);
        }

        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            nodes: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    out_shape: &[usize],
    g: &[f64],
    stride: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow, cout) = (out_shape[1], out_shape[2], out_shape[3]);
    let (xd, kd) = (x.data(), k.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; cout];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((ni * oh + oy) * ow + ox) * cout;
                let grow = &g[o..o + cout];
                for (b, &gv) in db.iter_mut().zip(grow) {
                    *b += gv;
                }
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xo = ((ni * h + iy as usize) * w + ix as usize) * cin;
                        let ko = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xo + ci];
                            let kr = ko + ci * cout;
                            let mut acc = 0.0;
                            for co in 0..cout {
                                acc += kd[kr + co] * grow[co];
                                dk[kr + co] += xv * grow[co];
                            }
                            dx[xo + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn scale_by_zero_annihilates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.5, -2.0, 3.0, 7.0])).unwrap();
        let y = tape.scale(x, 0.0).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..2 * 4 * 5 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.leaf(t(&[2, 4, 5, 2], &img)).unwrap();
        let mut kernel = vec![0.0; 9 * 2 * 2];
        // centre tap, channel i -> channel i
        for c in 0..2 {
            kernel[(4 * 2 + c) * 2 + c] = 1.0;
        }
        let k = tape.leaf(t(&[3, 3, 2, 2], &kernel)).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2])).unwrap();
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), img.as_slice());
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 5, 4, 1], 1.0)).unwrap();
        let k = tape.leaf(Tensor::filled(&[3, 3, 1, 3], 1.0)).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3])).unwrap();
        let y = tape.conv2d(x, k, b, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 2, 3]);
        // top-left output sees a 2x2 corner of ones
        assert_eq!(tape.value(y).data()[0], 4.0);
    }

    #[test]
    fn linear_form_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.param(0, t(&[3], &[0.3, -1.0, 2.0])).unwrap();
        let x = tape.leaf(t(&[3], &[4.0, 5.0, -6.0])).unwrap();
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(0).unwrap().data(), &[4.0, 5.0, -6.0]);
    }

    #[test]
    fn uniform_softmax_gradient() {
        let mut tape = Tape::new();
        let z = tape.param(0, t(&[1, 2], &[0.0, 0.0])).unwrap();
        let loss = tape.softmax_cross_entropy(z, &[0], 0.0).unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(0).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(0, t(&[2], &[1.0, 2.0])).unwrap();
        let _b = tape.param(1, t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let loss = tape.sum(a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(1).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_requires_scalar_and_single_use() {
        let mut tape = Tape::new();
        let a = tape.param(0, t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
        let loss = tape.sum(a).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let big = tape.leaf(Tensor::filled(&[2], f64::MAX)).unwrap();
        assert!(matches!(tape.scale(big, 10.0), Err(Error::NonFinite { .. })));
    }
}
