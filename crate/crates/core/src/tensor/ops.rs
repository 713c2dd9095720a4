use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Activation, Graph, Op, Tensor};
use crate::error::{Error, Result};

pub(crate) struct Operand<'a> {
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn unary(x: &Operand<'_>, f: impl Fn(f64) -> f64) -> (Rc<[usize]>, Vec<f64>) {
    (x.shape.into(), x.data.iter().map(|&v| f(v)).collect())
}

fn binary(
    name: &'static str,
    a: &Operand<'_>,
    b: &Operand<'_>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Rc<[usize]>, Vec<f64>)> {
    if a.shape != b.shape {
        return Err(mismatch(name, a.shape, b.shape));
    }
    Ok((
        a.shape.into(),
        a.data.iter().zip(b.data).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Sigmoid => sigmoid(x),
        Activation::Tanh => x.tanh(),
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::LeakyRelu(slope) => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        Activation::Identity => x,
    }
}

fn conv_geom(x: &[usize], k: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
        return Err(mismatch("conv2d", x, k));
    }
    let out_h = ConvGeom::output_extent(x[2], k[2], stride, padding);
    let out_w = ConvGeom::output_extent(x[3], k[3], stride, padding);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(mismatch("conv2d", x, k));
    };
    Ok(ConvGeom {
        batch: x[0],
        in_channels: x[1],
        out_channels: k[0],
        in_h: x[2],
        in_w: x[3],
        k_h: k[2],
        k_w: k[3],
        out_h,
        out_w,
        stride,
        padding,
    })
}

fn broadcast_compatible(small: &[usize], big: &[usize]) -> bool {
    small.is_empty()
        || (small.len() == big.len() && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1))
}

/// Forward evaluation of a single op. Used both when recording and when
/// replaying a graph.
pub(crate) fn evaluate(op: &Op, ins: &[Operand<'_>]) -> Result<(Rc<[usize]>, Vec<f64>)> {
    Ok(match op {
        Op::Leaf | Op::Constant => unreachable!("leaves are never evaluated"),
        Op::Add => binary("add", &ins[0], &ins[1], |a, b| a + b)?,
        Op::Sub => binary("sub", &ins[0], &ins[1], |a, b| a - b)?,
        Op::Mul => binary("mul", &ins[0], &ins[1], |a, b| a * b)?,
        Op::Div => binary("div", &ins[0], &ins[1], |a, b| a / b)?,
        Op::Neg => unary(&ins[0], |v| -v),
        Op::Scale(c) => unary(&ins[0], |v| c * v),
        Op::AddScalar(c) => unary(&ins[0], |v| v + c),
        Op::Square => unary(&ins[0], |v| v * v),
        Op::Sqrt => unary(&ins[0], f64::sqrt),
        Op::Exp => unary(&ins[0], f64::exp),
        Op::Activation(kind) => unary(&ins[0], |v| activate(*kind, v)),
        Op::MatMul => {
            let (a, b) = (&ins[0], &ins[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(mismatch("matmul", a.shape, b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (Rc::from([m, n]), kernels::matmul(a.data, b.data, m, k, n))
        }
        Op::Transpose => {
            let a = &ins[0];
            if a.shape.len() != 2 {
                return Err(mismatch("transpose", a.shape, &[]));
            }
            (
                Rc::from([a.shape[1], a.shape[0]]),
                kernels::transpose(a.data, a.shape[0], a.shape[1]),
            )
        }
        Op::Reshape(to) => {
            if to.iter().product::<usize>() != ins[0].data.len() {
                return Err(mismatch("reshape", ins[0].shape, to));
            }
            (to.clone(), ins[0].data.to_vec())
        }
        Op::BroadcastTo(to) => {
            if !broadcast_compatible(ins[0].shape, to) {
                return Err(mismatch("broadcast_to", ins[0].shape, to));
            }
            (to.clone(), kernels::broadcast_to(ins[0].data, ins[0].shape, to))
        }
        Op::SumTo(to) => {
            if !broadcast_compatible(to, ins[0].shape) {
                return Err(mismatch("sum_to", ins[0].shape, to));
            }
            (to.clone(), kernels::sum_to(ins[0].data, ins[0].shape, to))
        }
        Op::Conv2d { stride, padding } => {
            let g = conv_geom(ins[0].shape, ins[1].shape, *stride, *padding)?;
            (
                Rc::from([g.batch, g.out_channels, g.out_h, g.out_w]),
                kernels::conv2d(ins[0].data, ins[1].data, &g),
            )
        }
        Op::Conv2dTranspose {
            stride,
            padding,
            in_h,
            in_w,
        } => {
            let (gy, k) = (&ins[0], &ins[1]);
            if gy.shape.len() != 4 || k.shape.len() != 4 || gy.shape[1] != k.shape[0] {
                return Err(mismatch("conv2d_transpose", gy.shape, k.shape));
            }
            let xs = [gy.shape[0], k.shape[1], *in_h, *in_w];
            let g = conv_geom(&xs, k.shape, *stride, *padding)?;
            if g.out_h != gy.shape[2] || g.out_w != gy.shape[3] {
                return Err(mismatch("conv2d_transpose", gy.shape, k.shape));
            }
            (xs.into(), kernels::conv2d_transpose(gy.data, k.data, &g))
        }
        Op::Conv2dKernelGrad {
            stride,
            padding,
            k_h,
            k_w,
        } => {
            let (x, gy) = (&ins[0], &ins[1]);
            if x.shape.len() != 4 || gy.shape.len() != 4 || x.shape[0] != gy.shape[0] {
                return Err(mismatch("conv2d_kernel_grad", x.shape, gy.shape));
            }
            let ks = [gy.shape[1], x.shape[1], *k_h, *k_w];
            let g = conv_geom(x.shape, &ks, *stride, *padding)?;
            if g.out_h != gy.shape[2] || g.out_w != gy.shape[3] {
                return Err(mismatch("conv2d_kernel_grad", x.shape, gy.shape));
            }
            (ks.into(), kernels::conv2d_kernel_grad(x.data, gy.data, &g))
        }
        Op::LogSoftmax => {
            let x = &ins[0];
            let Some(&cols) = x.shape.last() else {
                return Err(mismatch("log_softmax", x.shape, &[]));
            };
            if cols == 0 {
                return Err(mismatch("log_softmax", x.shape, &[]));
            }
            (x.shape.into(), kernels::log_softmax(x.data, cols))
        }
    })
}

/// Evaluates `op` and, if any input is graph-attached, records it.
pub(crate) fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let operands: Vec<Operand<'_>> = inputs
        .iter()
        .map(|t| Operand {
            shape: &t.shape,
            data: &t.data,
        })
        .collect();
    let (shape, value) = evaluate(&op, &operands)?;

    let mut graph: Option<&Graph> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match graph {
                None => graph = Some(&n.graph),
                Some(g) if !g.same(&n.graph) => return Err(Error::GraphMismatch),
                Some(_) => {}
            }
        }
    }
    let Some(graph) = graph else {
        return Ok(Tensor::raw(shape, value));
    };
    let ids = inputs
        .iter()
        .map(|t| match &t.node {
            Some(n) => n.id,
            None => graph.push(Op::Constant, vec![], t.shape.clone(), t.data.clone()).node_id(),
        })
        .collect();
    Ok(graph.push(op, ids, shape, Rc::new(value)))
}

impl Tensor {
    pub(crate) fn node_id(&self) -> usize {
        self.node.as_ref().expect("attached tensor").id
    }

    /// Expands a rank-0 operand so elementwise ops see equal shapes.
    fn align(&self, other: &Tensor) -> Result<(Tensor, Tensor)> {
        if self.shape == other.shape {
            Ok((self.clone(), other.clone()))
        } else if other.shape.is_empty() {
            Ok((self.clone(), other.broadcast_to(&self.shape)?))
        } else if self.shape.is_empty() {
            Ok((self.broadcast_to(&other.shape)?, other.clone()))
        } else {
            Err(mismatch("elementwise", &self.shape, &other.shape))
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other)?;
        apply(Op::Add, &[&a, &b])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other)?;
        apply(Op::Sub, &[&a, &b])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other)?;
        apply(Op::Mul, &[&a, &b])
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other)?;
        apply(Op::Div, &[&a, &b])
    }

    pub fn neg(&self) -> Result<Tensor> {
        apply(Op::Neg, &[self])
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        apply(Op::Scale(c), &[self])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        apply(Op::AddScalar(c), &[self])
    }

    pub fn square(&self) -> Result<Tensor> {
        apply(Op::Square, &[self])
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        apply(Op::Sqrt, &[self])
    }

    pub fn exp(&self) -> Result<Tensor> {
        apply(Op::Exp, &[self])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        apply(Op::MatMul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        apply(Op::Transpose, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if *self.shape == *shape {
            return Ok(self.clone());
        }
        apply(Op::Reshape(shape.into()), &[self])
    }

    /// Repeats axes of extent 1 (or a rank-0 value) up to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if *self.shape == *shape {
            return Ok(self.clone());
        }
        apply(Op::BroadcastTo(shape.into()), &[self])
    }

    /// Sums over the axes where `shape` has extent 1; rank-0 `shape` sums
    /// everything.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if *self.shape == *shape {
            return Ok(self.clone());
        }
        apply(Op::SumTo(shape.into()), &[self])
    }

    pub fn sum(&self) -> Result<Tensor> {
        apply(Op::SumTo(Rc::from([])), &[self])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Cross-correlation of a `[C,H,W]` or `[N,C,H,W]` input with
    /// `[C_out,C,kh,kw]` kernels.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.shape.len() == 3 {
            let s = &self.shape;
            let x4 = self.reshape(&[1, s[0], s[1], s[2]])?;
            let y = apply(Op::Conv2d { stride, padding }, &[&x4, kernels])?;
            let ys = y.shape().to_vec();
            return y.reshape(&ys[1..]);
        }
        apply(Op::Conv2d { stride, padding }, &[self, kernels])
    }

    pub(crate) fn conv2d_transpose(
        &self,
        kernels: &Tensor,
        stride: usize,
        padding: usize,
        in_hw: (usize, usize),
    ) -> Result<Tensor> {
        apply(
            Op::Conv2dTranspose {
                stride,
                padding,
                in_h: in_hw.0,
                in_w: in_hw.1,
            },
            &[self, kernels],
        )
    }

    pub(crate) fn conv2d_kernel_grad(
        &self,
        grad_out: &Tensor,
        stride: usize,
        padding: usize,
        k_hw: (usize, usize),
    ) -> Result<Tensor> {
        apply(
            Op::Conv2dKernelGrad {
                stride,
                padding,
                k_h: k_hw.0,
                k_w: k_hw.1,
            },
            &[self, grad_out],
        )
    }

    pub fn activation(&self, kind: Activation) -> Result<Tensor> {
        if kind == Activation::Identity {
            return Ok(self.clone());
        }
        apply(Op::Activation(kind), &[self])
    }

    /// Log-softmax along the trailing axis.
    pub fn log_softmax(&self) -> Result<Tensor> {
        apply(Op::LogSoftmax, &[self])
    }

    pub fn softmax(&self) -> Result<Tensor> {
        self.log_softmax()?.exp()
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
///
/// `logits` is `[C]` (one label) or `[B, C]` (one label per row).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, classes) = match logits.shape() {
        [c] => (1, *c),
        [b, c] => (*b, *c),
        s => return Err(mismatch("softmax_cross_entropy", s, &[])),
    };
    if labels.len() != rows {
        return Err(mismatch("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let mut onehot = vec![0.0; rows * classes];
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        onehot[r * classes + label] = 1.0;
    }
    let onehot = Tensor::raw(logits.shape.clone(), onehot);
    logits
        .log_softmax()?
        .mul(&onehot)?
        .sum()?
        .scale(-1.0 / rows as f64)
}
