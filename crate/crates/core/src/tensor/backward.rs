use super::{Activation, Op, Tensor};
use crate::error::{Error, Result};

/// Gradient of the scalar `output` with respect to each tensor in `wrt`.
///
/// With `retain_graph` the backward rules are recorded on the same graph,
/// so the returned gradients are graph-attached and a scalar built from
/// them can be passed to `grad` again. Otherwise the results are detached.
pub fn grad(output: &Tensor, wrt: &[&Tensor], retain_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(Error::NotScalar(output.shape().to_vec()));
    }
    let out_ref = output.node.as_ref().ok_or(Error::Detached)?;
    let graph = out_ref.graph.clone();
    let out_id = out_ref.id;

    let mut targets = Vec::with_capacity(wrt.len());
    for (i, t) in wrt.iter().enumerate() {
        let n = t.node.as_ref().ok_or(Error::Unreachable(i))?;
        if !n.graph.same(&graph) {
            return Err(Error::GraphMismatch);
        }
        targets.push(n.id);
    }

    // Snapshot the op table up to the output; backward rules append nodes
    // past `out_id` and never touch this prefix.
    let (ops, inputs): (Vec<Op>, Vec<Vec<usize>>) = {
        let inner = graph.inner.borrow();
        inner.nodes[..=out_id]
            .iter()
            .map(|n| (n.op.clone(), n.inputs.clone()))
            .unzip()
    };

    // depends[i]: node i is a function of some target.
    let mut depends = vec![false; out_id + 1];
    for &t in &targets {
        if t <= out_id {
            depends[t] = true;
        }
    }
    let start = targets.iter().copied().min().unwrap_or(out_id + 1);
    for id in start..=out_id {
        if !depends[id] && inputs[id].iter().any(|&i| depends[i]) {
            depends[id] = true;
        }
    }
    // reaches[i]: output is a function of node i through dependent nodes.
    let mut reaches = vec![false; out_id + 1];
    reaches[out_id] = depends[out_id];
    for id in (0..=out_id).rev() {
        if reaches[id] {
            for &i in &inputs[id] {
                if depends[i] {
                    reaches[i] = true;
                }
            }
        }
    }
    for (i, &t) in targets.iter().enumerate() {
        if t > out_id || !reaches[t] {
            return Err(Error::Unreachable(i));
        }
    }

    let fetch = |id: usize| {
        let t = graph.node_tensor(id);
        if retain_graph {
            t
        } else {
            t.detach()
        }
    };

    let mut grads: Vec<Option<Tensor>> = vec![None; out_id + 1];
    grads[out_id] = Some(Tensor::ones(output.shape()));
    for id in (0..=out_id).rev() {
        if !reaches[id] || inputs[id].is_empty() {
            continue;
        }
        // Targets keep their accumulated value; everything else is released.
        let upstream = if targets.contains(&id) {
            grads[id].clone()
        } else {
            grads[id].take()
        };
        let Some(upstream) = upstream else { continue };
        let needs: Vec<bool> = inputs[id].iter().map(|&i| reaches[i]).collect();
        let ins: Vec<Tensor> = inputs[id].iter().map(|&i| fetch(i)).collect();
        let out = fetch(id);
        let contributions = vjp(&ops[id], &ins, &out, &upstream, &needs)?;
        for ((&input, contribution), need) in inputs[id].iter().zip(contributions).zip(needs) {
            if !need {
                continue;
            }
            let Some(c) = contribution else { continue };
            grads[input] = Some(match grads[input].take() {
                Some(acc) => acc.add(&c)?,
                None => c,
            });
        }
    }

    Ok(targets
        .iter()
        .zip(wrt)
        .map(|(&t, w)| grads[t].clone().unwrap_or_else(|| Tensor::zeros(w.shape())))
        .collect())
}

fn some_if(need: bool, f: impl FnOnce() -> Result<Tensor>) -> Result<Option<Tensor>> {
    if need {
        f().map(Some)
    } else {
        Ok(None)
    }
}

/// Vector-Jacobian products, written with recordable tensor ops so that
/// they can be differentiated again.
fn vjp(op: &Op, ins: &[Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let n0 = needs[0];
    let n1 = needs.get(1).copied().unwrap_or(false);
    Ok(match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), some_if(n1, || g.neg())?],
        Op::Mul => vec![
            some_if(n0, || g.mul(&ins[1]))?,
            some_if(n1, || g.mul(&ins[0]))?,
        ],
        Op::Div => {
            let ga = g.div(&ins[1])?;
            let gb = some_if(n1, || ga.mul(out)?.neg())?;
            vec![Some(ga), gb]
        }
        Op::Neg => vec![Some(g.neg()?)],
        Op::Scale(c) => vec![Some(g.scale(*c)?)],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::Square => vec![Some(g.mul(&ins[0])?.scale(2.0)?)],
        Op::Sqrt => vec![Some(g.div(out)?.scale(0.5)?)],
        Op::Exp => vec![Some(g.mul(out)?)],
        Op::MatMul => vec![
            some_if(n0, || g.matmul(&ins[1].transpose()?))?,
            some_if(n1, || ins[0].transpose()?.matmul(g))?,
        ],
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Reshape(_) => vec![Some(g.reshape(ins[0].shape())?)],
        Op::BroadcastTo(_) => vec![Some(g.sum_to(ins[0].shape())?)],
        Op::SumTo(_) => vec![Some(g.broadcast_to(ins[0].shape())?)],
        Op::Conv2d { stride, padding } => {
            let (x, k) = (&ins[0], &ins[1]);
            let (s, p) = (*stride, *padding);
            vec![
                some_if(n0, || g.conv2d_transpose(k, s, p, (x.shape()[2], x.shape()[3])))?,
                some_if(n1, || x.conv2d_kernel_grad(g, s, p, (k.shape()[2], k.shape()[3])))?,
            ]
        }
        Op::Conv2dTranspose {
            stride, padding, ..
        } => {
            // out = T(gy, k), x-shaped.
            let (gy, k) = (&ins[0], &ins[1]);
            let (s, p) = (*stride, *padding);
            vec![
                some_if(n0, || g.conv2d(k, s, p))?,
                some_if(n1, || g.conv2d_kernel_grad(gy, s, p, (k.shape()[2], k.shape()[3])))?,
            ]
        }
        Op::Conv2dKernelGrad {
            stride, padding, ..
        } => {
            // out = W(x, gy), kernel-shaped.
            let (x, gy) = (&ins[0], &ins[1]);
            let (s, p) = (*stride, *padding);
            vec![
                some_if(n0, || gy.conv2d_transpose(g, s, p, (x.shape()[2], x.shape()[3])))?,
                some_if(n1, || x.conv2d(g, s, p))?,
            ]
        }
        Op::Activation(kind) => {
            let gx = match kind {
                Activation::Identity => g.clone(),
                Activation::Sigmoid => g.mul(&out.mul(&out.neg()?.add_scalar(1.0)?)?)?,
                Activation::Tanh => g.mul(&out.square()?.neg()?.add_scalar(1.0)?)?,
                Activation::Relu => g.mul(&step_mask(&ins[0], 0.0))?,
                Activation::LeakyRelu(slope) => g.mul(&step_mask(&ins[0], *slope))?,
            };
            vec![Some(gx)]
        }
        Op::LogSoftmax => {
            let mut keep = ins[0].shape().to_vec();
            if let Some(last) = keep.last_mut() {
                *last = 1;
            }
            let row_sums = g.sum_to(&keep)?.broadcast_to(ins[0].shape())?;
            vec![Some(g.sub(&out.exp()?.mul(&row_sums)?)?)]
        }
    })
}

/// Derivative of the piecewise-linear units: 1 on positives, `slope`
/// elsewhere (subgradient `slope` at exactly zero).
fn step_mask(x: &Tensor, slope: f64) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { slope }).collect();
    Tensor::raw(x.shape.clone(), data)
}
