//! Reverse-mode differentiation over the recorded graph.
//!
//! Every backward rule is written with the same differentiable tensor
//! operations used in the forward pass. Running the backward pass with
//! `create_graph = true` therefore records the gradient computation itself,
//! and the resulting gradients can be differentiated again. This is what
//! the gradient penalty of a Wasserstein critic needs.

use std::collections::{HashMap, HashSet};

use crate::tensor::{with_grad_mode, Op, Tensor};

/// Gradients keyed by tensor identity.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Gradients of a scalar `loss` with respect to every tracked leaf.
pub fn backward(loss: &Tensor) -> Gradients {
    assert_eq!(loss.numel(), 1, "backward() needs a scalar loss, got {:?}", loss.shape());
    let seed = Tensor::ones(loss.shape());
    Gradients { map: run(loss, seed, &HashSet::new(), false) }
}

/// Gradients of `sum(output)` with respect to each tensor in `wrt`.
///
/// With `create_graph`, the returned gradients are themselves tracked and
/// can be fed into further differentiable computation. Entries are `None`
/// when `output` does not depend on the corresponding tensor.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Option<Tensor>> {
    let seed = Tensor::ones(output.shape());
    let keep: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let mut map = run(output, seed, &keep, create_graph);
    wrt.iter().map(|t| map.remove(&t.id())).collect()
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = t.op() {
            for input in op.inputs() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

fn run(root: &Tensor, seed: Tensor, keep: &HashSet<u64>, create_graph: bool) -> HashMap<u64, Tensor> {
    let mut out = HashMap::new();
    if !root.requires_grad() {
        return out;
    }
    with_grad_mode(create_graph, || {
        let order = topo_order(root);
        let mut pending: HashMap<u64, Tensor> = HashMap::new();
        pending.insert(root.id(), seed);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if node.is_leaf() || keep.contains(&node.id()) {
                out.insert(node.id(), g.clone());
            }
            let Some(op) = node.op() else {
                continue;
            };
            for (input, gi) in input_grads(node, op, &g) {
                match pending.remove(&input.id()) {
                    Some(prev) => pending.insert(input.id(), prev.add(&gi)),
                    None => pending.insert(input.id(), gi),
                };
            }
        }
    });
    out
}

fn input_grads(y: &Tensor, op: &Op, g: &Tensor) -> Vec<(Tensor, Tensor)> {
    let mut res = Vec::new();
    let mut push = |t: &Tensor, f: &dyn Fn() -> Tensor| {
        if t.requires_grad() {
            res.push((t.clone(), f()));
        }
    };
    match op {
        Op::Add(a, b) => {
            push(a, &|| g.clone());
            push(b, &|| g.clone());
        }
        Op::Sub(a, b) => {
            push(a, &|| g.clone());
            push(b, &|| g.neg());
        }
        Op::Mul(a, b) => {
            push(a, &|| g.mul(b));
            push(b, &|| g.mul(a));
        }
        Op::Scale(a, c) => push(a, &|| g.scale(*c)),
        Op::AddScalar(a) => push(a, &|| g.clone()),
        Op::Square(a) => push(a, &|| g.mul(a).scale(2.0)),
        Op::Sqrt(a) => push(a, &|| g.mul(&y.recip()).scale(0.5)),
        Op::Recip(a) => push(a, &|| g.mul(&y.square()).neg()),
        Op::Exp(a) => push(a, &|| g.mul(y)),
        Op::Ln(a) => push(a, &|| g.mul(&a.recip())),
        Op::Tanh(a) => push(a, &|| g.mul(&y.square().neg().add_scalar(1.0))),
        Op::Sigmoid(a) => push(a, &|| g.mul(&y.mul(&y.neg().add_scalar(1.0)))),
        Op::Masked(a, mask) => push(a, &|| g.mul_mask(mask.clone())),
        Op::SumAll(a) => push(a, &|| g.broadcast_scalar(a.shape())),
        Op::BroadcastScalar(a) => push(a, &|| g.sum_all().reshape(a.shape())),
        Op::Reshape(a) => push(a, &|| g.reshape(a.shape())),
        Op::MatMul { a, b, ta, tb } => {
            let (ta, tb) = (*ta, *tb);
            push(a, &|| if ta { b.matmul_t(g, tb, true) } else { g.matmul_t(b, false, !tb) });
            push(b, &|| if tb { g.matmul_t(a, true, ta) } else { a.matmul_t(g, !ta, false) });
        }
        Op::ChannelSum(a) => push(a, &|| g.channel_broadcast(a.shape())),
        Op::ChannelBroadcast(a) => push(a, &|| g.channel_sum()),
        Op::SpatialSum(a) => push(a, &|| {
            let (_, _, h, w) = a.dims4();
            g.spatial_broadcast(h, w)
        }),
        Op::SpatialBroadcast(a) => push(a, &|| g.spatial_sum()),
        Op::SampleSum(a) => push(a, &|| g.sample_broadcast(a.shape())),
        Op::SampleBroadcast(a) => push(a, &|| g.sample_sum()),
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let c = p.shape()[1];
                push(p, &|| g.narrow(offset, c));
                offset += c;
            }
        }
        Op::Narrow { input, start } => push(input, &|| g.pad_channels(*start, input.shape()[1])),
        Op::PadChannels { input, start } => push(input, &|| g.narrow(*start, input.shape()[1])),
        Op::Conv2d { x, w, stride, pad } => {
            let (_, _, h, wd) = x.dims4();
            let k = w.shape()[2];
            push(x, &|| g.conv_transpose2d_sized(w, *stride, *pad, h, wd));
            push(w, &|| Tensor::conv_weight_grad(x, g, k, *stride, *pad));
        }
        Op::ConvTranspose2d { x, w, stride, pad } => {
            let k = w.shape()[2];
            push(x, &|| g.conv2d(w, *stride, *pad));
            push(w, &|| Tensor::conv_weight_grad(g, x, k, *stride, *pad));
        }
        Op::ConvWeightGrad { x, g: gout, stride, pad } => {
            let (_, _, h, wd) = x.dims4();
            push(x, &|| gout.conv_transpose2d_sized(g, *stride, *pad, h, wd));
            push(gout, &|| x.conv2d(g, *stride, *pad));
        }
    }
    res
}
