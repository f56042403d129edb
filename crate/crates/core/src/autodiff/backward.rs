//! Vector-Jacobian products for every recorded op.

use crate::kernels;
use crate::tensor::{numel, Float};

use super::ops::{gelu_grad_scalar, sigmoid_scalar};
use super::tape::{Fault, Node, Op};

fn accumulate<F: Float>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], id: usize, g: Vec<F>) {
    if !nodes[id].requires_grad {
        return;
    }
    match grads[id].as_mut() {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => grads[id] = Some(g),
    }
}

fn wants<F>(nodes: &[Node<F>], id: usize) -> bool {
    nodes[id].requires_grad
}

pub(crate) fn propagate<F: Float>(
    nodes: &[Node<F>],
    id: usize,
    g: &[F],
    grads: &mut [Option<Vec<F>>],
    fault: Option<Fault>,
) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b, ba, bb) => {
            if wants(nodes, *a) {
                accumulate(nodes, grads, *a, ba.reduce(g, nodes[*a].value.len()));
            }
            if wants(nodes, *b) {
                accumulate(nodes, grads, *b, bb.reduce(g, nodes[*b].value.len()));
            }
        }
        Op::Sub(a, b, ba, bb) => {
            if wants(nodes, *a) {
                accumulate(nodes, grads, *a, ba.reduce(g, nodes[*a].value.len()));
            }
            if wants(nodes, *b) {
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                accumulate(nodes, grads, *b, bb.reduce(&neg, nodes[*b].value.len()));
            }
        }
        Op::Mul(a, b, ba, bb) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if wants(nodes, *a) {
                let ga: Vec<F> = g.iter().enumerate().map(|(i, &gi)| gi * bv[bb.at(i)]).collect();
                accumulate(nodes, grads, *a, ba.reduce(&ga, av.len()));
            }
            if wants(nodes, *b) {
                let gb: Vec<F> = g.iter().enumerate().map(|(i, &gi)| gi * av[ba.at(i)]).collect();
                accumulate(nodes, grads, *b, bb.reduce(&gb, bv.len()));
            }
        }
        Op::Scale(x, c) => {
            accumulate(nodes, grads, *x, g.iter().map(|&v| v * *c).collect());
        }
        Op::MatMul(a, b, plan) => {
            let (da, db) = kernels::matmul_backward(
                plan,
                nodes[*a].value.data(),
                nodes[*b].value.data(),
                g,
                wants(nodes, *a),
                wants(nodes, *b),
            );
            if let Some(da) = da {
                accumulate(nodes, grads, *a, da);
            }
            if let Some(db) = db {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Permute(x, perm) => {
            let (back, _) = kernels::permute(g, out.shape(), &kernels::inverse_permutation(perm));
            accumulate(nodes, grads, *x, back);
        }
        Op::Expand(x, b) => {
            accumulate(nodes, grads, *x, b.reduce(g, nodes[*x].value.len()));
        }
        Op::Softmax(x) => {
            let d = *out.shape().last().unwrap_or(&1);
            let mut dx = Vec::with_capacity(g.len());
            for (y, gy) in out.data().chunks(d).zip(g.chunks(d)) {
                let dot = y.iter().zip(gy).map(|(&a, &b)| a * b).sum::<F>();
                dx.extend(y.iter().zip(gy).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = nodes[*x].value.data();
            let gv = nodes[*gamma].value.data();
            let d = gv.len();
            let inv_d = F::from_f64(1.0 / d as f64);
            let mut dx = vec![F::zero(); xv.len()];
            let mut dgamma = vec![F::zero(); d];
            let mut dbeta = vec![F::zero(); d];
            for (r, (xrow, grow)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                let (m, s) = (mean[r], rstd[r]);
                let mut sum_dxhat = F::zero();
                let mut sum_dxhat_xhat = F::zero();
                for j in 0..d {
                    let xhat = (xrow[j] - m) * s;
                    let dxhat = grow[j] * gv[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[j] += grow[j] * xhat;
                    dbeta[j] += grow[j];
                }
                let drow = &mut dx[r * d..(r + 1) * d];
                for j in 0..d {
                    let xhat = (xrow[j] - m) * s;
                    let dxhat = grow[j] * gv[j];
                    drow[j] = s * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::Gelu(x) => {
            let scale = match fault {
                Some(Fault::GeluBackward) => F::from_f64(1.5),
                None => F::one(),
            };
            let xv = nodes[*x].value.data();
            accumulate(
                nodes,
                grads,
                *x,
                xv.iter()
                    .zip(g)
                    .map(|(&v, &gi)| gi * gelu_grad_scalar(v) * scale)
                    .collect(),
            );
        }
        Op::Abs(x) => {
            let xv = nodes[*x].value.data();
            accumulate(
                nodes,
                grads,
                *x,
                xv.iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        if v > F::zero() {
                            gi
                        } else if v < F::zero() {
                            -gi
                        } else {
                            F::zero()
                        }
                    })
                    .collect(),
            );
        }
        Op::Softplus(x) => {
            let xv = nodes[*x].value.data();
            accumulate(
                nodes,
                grads,
                *x,
                xv.iter().zip(g).map(|(&v, &gi)| gi * sigmoid_scalar(v)).collect(),
            );
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer = numel(&shape[..*axis]);
            let inner = numel(&shape[axis + 1..]);
            let total = shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                if wants(nodes, inp) {
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(nodes, grads, inp, part);
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = nodes[*x].value.shape();
            let dim = in_shape[*axis];
            let len = out.shape()[*axis];
            let outer = numel(&in_shape[..*axis]);
            let inner = numel(&in_shape[axis + 1..]);
            let mut dx = vec![F::zero(); nodes[*x].value.len()];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::SumAll(x) => {
            accumulate(nodes, grads, *x, vec![g[0]; nodes[*x].value.len()]);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = nodes[*logits].value.shape()[1];
            let scale = g[0] / F::from_f64(labels.len() as f64);
            let mut dx: Vec<F> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                dx[r * c + l] -= scale;
            }
            accumulate(nodes, grads, *logits, dx);
        }
        Op::PairwiseDistance(x) => {
            let xv = nodes[*x].value.data();
            let n = out.shape()[0];
            let d = xv.len() / n;
            let dist = out.data();
            let mut dx = vec![F::zero(); xv.len()];
            for i in 0..n {
                for j in 0..n {
                    let dij = dist[i * n + j];
                    if i == j || dij <= F::zero() {
                        continue;
                    }
                    // Each unordered pair appears twice; each visit moves row i.
                    let coef = (g[i * n + j] + g[j * n + i]) / dij;
                    for k in 0..d {
                        dx[i * d + k] += coef * (xv[i * d + k] - xv[j * d + k]);
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Gather { x, index } => {
            let mut dx = vec![F::zero(); nodes[*x].value.len()];
            for (&i, &gi) in index.iter().zip(g) {
                dx[i] += gi;
            }
            accumulate(nodes, grads, *x, dx);
        }
    }
}
