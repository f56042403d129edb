//! Differentiable forward operations.

use crate::error::{Error, Result};
use crate::kernels::{self, Broadcast};
use crate::tensor::{numel, Float, Tensor};

use super::tape::{Op, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<'t, F: Float> Var<'t, F> {
    fn same_tape(&self, other: &Var<'t, F>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        self.tape.push(value, op, self.requires_grad(), None)
    }

    fn binary(&self, other: Var<'t, F>, kind: Binary) -> Result<Var<'t, F>> {
        self.same_tape(&other);
        let nodes = self.tape.nodes();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let out_shape = kernels::broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shapes(op_name, a.shape(), b.shape()))?;
        let ba = Broadcast::new(a.shape(), &out_shape);
        let bb = Broadcast::new(b.shape(), &out_shape);
        let (ad, bd) = (a.data(), b.data());
        let n = numel(&out_shape);
        let data: Vec<F> = match (&ba, &bb, kind) {
            (Broadcast::Same, Broadcast::Same, Binary::Add) => {
                ad.iter().zip(bd).map(|(&x, &y)| x + y).collect()
            }
            (Broadcast::Same, Broadcast::Same, Binary::Sub) => {
                ad.iter().zip(bd).map(|(&x, &y)| x - y).collect()
            }
            (Broadcast::Same, Broadcast::Same, Binary::Mul) => {
                ad.iter().zip(bd).map(|(&x, &y)| x * y).collect()
            }
            _ => (0..n)
                .map(|i| {
                    let (x, y) = (ad[ba.at(i)], bd[bb.at(i)]);
                    match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                    }
                })
                .collect(),
        };
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        let value = Tensor::new(&out_shape, data)?;
        let op = match kind {
            Binary::Add => Op::Add(self.id, other.id, ba, bb),
            Binary::Sub => Op::Sub(self.id, other.id, ba, bb),
            Binary::Mul => Op::Mul(self.id, other.id, ba, bb),
        };
        Ok(self.tape.push(value, op, rg, None))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, Binary::Mul)
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Var<'t, F> {
        let c = F::from_f64(c);
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            Tensor::new(x.shape(), x.data().iter().map(|&v| v * c).collect()).expect("same shape")
        };
        self.unary(value, Op::Scale(self.id, c))
    }

    /// Batched matrix product over the last two axes. The right operand may
    /// be a plain matrix shared across the batch.
    pub fn matmul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other);
        let nodes = self.tape.nodes();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        let plan = kernels::matmul_plan(a.shape(), b.shape())?;
        let data = kernels::matmul_forward(&plan, a.data(), b.data());
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        let value = Tensor::new(&plan.out_shape, data)?;
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id, plan), rg, None))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let value = self.tape.nodes()[self.id].value.reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, F>> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let mut sorted = perm.to_vec();
            sorted.sort_unstable();
            if sorted != (0..x.rank()).collect::<Vec<_>>() {
                return Err(Error::dim(
                    "permute",
                    format!("{perm:?} is not a permutation of rank {}", x.rank()),
                ));
            }
            let (data, shape) = kernels::permute(x.data(), x.shape(), perm);
            Tensor::new(&shape, data)?
        };
        Ok(self.unary(value, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Var<'t, F>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::dim("transpose", "rank below 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Broadcasts to a larger shape.
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            match kernels::broadcast_shape(x.shape(), shape) {
                Some(s) if s == shape => {}
                _ => return Err(Error::shapes("expand", x.shape(), shape)),
            }
            let b = Broadcast::new(x.shape(), shape);
            let data = (0..numel(shape)).map(|i| x.data()[b.at(i)]).collect();
            (Tensor::new(shape, data)?, b)
        };
        Ok(self.unary(value.0, Op::Expand(self.id, value.1)))
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&self) -> Var<'t, F> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let d = *x.shape().last().unwrap_or(&1);
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(d) {
                softmax_in_place(row);
            }
            Tensor::new(x.shape(), out).expect("same shape")
        };
        self.unary(value, Op::Softmax(self.id))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`
    /// and eps = 1e-5.
    pub fn layer_norm(&self, gamma: Var<'t, F>, beta: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        let g = &nodes[gamma.id].value;
        let b = &nodes[beta.id].value;
        let d = *x.shape().last().ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "affine shapes {:?}/{:?} do not match last dim {d}",
                    g.shape(),
                    b.shape()
                ),
            ));
        }
        let eps = F::from_f64(LAYER_NORM_EPS);
        let inv_d = F::from_f64(1.0 / d as f64);
        let rows = x.len() / d;
        let mut out = Vec::with_capacity(x.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in x.data().chunks(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rstd = F::one() / (var + eps).sqrt();
            for ((&v, &gv), &bv) in row.iter().zip(g.data()).zip(b.data()) {
                out.push((v - mean) * rstd * gv + bv);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = [self.id, gamma.id, beta.id]
            .iter()
            .any(|&i| nodes[i].requires_grad);
        let value = Tensor::new(x.shape(), out)?;
        drop(nodes);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: means,
                rstd: rstds,
            },
            rg,
            None,
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Var<'t, F> {
        let value = self.map(gelu_scalar);
        self.unary(value, Op::Gelu(self.id))
    }

    pub fn abs(&self) -> Var<'t, F> {
        let value = self.map(|v| v.abs());
        self.unary(value, Op::Abs(self.id))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&self) -> Var<'t, F> {
        let value = self.map(softplus_scalar);
        self.unary(value, Op::Softplus(self.id))
    }

    fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            if axis >= x.rank() {
                return Err(Error::dim("narrow", format!("axis {axis} out of range for {:?}", x.shape())));
            }
            let dim = x.shape()[axis];
            if len == 0 || start + len > dim {
                return Err(Error::dim(
                    "narrow",
                    format!("range {start}..{} out of bounds for axis of size {dim}", start + len),
                ));
            }
            let outer = numel(&x.shape()[..axis]);
            let inner = numel(&x.shape()[axis + 1..]);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * dim * inner;
                data.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        };
        Ok(self.unary(value, Op::Narrow { x: self.id, axis, start }))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t, F> {
        let s = self.tape.nodes()[self.id].value.data().iter().copied().sum::<F>();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t, F> {
        let n = self.tape.nodes()[self.id].value.len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, F>> {
        let nodes = self.tape.nodes();
        let x = &nodes[self.id].value;
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?} vs {} labels", x.shape(), labels.len()),
            ));
        }
        let c = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut total = F::zero();
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(row[0], F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            total += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let n = F::from_f64(labels.len() as f64);
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            None,
        ))
    }

    /// Euclidean distances between the rows of an `[N, d]` matrix.
    pub fn pairwise_distance(&self) -> Result<Var<'t, F>> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            if x.rank() != 2 {
                return Err(Error::dim("pairwise_distance", format!("expected [N, d], got {:?}", x.shape())));
            }
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![F::zero(); n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let (xi, xj) = (&x.data()[i * d..(i + 1) * d], &x.data()[j * d..(j + 1) * d]);
                    let sq = xi.iter().zip(xj).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>();
                    let dist = sq.sqrt();
                    out[i * n + j] = dist;
                    out[j * n + i] = dist;
                }
            }
            Tensor::new(&[n, n], out)?
        };
        Ok(self.unary(value, Op::PairwiseDistance(self.id)))
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather(&self, index: &[usize]) -> Result<Var<'t, F>> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            if index.is_empty() {
                return Err(Error::dim("gather", "empty index"));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
                return Err(Error::dim("gather", format!("index {bad} out of range {}", x.len())));
            }
            Tensor::new(&[index.len()], index.iter().map(|&i| x.data()[i]).collect())?
        };
        Ok(self.unary(value, Op::Gather { x: self.id, index: index.to_vec() }))
    }
}

/// Joins tensors along `axis`; all other dimensions must agree.
pub fn concat<'t, F: Float>(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
    let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
    let tape: &'t Tape<F> = first.tape;
    let (value, rg) = {
        let nodes = tape.nodes();
        let shape0 = nodes[first.id].value.shape().to_vec();
        if axis >= shape0.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {shape0:?}")));
        }
        let mut total = 0;
        for p in parts {
            assert!(std::ptr::eq(p.tape, tape), "operands recorded on different tapes");
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == shape0.len()
                && s.iter()
                    .zip(&shape0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shapes("concat", &shape0, s));
            }
            total += s[axis];
        }
        let outer = numel(&shape0[..axis]);
        let inner = numel(&shape0[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &nodes[p.id].value;
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = shape0;
        shape[axis] = total;
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        (Tensor::new(&shape, data)?, rg)
    };
    Ok(tape.push(
        value,
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        rg,
        None,
    ))
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(row[0], F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) fn gelu_scalar<F: Float>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_scalar<F: Float>(x: F) -> F {
    let cdf = F::from_f64(0.5) * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (F::from_f64(-0.5) * x * x).exp() * F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn softplus_scalar<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_scalar<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case_and_identity() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[19., 22., 43., 50.]);
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        assert_eq!(a.matmul(eye).unwrap().value(), a.value());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn softmax_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        assert_eq!(x.softmax().value().data(), &[0.5, 0.5]);
        let y = tape.constant(t(&[3], &[1., 2., 3.])).softmax().value();
        for (got, want) in y.data().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(t(&[3], &[1., 1., 1.]));
        let zeros = tape.constant(t(&[3], &[0., 0., 0.]));
        let c = tape.constant(t(&[3], &[5., 5., 5.]));
        assert_eq!(c.layer_norm(ones, zeros).unwrap().value().data(), &[0., 0., 0.]);

        let g2 = tape.constant(t(&[2], &[1., 1.]));
        let b2 = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.constant(t(&[2], &[1., 3.])).layer_norm(g2, b2).unwrap().value();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);

        let g0 = tape.constant(t(&[2], &[0., 0.]));
        let b7 = tape.constant(t(&[2], &[7., 7.]));
        let z = tape.constant(t(&[2], &[-4., 9.])).layer_norm(g0, b7).unwrap().value();
        assert_eq!(z.data(), &[7., 7.]);

        assert!(c.layer_norm(g2, b2).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(1.0f64) - 0.8413).abs() < 1e-3);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-6);
    }

    #[test]
    fn elementwise_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1., 2.]));
        assert_eq!(x.sub(x).unwrap().value().data(), &[0., 0.]);
        let y = tape.constant(t(&[2], &[3., 4.]));
        assert_eq!(x.add(y).unwrap().value().data(), &[4., 6.]);
        let two = tape.constant(t(&[1], &[2.]));
        let v = tape.constant(t(&[3], &[1., 2., 3.]));
        assert_eq!(v.mul(two).unwrap().value().data(), &[2., 4., 6.]);
        let bad = tape.constant(t(&[3], &[1., 2., 3.]));
        assert!(x.add(bad).is_err());
    }

    #[test]
    fn concat_and_narrow() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_f64(&[1, 4], &[1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[3, 4], &[0.5; 12]).unwrap());
        assert_eq!(concat(&[a], 0).unwrap().value(), a.value());
        let c = concat(&[a, b], 0).unwrap();
        assert_eq!(c.shape(), vec![4, 4]);
        assert_eq!(c.narrow(0, 0, 1).unwrap().value(), a.value());
        assert_eq!(c.narrow(0, 1, 3).unwrap().value(), b.value());
        assert!(concat(&[a, b], 2).is_err());
        let wrong = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(concat(&[a, wrong], 0).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::<f64>::new();
        let uniform = tape.constant(t(&[1, 2], &[0., 0.]));
        assert!((uniform.cross_entropy(&[1]).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        let skew = tape.constant(t(&[1, 2], &[0.25f64.ln(), 0.75f64.ln()]));
        assert!((skew.cross_entropy(&[1]).unwrap().item() - 0.2877).abs() < 1e-4);
        assert!(uniform.cross_entropy(&[2]).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus_scalar(-10.0f64) - 4.54e-5).abs() < 1e-7);
        assert!((softplus_scalar(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus_scalar(800.0f64) - 800.0).abs() < 1e-9);
    }
}
