//! Raw buffer kernels shared by the autodiff ops.
//!
//! Matrix products split work over output rows only, so every output element
//! is accumulated in the same order whatever the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{numel, Float};

const PAR_THRESHOLD: usize = 1 << 15;

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<F: Float>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    let row = |(i, crow): (usize, &mut [F])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<F: Float>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    let row = |(i, crow): (usize, &mut [F])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *cv += acc;
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn gemm_tn<F: Float>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    let row = |(i, crow): (usize, &mut [F])| {
        for p in 0..m {
            let av = a[p * k + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Layout of a (possibly batched) matrix product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// The right operand is a single matrix shared by every batch entry.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

pub fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shapes("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shapes("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_rhs = b_batch.iter().all(|&d| d == 1);
    if !shared_rhs && a_batch != b_batch {
        return Err(Error::shapes("matmul", a, b));
    }
    let mut out_shape = a_batch.to_vec();
    if a_batch.is_empty() && !b_batch.is_empty() {
        out_shape = b_batch.to_vec();
        if !shared_rhs {
            return Err(Error::shapes("matmul", a, b));
        }
    }
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        batch: numel(a_batch),
        m,
        k,
        n,
        shared_rhs,
        out_shape,
    })
}

pub fn matmul_forward<F: Float>(plan: &MatmulPlan, a: &[F], b: &[F]) -> Vec<F> {
    let MatmulPlan { batch, m, k, n, .. } = *plan;
    let mut out = vec![F::zero(); batch * m * n];
    if plan.shared_rhs {
        gemm_nn(batch * m, k, n, a, b, &mut out);
    } else {
        for bi in 0..batch {
            gemm_nn(
                m,
                k,
                n,
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }
    out
}

/// Returns `(dA, dB)` for `C = A·B` given `dC`.
pub fn matmul_backward<F: Float>(
    plan: &MatmulPlan,
    a: &[F],
    b: &[F],
    dc: &[F],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let MatmulPlan { batch, m, k, n, .. } = *plan;
    let mut da = need_a.then(|| vec![F::zero(); a.len()]);
    let mut db = need_b.then(|| vec![F::zero(); b.len()]);
    if plan.shared_rhs {
        if let Some(da) = da.as_mut() {
            gemm_nt(batch * m, n, k, dc, b, da);
        }
        if let Some(db) = db.as_mut() {
            gemm_tn(batch * m, k, n, a, dc, db);
        }
    } else {
        for bi in 0..batch {
            let a_s = &a[bi * m * k..(bi + 1) * m * k];
            let b_s = &b[bi * k * n..(bi + 1) * k * n];
            let dc_s = &dc[bi * m * n..(bi + 1) * m * n];
            if let Some(da) = da.as_mut() {
                gemm_nt(m, n, k, dc_s, b_s, &mut da[bi * m * k..(bi + 1) * m * k]);
            }
            if let Some(db) = db.as_mut() {
                gemm_tn(m, k, n, a_s, dc_s, &mut db[bi * k * n..(bi + 1) * k * n]);
            }
        }
    }
    (da, db)
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape` (in row-major order), the offset of the
/// corresponding element in an input of shape `in_shape` broadcast to it.
pub fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + pad] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let total = numel(out_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// How an input maps onto a broadcast output.
#[derive(Debug, Clone)]
pub enum Broadcast {
    Same,
    /// Input repeats every `len` output elements (input shape is a suffix).
    Cycle(usize),
    Offsets(Vec<usize>),
}

impl Broadcast {
    pub fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        if in_shape == out_shape {
            return Broadcast::Same;
        }
        let trimmed: &[usize] = {
            let lead = in_shape.iter().take_while(|&&d| d == 1).count();
            &in_shape[lead..]
        };
        if out_shape.ends_with(trimmed) {
            return Broadcast::Cycle(numel(trimmed));
        }
        Broadcast::Offsets(broadcast_offsets(in_shape, out_shape))
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cycle(len) => i % len,
            Broadcast::Offsets(o) => o[i],
        }
    }

    /// Sums an output-shaped gradient back onto the input shape.
    pub fn reduce<F: Float>(&self, grad: &[F], in_len: usize) -> Vec<F> {
        match self {
            Broadcast::Same => grad.to_vec(),
            _ => {
                let mut out = vec![F::zero(); in_len];
                for (i, &g) in grad.iter().enumerate() {
                    out[self.at(i)] += g;
                }
                out
            }
        }
    }
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub fn permute<F: Float>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    let inner = rank - 1;
    let inner_len = out_shape[inner];
    let inner_stride = strides[inner];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut produced = 0;
    while produced < total {
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        produced += inner_len;
        for ax in (0..inner).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut c);
        // bᵀ laid out as 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &bt, &mut c2);
        assert_eq!(c, c2);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c3 = vec![0.0; 8];
        gemm_tn(3, 2, 4, &at, &b, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_offsets(&[3, 1], &[3, 2]), vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let (p, s) = permute(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        assert_eq!(p[1], 4.0); // out[0,0,1] = in[0,1,0]
        let (back, s2) = permute(&p, &s, &inverse_permutation(&[2, 0, 1]));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, data);
    }
}
