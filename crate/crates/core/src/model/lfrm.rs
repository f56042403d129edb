//! Local feature refinement: two two-way attention blocks between the
//! re-calibrated prompts and the patch tokens, then a fusion decoder that
//! reads one refined feature out through a learnable Out token.

use super::nn::{Attention, FeedForward, LayerNorm, ParamBuilder, INIT_STD};
use crate::autodiff::{concat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

pub const TWO_WAY_BLOCKS: usize = 2;

/// Prompt stream: self-attention, prompt-to-image cross-attention, FFN.
/// Image stream: image-to-prompt cross-attention against the updated
/// prompts. Each sublayer is pre-norm and residual.
#[derive(Debug, Clone)]
pub struct TwoWayBlock {
    pub ln_sa: LayerNorm,
    pub sa: Attention,
    pub ln_p2i_q: LayerNorm,
    pub ln_p2i_kv: LayerNorm,
    pub p2i: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_i2p_q: LayerNorm,
    pub ln_i2p_kv: LayerNorm,
    pub i2p: Attention,
}

impl TwoWayBlock {
    pub fn new<F: Float>(b: &mut ParamBuilder<'_, F>, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(Self {
            ln_sa: LayerNorm::new(&mut b.sub("ln_sa"), dim)?,
            sa: Attention::new(&mut b.sub("sa"), dim, heads)?,
            ln_p2i_q: LayerNorm::new(&mut b.sub("ln_p2i_q"), dim)?,
            ln_p2i_kv: LayerNorm::new(&mut b.sub("ln_p2i_kv"), dim)?,
            p2i: Attention::new(&mut b.sub("p2i"), dim, heads)?,
            ln_ffn: LayerNorm::new(&mut b.sub("ln_ffn"), dim)?,
            ffn: FeedForward::new(&mut b.sub("ffn"), dim, dim * ffn_mult)?,
            ln_i2p_q: LayerNorm::new(&mut b.sub("ln_i2p_q"), dim)?,
            ln_i2p_kv: LayerNorm::new(&mut b.sub("ln_i2p_kv"), dim)?,
            i2p: Attention::new(&mut b.sub("i2p"), dim, heads)?,
        })
    }

    /// `(f_p [B, L, d], f_local [B, P, d])` → updated pair, same shapes.
    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        f_p: Var<'t, F>,
        f_local: Var<'t, F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let n = self.ln_sa.forward(tape, store, f_p)?;
        let q = f_p.add(self.sa.forward(tape, store, n, n, None)?)?;
        let kv = self.ln_p2i_kv.forward(tape, store, f_local)?;
        let q = q.add(
            self.p2i
                .forward(tape, store, self.ln_p2i_q.forward(tape, store, q)?, kv, None)?,
        )?;
        let p_new = q.add(self.ffn.forward(tape, store, self.ln_ffn.forward(tape, store, q)?)?)?;

        let kv = self.ln_i2p_kv.forward(tape, store, p_new)?;
        let l_new = f_local.add(self.i2p.forward(
            tape,
            store,
            self.ln_i2p_q.forward(tape, store, f_local)?,
            kv,
            None,
        )?)?;
        Ok((p_new, l_new))
    }

    pub fn zero_outputs<F: Float>(&self, store: &mut ParamStore<F>) {
        self.sa.zero_output(store);
        self.p2i.zero_output(store);
        self.ffn.zero_output(store);
        self.i2p.zero_output(store);
    }
}

/// `[Out; F_P]` attends to `F_I`, then self-attends, then passes an FFN;
/// the Out row is the result. No residual connections.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub out_token: ParamId,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub ca: Attention,
    pub ln_sa: LayerNorm,
    pub sa: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl Fusion {
    pub fn new<F: Float>(b: &mut ParamBuilder<'_, F>, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(Self {
            out_token: b.trunc_normal("out_token", &[1, dim], INIT_STD)?,
            ln_q: LayerNorm::new(&mut b.sub("ln_q"), dim)?,
            ln_kv: LayerNorm::new(&mut b.sub("ln_kv"), dim)?,
            ca: Attention::new(&mut b.sub("ca"), dim, heads)?,
            ln_sa: LayerNorm::new(&mut b.sub("ln_sa"), dim)?,
            sa: Attention::new(&mut b.sub("sa"), dim, heads)?,
            ln_ffn: LayerNorm::new(&mut b.sub("ln_ffn"), dim)?,
            ffn: FeedForward::new(&mut b.sub("ffn"), dim, dim * ffn_mult)?,
        })
    }

    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        f_p: Var<'t, F>,
        f_i: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let (ps, is) = (f_p.shape(), f_i.shape());
        if ps.len() != 3 || is.len() != 3 || ps[0] != is[0] || ps[2] != is[2] {
            return Err(Error::shapes("fusion", &ps, &is));
        }
        let (b, d) = (ps[0], ps[2]);
        let out = tape.param(store, self.out_token).expand(&[b, 1, d])?;
        let q = concat(&[out, f_p], 1)?;
        let c = self.ca.forward(
            tape,
            store,
            self.ln_q.forward(tape, store, q)?,
            self.ln_kv.forward(tape, store, f_i)?,
            None,
        )?;
        let n = self.ln_sa.forward(tape, store, c)?;
        let s = self.sa.forward(tape, store, n, n, None)?;
        let y = self.ffn.forward(tape, store, self.ln_ffn.forward(tape, store, s)?)?;
        y.narrow(1, 0, 1)?.reshape(&[b, d])
    }
}

#[derive(Debug, Clone)]
pub struct Lfrm {
    pub blocks: Vec<TwoWayBlock>,
    pub fusion: Fusion,
}

impl Lfrm {
    pub fn new<F: Float>(b: &mut ParamBuilder<'_, F>, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        let blocks = (0..TWO_WAY_BLOCKS)
            .map(|i| TwoWayBlock::new(&mut b.sub(&format!("two_way.{i}")), dim, heads, ffn_mult))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            fusion: Fusion::new(&mut b.sub("fusion"), dim, heads, ffn_mult)?,
        })
    }

    /// Refined local feature `[B, d]`.
    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        p_re: Var<'t, F>,
        x_local: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let (mut f_p, mut f_i) = (p_re, x_local);
        for block in &self.blocks {
            (f_p, f_i) = block.forward(tape, store, f_p, f_i)?;
        }
        self.fusion.forward(tape, store, f_p, f_i)
    }
}
