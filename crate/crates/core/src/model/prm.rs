//! Prompt re-calibration: a bank of learnable prompts adapted to each
//! input's view-invariant feature.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::nn::{Attention, FeedForward, LayerNorm, Linear, ParamBuilder, INIT_STD};
use crate::autodiff::{concat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrmVariant {
    /// Cross-attention from the prompts to the invariant feature.
    #[default]
    Attn,
    /// A projection of the invariant feature added to every prompt.
    Add,
    /// Self-attention over the prompts with the feature appended.
    Cat,
}

impl fmt::Display for PrmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrmVariant::Attn => "attn",
            PrmVariant::Add => "add",
            PrmVariant::Cat => "cat",
        })
    }
}

impl FromStr for PrmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(PrmVariant::Attn),
            "add" => Ok(PrmVariant::Add),
            "cat" => Ok(PrmVariant::Cat),
            other => Err(Error::Config(format!(
                "unknown prompt variant {other:?}, expected attn, add or cat"
            ))),
        }
    }
}

/// `L` learnable prompt vectors of width `d`.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub prompts: ParamId,
    pub len: usize,
    pub dim: usize,
}

/// Truncated normal (std 0.02) prompts; the builder's generator fixes the
/// values.
pub fn init_prompts<F: Float>(b: &mut ParamBuilder<'_, F>, len: usize, dim: usize) -> Result<PromptBank> {
    if len == 0 || dim == 0 {
        return Err(Error::Config(format!("prompt bank needs L, d >= 1, got L={len}, d={dim}")));
    }
    Ok(PromptBank {
        prompts: b.trunc_normal("prompts", &[len, dim], INIT_STD)?,
        len,
        dim,
    })
}

impl PromptBank {
    /// The bank broadcast to `[B, L, d]`.
    pub fn expand<'t, F: Float>(&self, tape: &'t Tape<F>, store: &ParamStore<F>, batch: usize) -> Result<Var<'t, F>> {
        tape.param(store, self.prompts).expand(&[batch, self.len, self.dim])
    }
}

#[derive(Debug, Clone)]
enum Mixer {
    Attn {
        ln_q: LayerNorm,
        ln_kv: LayerNorm,
        ca: Attention,
    },
    Add {
        proj: Linear,
    },
    Cat {
        ln_x: LayerNorm,
    },
}

/// One re-calibration block. Every sublayer is residual around the prompts,
/// so zeroed output projections return the bank unchanged.
#[derive(Debug, Clone)]
pub struct Prm {
    pub variant: PrmVariant,
    mixer: Mixer,
    pub ln_sa: LayerNorm,
    pub sa: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl Prm {
    pub fn new<F: Float>(
        b: &mut ParamBuilder<'_, F>,
        variant: PrmVariant,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        let mixer = match variant {
            PrmVariant::Attn => Mixer::Attn {
                ln_q: LayerNorm::new(&mut b.sub("ln_q"), dim)?,
                ln_kv: LayerNorm::new(&mut b.sub("ln_kv"), dim)?,
                ca: Attention::new(&mut b.sub("ca"), dim, heads)?,
            },
            PrmVariant::Add => Mixer::Add {
                proj: Linear::new(&mut b.sub("add_proj"), dim, dim)?,
            },
            PrmVariant::Cat => Mixer::Cat {
                ln_x: LayerNorm::new(&mut b.sub("ln_x"), dim)?,
            },
        };
        Ok(Self {
            variant,
            mixer,
            ln_sa: LayerNorm::new(&mut b.sub("ln_sa"), dim)?,
            sa: Attention::new(&mut b.sub("sa"), dim, heads)?,
            ln_ffn: LayerNorm::new(&mut b.sub("ln_ffn"), dim)?,
            ffn: FeedForward::new(&mut b.sub("ffn"), dim, dim * ffn_mult)?,
        })
    }

    /// `x_inv`: `[B, d]` → re-calibrated prompts `[B, L, d]`.
    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        bank: &PromptBank,
        x_inv: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let s = x_inv.shape();
        if s.len() != 2 || s[1] != bank.dim {
            return Err(Error::shapes("prm", &s, &[bank.len, bank.dim]));
        }
        let (b, l, d) = (s[0], bank.len, bank.dim);
        let prompts = bank.expand(tape, store, b)?;
        let x = x_inv.reshape(&[b, 1, d])?;
        let mixed = match &self.mixer {
            Mixer::Attn { ln_q, ln_kv, ca } => {
                let q = ln_q.forward(tape, store, prompts)?;
                let kv = ln_kv.forward(tape, store, x)?;
                let h = prompts.add(ca.forward(tape, store, q, kv, None)?)?;
                let n = self.ln_sa.forward(tape, store, h)?;
                h.add(self.sa.forward(tape, store, n, n, None)?)?
            }
            Mixer::Add { proj } => {
                let h = prompts.add(proj.forward(tape, store, x)?)?;
                let n = self.ln_sa.forward(tape, store, h)?;
                h.add(self.sa.forward(tape, store, n, n, None)?)?
            }
            Mixer::Cat { ln_x } => {
                let seq = concat(
                    &[self.ln_sa.forward(tape, store, prompts)?, ln_x.forward(tape, store, x)?],
                    1,
                )?;
                let attended = self.sa.forward(tape, store, seq, seq, None)?.narrow(1, 0, l)?;
                prompts.add(attended)?
            }
        };
        let n = self.ln_ffn.forward(tape, store, mixed)?;
        mixed.add(self.ffn.forward(tape, store, n)?)
    }

    pub fn zero_outputs<F: Float>(&self, store: &mut ParamStore<F>) {
        match &self.mixer {
            Mixer::Attn { ca, .. } => ca.zero_output(store),
            Mixer::Add { proj } => proj.zero(store),
            Mixer::Cat { .. } => {}
        }
        self.sa.zero_output(store);
        self.ffn.zero_output(store);
    }
}
