//! The full model: encoder, prompt re-calibration, local refinement and
//! the classifier heads.

pub mod encoder;
pub mod lfrm;
pub mod nn;
pub mod prm;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use encoder::{decouple_step, tokenize, Encoder, EncoderConfig, EncoderOutput};
pub use lfrm::{Fusion, Lfrm, TwoWayBlock};
pub use nn::{Attention, Classifier, FeedForward, LayerNorm, Linear, ParamBuilder};
pub use prm::{init_prompts, Prm, PrmVariant, PromptBank};

/// Components switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    pub no_prm: bool,
    pub no_vdt: bool,
    pub no_lfrm: bool,
}

impl Ablation {
    /// Plain ViT with global features only.
    pub const BASELINE: Ablation = Ablation {
        no_prm: true,
        no_vdt: true,
        no_lfrm: true,
    };

    pub fn is_none(&self) -> bool {
        *self == Ablation::default()
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// `none`, `baseline`, or a comma list of `no-prm`, `no-vdt`, `no-lfrm`.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s.split(',').map(str::trim) {
            match part {
                "none" | "" => {}
                "baseline" => a = Ablation::BASELINE,
                "no-prm" => a.no_prm = true,
                "no-vdt" => a.no_vdt = true,
                "no-lfrm" => a.no_lfrm = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation {other:?}, expected none, no-prm, no-vdt, no-lfrm or baseline"
                    )))
                }
            }
        }
        Ok(a)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.no_prm, "no-prm"),
            (self.no_vdt, "no-vdt"),
            (self.no_lfrm, "no-lfrm"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|&(_, name)| name)
        .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompt_len: usize,
    pub prm_variant: PrmVariant,
    pub ablation: Ablation,
    pub num_ids: usize,
    pub num_views: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, num_ids: usize, num_views: usize) -> Self {
        Self {
            encoder,
            prompt_len: 64,
            prm_variant: PrmVariant::Attn,
            ablation: Ablation::default(),
            num_ids,
            num_views,
        }
    }

    /// Toy encoder with 8 prompts.
    pub fn toy(num_ids: usize, num_views: usize) -> Self {
        Self {
            prompt_len: 8,
            ..Self::new(EncoderConfig::toy(), num_ids, num_views)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        if self.num_ids == 0 {
            return Err(Error::Config("need at least one training identity".into()));
        }
        if self.num_views < 2 {
            return Err(Error::Config(format!("need at least 2 views, got {}", self.num_views)));
        }
        Ok(())
    }

    /// Width of the retrieval feature: `2d` with local refinement, else `d`.
    pub fn feature_dim(&self) -> usize {
        if self.ablation.no_lfrm {
            self.encoder.embed_dim
        } else {
            2 * self.encoder.embed_dim
        }
    }
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub id_global: Classifier,
    pub id_local: Option<Classifier>,
    pub view: Option<Classifier>,
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward<'t, F: Float> {
    pub enc: EncoderOutput<'t, F>,
    /// Re-calibrated prompts `[B, L, d]`.
    pub p_re: Option<Var<'t, F>>,
    /// Refined local feature `[B, d]`.
    pub local: Option<Var<'t, F>>,
}

impl<'t, F: Float> Forward<'t, F> {
    /// `[x_inv, local]` (or `x_inv` alone without local refinement).
    pub fn retrieval_feature(&self) -> Result<Var<'t, F>> {
        match self.local {
            Some(local) => concat(&[self.enc.x_inv, local], 1),
            None => Ok(self.enc.x_inv),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeCap {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub bank: Option<PromptBank>,
    pub prm: Option<Prm>,
    pub lfrm: Option<Lfrm>,
    pub heads: Heads,
}

impl SeCap {
    /// Registers every parameter in a fresh store, initialised from `seed`.
    /// Ablated components are not registered at all.
    pub fn new<F: Float>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let e = &cfg.encoder;
        let d = e.embed_dim;
        let ab = cfg.ablation;

        let encoder = Encoder::new(&mut b.sub("encoder"), e, !ab.no_vdt)?;
        let (bank, prm, lfrm) = if ab.no_lfrm {
            (None, None, None)
        } else {
            let bank = init_prompts(&mut b.sub("bank"), cfg.prompt_len, d)?;
            let prm = if ab.no_prm {
                None
            } else {
                Some(Prm::new(&mut b.sub("prm"), cfg.prm_variant, d, e.heads, e.ffn_mult)?)
            };
            let lfrm = Lfrm::new(&mut b.sub("lfrm"), d, e.heads, e.ffn_mult)?;
            (Some(bank), prm, Some(lfrm))
        };
        let heads = Heads {
            id_global: Classifier::new(&mut b.sub("head.id_global"), d, cfg.num_ids)?,
            id_local: if ab.no_lfrm {
                None
            } else {
                Some(Classifier::new(&mut b.sub("head.id_local"), d, cfg.num_ids)?)
            },
            view: if ab.no_vdt {
                None
            } else {
                Some(Classifier::new(&mut b.sub("head.view"), d, cfg.num_views)?)
            },
        };
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                bank,
                prm,
                lfrm,
                heads,
            },
            store,
        ))
    }

    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        images: &Tensor<F>,
    ) -> Result<Forward<'t, F>> {
        let enc = self.encoder.encode(tape, store, images)?;
        let (mut p_re, mut local) = (None, None);
        if let (Some(bank), Some(lfrm)) = (&self.bank, &self.lfrm) {
            let batch = enc.x_inv.shape()[0];
            let p = match &self.prm {
                Some(prm) => prm.forward(tape, store, bank, enc.x_inv)?,
                None => bank.expand(tape, store, batch)?,
            };
            local = Some(lfrm.forward(tape, store, p, enc.x_local)?);
            p_re = Some(p);
        }
        Ok(Forward { enc, p_re, local })
    }

    /// Retrieval features `[B, feature_dim]` without gradient tracking.
    pub fn features<F: Float>(&self, store: &ParamStore<F>, images: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, store, images)?;
        let out = fwd.retrieval_feature()?.value();
        tape.check_finite()?;
        Ok(out)
    }
}
