//! ViT encoder with a Cls and a View token and per-block view decoupling.
//!
//! Token layout is `[Cls, View, patch_0, .., patch_{P-1}]`. After every
//! block the Cls token is replaced by `Cls - View`, so the final Cls is the
//! view-invariant feature and the final View token is the view-related one.

use serde::{Deserialize, Serialize};

use super::nn::{Attention, FeedForward, LayerNorm, Linear, ParamBuilder, INIT_STD};
use crate::autodiff::{concat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub olp_enabled: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 256,
            image_width: 128,
            channels: 3,
            patch_size: 16,
            stride: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            ffn_mult: 4,
            olp_enabled: false,
        }
    }
}

impl EncoderConfig {
    /// d=64, depth 2, 4 heads, 64×32 images.
    pub fn toy() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            ..Self::default()
        }
    }

    /// Overlapping patches use a stride of three quarters of the patch size
    /// (12 for 16-pixel patches).
    pub fn with_olp(mut self, enabled: bool) -> Self {
        self.olp_enabled = enabled;
        self.stride = if enabled {
            (self.patch_size * 3 / 4).max(1)
        } else {
            self.patch_size
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.stride == 0 || self.channels == 0 || self.depth == 0 {
            return bad("patch size, stride, channels and depth must be positive".into());
        }
        if self.image_height < self.patch_size || self.image_width < self.patch_size {
            return bad(format!(
                "image {}x{} is smaller than one {}-pixel patch",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.olp_enabled && self.stride >= self.patch_size {
            return bad(format!(
                "overlapping patches need stride < patch size, got stride {}",
                self.stride
            ));
        }
        if !self.olp_enabled && self.stride != self.patch_size {
            return bad(format!(
                "stride {} differs from patch size {} without overlapping patches",
                self.stride, self.patch_size
            ));
        }
        Ok(())
    }

    /// Patch grid `(nH, nW)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            grid_len(self.image_height, self.patch_size, self.stride),
            grid_len(self.image_width, self.patch_size, self.stride),
        )
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// `floor((len - patch) / stride) + 1`.
pub fn grid_len(len: usize, patch: usize, stride: usize) -> usize {
    (len - patch) / stride + 1
}

/// Per-channel ImageNet statistics; channels beyond the third reuse the
/// last entry.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `(x - mean) / std` per channel of a `[B, C, H, W]` batch.
pub fn normalize_pixels<F: Float>(images: &Tensor<F>) -> Tensor<F> {
    let s = images.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut out = images.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = (i % c).min(2);
        let (m, sd) = (F::from_f64(PIXEL_MEAN[ch]), F::from_f64(1.0 / PIXEL_STD[ch]));
        for v in chunk {
            *v = (*v - m) * sd;
        }
    }
    out
}

/// Cuts `[B, C, H, W]` images into `[B, P, C·patch²]` patch vectors in
/// row-major raster order. Each vector is laid out channel, row, column.
pub fn tokenize<F: Float>(images: &Tensor<F>, patch: usize, stride: usize) -> Result<Tensor<F>> {
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::dim(
            "tokenize",
            format!("expected [B, C, H, W], got {:?}", images.shape()),
        ));
    };
    if h < patch || w < patch {
        return Err(Error::dim(
            "tokenize",
            format!("image {h}x{w} is smaller than patch {patch}"),
        ));
    }
    if stride == 0 {
        return Err(Error::dim("tokenize", "stride must be positive"));
    }
    let (nh, nw) = (grid_len(h, patch, stride), grid_len(w, patch, stride));
    let dim = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(b * nh * nw * dim);
    for bi in 0..b {
        for gy in 0..nh {
            for gx in 0..nw {
                for ci in 0..c {
                    let plane = (bi * c + ci) * h * w;
                    for py in 0..patch {
                        let row = plane + (gy * stride + py) * w + gx * stride;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, nh * nw, dim], out)
}

/// Pre-norm transformer block: `x + MHSA(LN x)`, then `+ FFN(LN ·)`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new<F: Float>(b: &mut ParamBuilder<'_, F>, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            ln1: LayerNorm::new(&mut b.sub("ln1"), d)?,
            attn: Attention::new(&mut b.sub("attn"), d, cfg.heads)?,
            ln2: LayerNorm::new(&mut b.sub("ln2"), d)?,
            ffn: FeedForward::new(&mut b.sub("ffn"), d, d * cfg.ffn_mult)?,
        })
    }

    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        x: Var<'t, F>,
        probe: Option<&mut Vec<Tensor<F>>>,
    ) -> Result<Var<'t, F>> {
        let h = self.ln1.forward(tape, store, x)?;
        let x = x.add(self.attn.forward(tape, store, h, h, probe)?)?;
        let h = self.ln2.forward(tape, store, x)?;
        x.add(self.ffn.forward(tape, store, h)?)
    }

    pub fn zero_outputs<F: Float>(&self, store: &mut ParamStore<F>) {
        self.attn.zero_output(store);
        self.ffn.zero_output(store);
    }
}

/// `Cls ← Cls − View` on a `[B, T, d]` sequence; every other token is
/// passed through untouched.
pub fn decouple_step<'t, F: Float>(x: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = x.shape();
    if s.len() != 3 || s[1] < 2 {
        return Err(Error::contract(format!(
            "decoupling needs Cls and View tokens, got shape {s:?}"
        )));
    }
    let cls = x.narrow(1, 0, 1)?;
    let view = x.narrow(1, 1, 1)?;
    let mut parts = vec![cls.sub(view)?, view];
    if s[1] > 2 {
        parts.push(x.narrow(1, 2, s[1] - 2)?);
    }
    concat(&parts, 1)
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput<'t, F: Float> {
    /// Final (decoupled) Cls token, `[B, d]`.
    pub x_inv: Var<'t, F>,
    /// Final View token, `[B, d]`; absent without a View token.
    pub view_feat: Option<Var<'t, F>>,
    /// Patch tokens, `[B, P, d]`.
    pub x_local: Var<'t, F>,
    /// Cls token after the last block but before its decoupling step.
    pub cls_raw: Var<'t, F>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub view: Option<ParamId>,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
}

impl Encoder {
    /// `with_view = false` builds the plain ViT used by the ablations: no
    /// View token and no decoupling.
    pub fn new<F: Float>(b: &mut ParamBuilder<'_, F>, cfg: &EncoderConfig, with_view: bool) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let special = if with_view { 2 } else { 1 };
        let patch_embed = Linear::new(&mut b.sub("patch_embed"), cfg.patch_dim(), d)?;
        let cls = b.trunc_normal("cls", &[1, d], INIT_STD)?;
        let view = if with_view {
            Some(b.trunc_normal("view", &[1, d], INIT_STD)?)
        } else {
            None
        };
        let pos = b.trunc_normal("pos", &[cfg.num_patches() + special, d], INIT_STD)?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut b.sub(&format!("blocks.{i}")), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls,
            view,
            pos,
            blocks,
        })
    }

    fn special_tokens(&self) -> usize {
        if self.view.is_some() {
            2
        } else {
            1
        }
    }

    /// Patch projection plus positional embedding: `[B, P, D]` →
    /// `[B, P + 2, d]` (or `P + 1` without a View token).
    pub fn embed<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        tokens: &Tensor<F>,
    ) -> Result<Var<'t, F>> {
        let &[b, p, _] = tokens.shape() else {
            return Err(Error::dim("embed", format!("expected [B, P, D], got {:?}", tokens.shape())));
        };
        let d = self.cfg.embed_dim;
        let positions = store.value(self.pos).shape()[0];
        if positions != p + self.special_tokens() {
            return Err(Error::Config(format!(
                "positional table has {positions} rows but the input has {p} patches plus {} special tokens",
                self.special_tokens()
            )));
        }
        let patches = self.patch_embed.forward(tape, store, tape.constant(tokens.clone()))?;
        let mut parts = vec![tape.param(store, self.cls).expand(&[b, 1, d])?];
        if let Some(view) = self.view {
            parts.push(tape.param(store, view).expand(&[b, 1, d])?);
        }
        parts.push(patches);
        concat(&parts, 1)?.add(tape.param(store, self.pos))
    }

    pub fn encode<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        images: &Tensor<F>,
    ) -> Result<EncoderOutput<'t, F>> {
        let expected = [self.cfg.channels, self.cfg.image_height, self.cfg.image_width];
        if images.rank() != 4 || images.shape()[1..] != expected {
            return Err(Error::dim(
                "encode",
                format!("images {:?} do not match configured [B, {expected:?}]", images.shape()),
            ));
        }
        let tokens = tokenize(&normalize_pixels(images), self.cfg.patch_size, self.cfg.stride)?;
        self.encode_tokens(tape, store, &tokens, None)
    }

    /// Runs the blocks on pre-tokenized input. `probe` collects the
    /// attention weights of every block.
    pub fn encode_tokens<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        tokens: &Tensor<F>,
        mut probe: Option<&mut Vec<Tensor<F>>>,
    ) -> Result<EncoderOutput<'t, F>> {
        let mut x = self.embed(tape, store, tokens)?;
        let (b, t, d) = {
            let s = x.shape();
            (s[0], s[1], s[2])
        };
        let special = self.special_tokens();
        let mut cls_raw = None;
        for block in &self.blocks {
            x = block.forward(tape, store, x, probe.as_deref_mut())?;
            if self.view.is_some() {
                cls_raw = Some(x.narrow(1, 0, 1)?);
                x = decouple_step(x)?;
            }
        }
        let x_inv = x.narrow(1, 0, 1)?.reshape(&[b, d])?;
        let view_feat = if self.view.is_some() {
            Some(x.narrow(1, 1, 1)?.reshape(&[b, d])?)
        } else {
            None
        };
        let cls_raw = match cls_raw {
            Some(c) => c.reshape(&[b, d])?,
            None => x_inv,
        };
        Ok(EncoderOutput {
            x_inv,
            view_feat,
            x_local: x.narrow(1, special, t - special)?,
            cls_raw,
        })
    }

    pub fn zero_block_outputs<F: Float>(&self, store: &mut ParamStore<F>) {
        for block in &self.blocks {
            block.zero_outputs(store);
        }
    }
}
