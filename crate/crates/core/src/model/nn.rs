//! Layers shared by the encoder and the decoders.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{trunc_normal, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, F: Float> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, F: Float> ParamBuilder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, F> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let value = trunc_normal(shape, std, self.rng);
        self.store.register(self.full_name(name), value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store
            .register(self.full_name(name), Tensor::full(shape, F::from_f64(value)))
    }
}

fn fill<F: Float>(store: &mut ParamStore<F>, id: ParamId, value: f64) {
    let p = store.get_mut(id);
    p.value = Tensor::full(p.value.shape(), F::from_f64(value));
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Float>(b: &mut ParamBuilder<'_, F>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.trunc_normal("weight", &[in_dim, out_dim], INIT_STD)?,
            bias: b.constant("bias", &[out_dim], 0.0)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.matmul(w)?.add(b)
    }

    pub fn zero<F: Float>(&self, store: &mut ParamStore<F>) {
        fill(store, self.weight, 0.0);
        fill(store, self.bias, 0.0);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(b: &mut ParamBuilder<'_, F>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", &[dim], 1.0)?,
            beta: b.constant("beta", &[dim], 0.0)?,
        })
    }

    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        x.layer_norm(tape.param(store, self.gamma), tape.param(store, self.beta))
    }
}

/// Linear classifier behind a LayerNorm neck. The neck rescales each
/// feature to unit spread so the logits see per-image differences rather
/// than the shared offset every feature carries.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub neck: LayerNorm,
    pub linear: Linear,
}

impl Classifier {
    pub fn new<F: Float>(b: &mut ParamBuilder<'_, F>, in_dim: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            neck: LayerNorm::new(&mut b.sub("neck"), in_dim)?,
            linear: Linear::new(b, in_dim, classes)?,
        })
    }

    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let normed = self.neck.forward(tape, store, x)?;
        self.linear.forward(tape, store, normed)
    }
}

/// Two-layer perceptron with exact GELU: `fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<F: Float>(b: &mut ParamBuilder<'_, F>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.sub("fc1"), dim, hidden)?,
            fc2: Linear::new(&mut b.sub("fc2"), hidden, dim)?,
        })
    }

    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let h = self.fc1.forward(tape, store, x)?.gelu();
        self.fc2.forward(tape, store, h)
    }

    /// Zeroes the output layer so the block emits exact zeros.
    pub fn zero_output<F: Float>(&self, store: &mut ParamStore<F>) {
        self.fc2.zero(store);
    }
}

/// Multi-head scaled dot-product attention with separate query, key, value
/// and output projections. Queries come from one sequence, keys and values
/// from another (the same one for self-attention).
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<F: Float>(b: &mut ParamBuilder<'_, F>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut b.sub("q"), dim, dim)?,
            k: Linear::new(&mut b.sub("k"), dim, dim)?,
            v: Linear::new(&mut b.sub("v"), dim, dim)?,
            out: Linear::new(&mut b.sub("out"), dim, dim)?,
            heads,
        })
    }

    /// `query`: `[B, Tq, d]`, `context`: `[B, Tk, d]` → `[B, Tq, d]`.
    /// When `probe` is given the attention weights `[B, h, Tq, Tk]` are
    /// pushed onto it.
    pub fn forward<'t, F: Float>(
        &self,
        tape: &'t Tape<F>,
        store: &ParamStore<F>,
        query: Var<'t, F>,
        context: Var<'t, F>,
        probe: Option<&mut Vec<Tensor<F>>>,
    ) -> Result<Var<'t, F>> {
        let qs = query.shape();
        let cs = context.shape();
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != cs[2] {
            return Err(Error::shapes("attention", &qs, &cs));
        }
        let (b, tq, d) = (qs[0], qs[1], qs[2]);
        let tk = cs[1];
        let h = self.heads;
        let dh = d / h;
        let split = |x: Var<'t, F>, t: usize| -> Result<Var<'t, F>> {
            x.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3])
        };
        let q = split(self.q.forward(tape, store, query)?, tq)?;
        let k = split(self.k.forward(tape, store, context)?, tk)?;
        let v = split(self.v.forward(tape, store, context)?, tk)?;
        let scores = q.matmul(k.transpose_last2()?)?.scale(1.0 / (dh as f64).sqrt());
        let weights = scores.softmax();
        if let Some(p) = probe {
            p.push(weights.value());
        }
        let mixed = weights
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, tq, d])?;
        self.out.forward(tape, store, mixed)
    }

    pub fn zero_output<F: Float>(&self, store: &mut ParamStore<F>) {
        self.out.zero(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn attention_rows_sum_to_one_and_shape_is_kept() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let attn = Attention::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 2).unwrap();
        let tape = Tape::new();
        let x = tape.constant(trunc_normal(&[2, 5, 8], 1.0, &mut rng));
        let ctx = tape.constant(trunc_normal(&[2, 3, 8], 1.0, &mut rng));
        let mut probe = Vec::new();
        let y = attn.forward(&tape, &store, x, ctx, Some(&mut probe)).unwrap();
        assert_eq!(y.shape(), vec![2, 5, 8]);
        assert_eq!(probe[0].shape(), &[2, 2, 5, 3]);
        for row in probe[0].data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Attention::new(&mut ParamBuilder::new(&mut store, &mut rng), 10, 4).is_err());
    }

    #[test]
    fn names_are_prefixed() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        FeedForward::new(&mut b.sub("blk").sub("ffn"), 4, 16).unwrap();
        assert!(store.id_of("blk.ffn.fc1.weight").is_some());
        assert!(store.id_of("blk.ffn.fc2.bias").is_some());
    }
}
