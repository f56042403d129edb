//! Training loop and the whole-model gradient check.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{param_grad_check, Fault, ParamId, ParamStore, Tape, DEFAULT_EPS};
use crate::data::augment::{augment, AugmentPolicy};
use crate::data::manifest::SampleRecord;
use crate::data::sampler::pk_sample;
use crate::data::synth::derive_seed;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, PrmVariant, SeCap};
use crate::objectives::{compute_losses, total_loss, LossValues, LossWeights};
use crate::optim::{CosineSchedule, Sgd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub p: usize,
    pub k: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            lr_max: 8e-3,
            lr_min: 1.6e-6,
            p: 16,
            k: 4,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_steps: 0,
            seed: 0,
            loss: LossWeights::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    /// 30 epochs without augmentation, for the synthetic corpus. Its
    /// identities differ only in region colours, which ±20% channel jitter
    /// would wash out; the generator already adds per-image variation.
    pub fn toy() -> Self {
        Self {
            epochs: 30,
            augment: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config("triplet mining needs P >= 2 and K >= 2".into()));
        }
        self.loss.validate()
    }
}

/// Training images held in memory with contiguous class labels.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub records: Vec<SampleRecord>,
    pub images: Vec<Tensor<f32>>,
    /// Class index per record; identities are numbered in ascending order.
    pub labels: Vec<usize>,
    pub view_labels: Vec<usize>,
    pub num_classes: usize,
    pub num_views: usize,
}

impl TrainData {
    /// Distractors are dropped.
    pub fn new(records: Vec<SampleRecord>, images: Vec<Tensor<f32>>, num_views: usize) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::contract(format!("{} records but {} images", records.len(), images.len())));
        }
        let (records, images): (Vec<_>, Vec<_>) =
            records.into_iter().zip(images).filter(|(r, _)| !r.is_distractor()).unzip();
        let classes: BTreeMap<i64, usize> = records
            .iter()
            .map(|r| r.id)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        Ok(Self {
            labels: records.iter().map(|r| classes[&r.id]).collect(),
            view_labels: records.iter().map(|r| r.view.label(num_views)).collect(),
            num_classes: classes.len(),
            num_views,
            records,
            images,
        })
    }

    pub fn steps_per_epoch(&self, cfg: &TrainConfig) -> usize {
        (self.records.len() / (cfg.p * cfg.k)).max(1)
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossValues,
    /// Rate used by the epoch's last step.
    pub lr: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let l = &self.losses;
        format!(
            "epoch={} loss_total={:.6} loss_id_g={:.6} loss_tri_g={:.6} loss_id_l={:.6} loss_tri_l={:.6} loss_view={:.6} loss_orth={:.6} lr={:.6e}",
            self.epoch, l.total, l.id_g, l.tri_g, l.id_l, l.tri_l, l.view, l.orth, self.lr
        )
    }
}

pub struct TrainOutcome {
    pub model: SeCap,
    pub store: ParamStore<f32>,
    pub history: Vec<EpochLog>,
    pub steps: usize,
}

/// Seed of batch `step` in `epoch`.
pub fn batch_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    derive_seed(seed, &format!("batch/{epoch}/{step}"))
}

/// One labelled batch: images `[B, 3, H, W]`, class and view labels.
pub fn make_batch(
    data: &TrainData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Tensor<f32>, Vec<usize>, Vec<usize>)> {
    let idx = pk_sample(&data.records, cfg.p, cfg.k, seed)?;
    let policy = if cfg.augment { AugmentPolicy::default() } else { AugmentPolicy::disabled() };
    let images: Vec<Tensor<f32>> = idx
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| augment(&data.images[i], &policy, derive_seed(seed, &format!("aug/{pos}"))))
        .collect();
    Ok((
        Tensor::stack(&images)?,
        idx.iter().map(|&i| data.labels[i]).collect(),
        idx.iter().map(|&i| data.view_labels[i]).collect(),
    ))
}

/// Trains from scratch. `model_cfg` supplies the architecture; its class and
/// view counts are taken from `data`. `on_epoch` runs after every epoch and
/// may save checkpoints.
pub fn train<C>(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &TrainData, mut on_epoch: C) -> Result<TrainOutcome>
where
    C: FnMut(&EpochLog, &SeCap, &ParamStore<f32>) -> Result<()>,
{
    cfg.validate()?;
    let mut mcfg = model_cfg.clone();
    mcfg.num_ids = data.num_classes;
    mcfg.num_views = data.num_views;
    let (model, mut store) = SeCap::new::<f32>(&mcfg, cfg.seed)?;
    let steps_per_epoch = data.steps_per_epoch(cfg);
    let total = cfg.epochs * steps_per_epoch;
    let schedule = CosineSchedule::new(cfg.lr_max, cfg.lr_min, total).with_warmup(cfg.warmup_steps);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut sum = LossValues::default();
        let mut lr = schedule.lr(step);
        for s in 0..steps_per_epoch {
            let (images, labels, views) = make_batch(data, cfg, batch_seed(cfg.seed, epoch, s))?;
            let tape = Tape::new();
            let fwd = model.forward(&tape, &store, &images)?;
            let parts = compute_losses(&model, &tape, &store, &fwd, &labels, &views)?;
            let loss = total_loss(&parts, &cfg.loss)?;
            let values = parts.values(loss);
            if !values.total.is_finite() {
                return Err(Error::Diverged { step, epoch });
            }
            tape.backward(loss)?.accumulate_into(&mut store);
            lr = schedule.lr(step);
            sgd.step(&mut store, lr)?;
            sum = add_values(sum, values);
            step += 1;
        }
        let log = EpochLog {
            epoch,
            losses: scale_values(sum, 1.0 / steps_per_epoch as f64),
            lr,
        };
        on_epoch(&log, &model, &store)?;
        history.push(log);
    }
    Ok(TrainOutcome {
        model,
        store,
        history,
        steps: step,
    })
}

fn add_values(a: LossValues, b: LossValues) -> LossValues {
    LossValues {
        total: a.total + b.total,
        id_g: a.id_g + b.id_g,
        tri_g: a.tri_g + b.tri_g,
        id_l: a.id_l + b.id_l,
        tri_l: a.tri_l + b.tri_l,
        view: a.view + b.view,
        orth: a.orth + b.orth,
    }
}

fn scale_values(a: LossValues, s: f64) -> LossValues {
    LossValues {
        total: a.total * s,
        id_g: a.id_g * s,
        tri_g: a.tri_g * s,
        id_l: a.id_l * s,
        tri_l: a.tri_l * s,
        view: a.view * s,
        orth: a.orth * s,
    }
}

/// Mean orthogonality loss of `model` over `batches` un-augmented P×K
/// batches drawn from `data`.
pub fn mean_orthogonality(model: &SeCap, store: &ParamStore<f32>, data: &TrainData, p: usize, k: usize, batches: usize, seed: u64) -> Result<f64> {
    let cfg = TrainConfig {
        p,
        k,
        augment: false,
        ..TrainConfig::default()
    };
    let mut total = 0.0;
    for b in 0..batches {
        let (images, labels, views) = make_batch(data, &cfg, derive_seed(seed, &format!("orth/{b}")))?;
        let tape = Tape::new();
        let fwd = model.forward(&tape, store, &images)?;
        let parts = compute_losses(model, &tape, store, &fwd, &labels, &views)?;
        let orth = parts
            .orth
            .ok_or_else(|| Error::contract("model has no View token"))?;
        total += orth.item() as f64;
    }
    Ok(total / batches.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub variant: PrmVariant,
    pub olp: bool,
    pub ablation: Ablation,
    /// Coordinates sampled per parameter tensor.
    pub coords_per_param: usize,
    pub eps: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            variant: PrmVariant::Attn,
            olp: false,
            ablation: Ablation::default(),
            coords_per_param: 4,
            eps: DEFAULT_EPS,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    pub params_checked: usize,
}

/// Central differences of the full weighted loss in f64 on the toy model
/// (d=64, depth 2, 8 prompts) with a 4-image batch of 2 identities × 2
/// views. Every parameter tensor contributes `coords_per_param` sampled
/// coordinates.
pub fn model_grad_check(opts: &GradCheckOptions) -> Result<ModelGradCheck> {
    let mut cfg = ModelConfig::toy(2, 2);
    cfg.encoder = cfg.encoder.with_olp(opts.olp);
    cfg.prm_variant = opts.variant;
    cfg.ablation = opts.ablation;
    let (model, store) = SeCap::new::<f64>(&cfg, opts.seed)?;
    let e = &cfg.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "grad-check"));
    let shape = [4, e.channels, e.image_height, e.image_width];
    let pixels = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::<f64>::new(&shape, pixels)?;
    let (labels, views) = ([0usize, 0, 1, 1], [0usize, 1, 0, 1]);
    let weights = LossWeights {
        alpha: 1.0,
        beta: 1.0,
        // Large enough that the view and orthogonality terms register.
        lambda: 0.5,
    };

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for (id, p) in store.iter() {
        let n = p.value.len();
        let picks = rand::seq::index::sample(&mut rng, n, opts.coords_per_param.min(n));
        coords.extend(picks.into_iter().map(|i| (id, i)));
    }
    let fault = opts.fault;
    let report = param_grad_check(&store, &coords, opts.eps, |tape, s| {
        if let Some(f) = fault {
            tape.inject_fault(f);
        }
        let fwd = model.forward(tape, s, &images)?;
        let parts = compute_losses(&model, tape, s, &fwd, &labels, &views)?;
        total_loss(&parts, &weights)
    })?;
    let (worst_id, worst_coord) = coords[report.worst_index];
    Ok(ModelGradCheck {
        max_rel_error: report.max_rel_error,
        worst_param: store.get(worst_id).name.clone(),
        worst_coord,
        analytic: report.analytic,
        numeric: report.numeric,
        coords_checked: report.coords_checked,
        params_checked: store.len(),
    })
}
