//! Identity, soft triplet, view and orthogonality losses and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Classifier, Forward, SeCap};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Global branch (identity + triplet on `x_inv`).
    pub alpha: f64,
    /// Local branch (identity + triplet on the refined feature).
    pub beta: f64,
    /// View classification and orthogonality.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of `classifier(features)` against `labels`.
pub fn id_ce_loss<'t, F: Float>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    features: Var<'t, F>,
    labels: &[usize],
    classifier: &Classifier,
) -> Result<Var<'t, F>> {
    classifier.forward(tape, store, features)?.cross_entropy(labels)
}

/// Same as [`id_ce_loss`], on the View token feature.
pub fn view_ce_loss<'t, F: Float>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    view_feat: Var<'t, F>,
    view_labels: &[usize],
    classifier: &Classifier,
) -> Result<Var<'t, F>> {
    classifier.forward(tape, store, view_feat)?.cross_entropy(view_labels)
}

/// Hardest positive and hardest negative per anchor, as flat indices into
/// the `n×n` distance matrix. Ties go to the lowest column.
pub fn mine_batch_hard(dist: &[f64], labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..n {
            let d = dist[i * n + j];
            if labels[j] == labels[i] {
                if j != i && hp.is_none_or(|k| d > dist[i * n + k]) {
                    hp = Some(j);
                }
            } else if hn.is_none_or(|k| d < dist[i * n + k]) {
                hn = Some(j);
            }
        }
        let hn = hn.ok_or_else(|| Error::contract("triplet loss needs at least two identities in the batch"))?;
        let hp = hp.ok_or_else(|| {
            Error::contract(format!("sample {i} has no positive partner in the batch"))
        })?;
        pos.push(i * n + hp);
        neg.push(i * n + hn);
    }
    Ok((pos, neg))
}

/// Batch-hard soft-margin triplet loss on Euclidean distances:
/// `mean_i ln(1 + exp(d_ap - d_an))`.
pub fn soft_triplet_loss<'t, F: Float>(features: Var<'t, F>, labels: &[usize]) -> Result<Var<'t, F>> {
    let s = features.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim(
            "soft_triplet_loss",
            format!("features {s:?} vs {} labels", labels.len()),
        ));
    }
    let dist = features.pairwise_distance()?;
    let (pos, neg) = mine_batch_hard(&dist.value().to_f64_vec(), labels)?;
    Ok(dist.gather(&pos)?.sub(dist.gather(&neg)?)?.softplus().mean())
}

/// `mean_b Σ_i |inv_bi · v_bi|`.
pub fn orthogonality_loss<'t, F: Float>(x_inv: Var<'t, F>, view_feat: Var<'t, F>) -> Result<Var<'t, F>> {
    let (a, b) = (x_inv.shape(), view_feat.shape());
    if a != b || a.len() != 2 {
        return Err(Error::shapes("orthogonality_loss", &a, &b));
    }
    Ok(x_inv.mul(view_feat)?.abs().sum().scale(1.0 / a[0] as f64))
}

/// The five loss terms; absent entries belong to ablated components.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<'t, F: Float> {
    pub id_g: Var<'t, F>,
    pub tri_g: Var<'t, F>,
    pub id_l: Option<Var<'t, F>>,
    pub tri_l: Option<Var<'t, F>>,
    pub view: Option<Var<'t, F>>,
    pub orth: Option<Var<'t, F>>,
}

/// Scalar values of each term, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub id_g: f64,
    pub tri_g: f64,
    pub id_l: f64,
    pub tri_l: f64,
    pub view: f64,
    pub orth: f64,
}

impl<'t, F: Float> LossParts<'t, F> {
    pub fn values(&self, total: Var<'t, F>) -> LossValues {
        let v = |x: Option<Var<'t, F>>| x.map_or(0.0, |x| x.item().to_f64());
        LossValues {
            total: total.item().to_f64(),
            id_g: self.id_g.item().to_f64(),
            tri_g: self.tri_g.item().to_f64(),
            id_l: v(self.id_l),
            tri_l: v(self.tri_l),
            view: v(self.view),
            orth: v(self.orth),
        }
    }
}

pub fn compute_losses<'t, F: Float>(
    model: &SeCap,
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    fwd: &Forward<'t, F>,
    id_labels: &[usize],
    view_labels: &[usize],
) -> Result<LossParts<'t, F>> {
    let x_inv = fwd.enc.x_inv;
    let id_g = id_ce_loss(tape, store, x_inv, id_labels, &model.heads.id_global)?;
    let tri_g = soft_triplet_loss(x_inv, id_labels)?;
    let (mut id_l, mut tri_l) = (None, None);
    if let (Some(local), Some(head)) = (fwd.local, &model.heads.id_local) {
        id_l = Some(id_ce_loss(tape, store, local, id_labels, head)?);
        tri_l = Some(soft_triplet_loss(local, id_labels)?);
    }
    let (mut view, mut orth) = (None, None);
    if let (Some(v), Some(head)) = (fwd.enc.view_feat, &model.heads.view) {
        view = Some(view_ce_loss(tape, store, v, view_labels, head)?);
        orth = Some(orthogonality_loss(x_inv, v)?);
    }
    Ok(LossParts {
        id_g,
        tri_g,
        id_l,
        tri_l,
        view,
        orth,
    })
}

/// `α(ID_g + Tri_g) + β(ID_l + Tri_l) + λ(L_view + L_orth)`.
pub fn total_loss<'t, F: Float>(parts: &LossParts<'t, F>, w: &LossWeights) -> Result<Var<'t, F>> {
    let group = |a: Option<Var<'t, F>>, b: Option<Var<'t, F>>, weight: f64| -> Result<Option<Var<'t, F>>> {
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some(a.add(b)?.scale(weight)),
            (Some(a), None) | (None, Some(a)) => Some(a.scale(weight)),
            (None, None) => None,
        })
    };
    let mut total = group(Some(parts.id_g), Some(parts.tri_g), w.alpha)?.expect("global terms present");
    for term in [
        group(parts.id_l, parts.tri_l, w.beta)?,
        group(parts.view, parts.orth, w.lambda)?,
    ]
    .into_iter()
    .flatten()
    {
        total = total.add(term)?;
    }
    Ok(total)
}
