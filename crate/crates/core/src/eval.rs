//! Retrieval evaluation: feature extraction, cosine distances, CMC Rank-1
//! and mAP, plus an independent brute-force scorer used as a test oracle.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::data::manifest::{SampleRecord, View};
use crate::data::protocol::{ProtocolName, ProtocolSplit};
use crate::error::{Error, Result};
use crate::model::SeCap;
use crate::tensor::{Float, Tensor};

/// Identity and camera of one query or gallery entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Meta {
    pub id: i64,
    pub camera: u32,
}

/// Row-aligned features and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub paths: Vec<String>,
    pub ids: Vec<i64>,
    pub cameras: Vec<u32>,
    pub views: Vec<View>,
    /// `[N, D]`.
    pub features: Tensor<f32>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn meta(&self) -> Vec<Meta> {
        self.ids
            .iter()
            .zip(&self.cameras)
            .map(|(&id, &camera)| Meta { id, camera })
            .collect()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }

    /// Rows for `records`, looked up by path.
    pub fn select(&self, records: &[SampleRecord]) -> Result<FeatureSet> {
        let index: HashMap<&str, usize> = self.paths.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
        let d = self.dim();
        let mut out = Vec::with_capacity(records.len() * d);
        for r in records {
            let &i = index
                .get(r.path.as_str())
                .ok_or_else(|| Error::contract(format!("no feature for {}", r.path)))?;
            out.extend_from_slice(self.row(i));
        }
        Ok(FeatureSet {
            paths: records.iter().map(|r| r.path.clone()).collect(),
            ids: records.iter().map(|r| r.id).collect(),
            cameras: records.iter().map(|r| r.camera).collect(),
            views: records.iter().map(|r| r.view).collect(),
            features: Tensor::new(&[records.len(), d], out)?,
        })
    }
}

/// Runs the model over `records` in batches with no augmentation. `load`
/// supplies each record's `[3, H, W]` image.
pub fn extract_features<F, L>(
    model: &SeCap,
    store: &ParamStore<F>,
    records: &[SampleRecord],
    batch_size: usize,
    load: L,
) -> Result<FeatureSet>
where
    F: Float,
    L: Fn(&SampleRecord) -> Result<Tensor<f32>>,
{
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let dim = model.cfg.feature_dim();
    let mut data = Vec::with_capacity(records.len() * dim);
    for chunk in records.chunks(batch_size) {
        let images = chunk.iter().map(|r| load(r).map(|t| t.cast::<F>())).collect::<Result<Vec<_>>>()?;
        let feats = model.features(store, &Tensor::stack(&images)?)?;
        data.extend(feats.data().iter().map(|v| v.to_f64() as f32));
    }
    Ok(FeatureSet {
        paths: records.iter().map(|r| r.path.clone()).collect(),
        ids: records.iter().map(|r| r.id).collect(),
        cameras: records.iter().map(|r| r.camera).collect(),
        views: records.iter().map(|r| r.view).collect(),
        features: Tensor::new(&[records.len(), dim], data)?,
    })
}

fn normalized_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data()
        .chunks(d.max(1))
        .map(|row| {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|&v| v as f64 / norm).collect()
        })
        .collect()
}

/// Cosine distance `1 - q·g` between L2-normalised rows, row-major
/// `[Nq, Ng]`, clamped to `[0, 2]`.
pub fn distance_matrix(q: &Tensor<f32>, g: &Tensor<f32>) -> Result<Vec<f64>> {
    if q.rank() != 2 || g.rank() != 2 || q.shape()[1] != g.shape()[1] {
        return Err(Error::shapes("distance_matrix", q.shape(), g.shape()));
    }
    let (qn, gn) = (normalized_rows(q), normalized_rows(g));
    Ok(qn
        .par_iter()
        .flat_map_iter(|a| {
            gn.iter()
                .map(move |b| (1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).clamp(0.0, 2.0))
        })
        .collect())
}

/// Scores over the queries that have at least one valid match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_valid: usize,
    pub num_excluded: usize,
}

fn check_inputs(dist: &[f64], q: &[Meta], g: &[Meta]) -> Result<()> {
    if q.is_empty() || g.is_empty() {
        return Err(Error::Protocol("empty query or gallery".into()));
    }
    if dist.len() != q.len() * g.len() {
        return Err(Error::dim(
            "cmc_map",
            format!("{} distances for {}x{} pairs", dist.len(), q.len(), g.len()),
        ));
    }
    Ok(())
}

fn finish(per_query: impl Iterator<Item = Option<(f64, f64)>>, nq: usize) -> Result<Metrics> {
    let (mut r1, mut ap, mut valid) = (0.0, 0.0, 0usize);
    for (hit, a) in per_query.flatten() {
        r1 += hit;
        ap += a;
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::Protocol("no query has a valid gallery match".into()));
    }
    Ok(Metrics {
        rank1: r1 / valid as f64,
        map: ap / valid as f64,
        num_valid: valid,
        num_excluded: nq - valid,
    })
}

/// CMC Rank-1 and mAP. Per query the gallery is sorted by distance (ties by
/// gallery index), entries sharing both identity and camera with the query
/// are dropped, and distractors stay as negatives. Queries left without a
/// match are excluded and counted.
pub fn cmc_map(dist: &[f64], q: &[Meta], g: &[Meta]) -> Result<Metrics> {
    check_inputs(dist, q, g)?;
    let ng = g.len();
    let per_query: Vec<Option<(f64, f64)>> = q
        .par_iter()
        .enumerate()
        .map(|(qi, qm)| {
            let row = &dist[qi * ng..(qi + 1) * ng];
            let mut order: Vec<usize> = (0..ng).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let mut rank = 0usize;
            let (mut hits, mut precision_sum, mut first) = (0usize, 0.0, None);
            for j in order {
                let gm = g[j];
                if gm.id == qm.id && gm.camera == qm.camera {
                    continue;
                }
                rank += 1;
                let matched = qm.id >= 0 && gm.id == qm.id;
                first.get_or_insert(matched);
                if matched {
                    hits += 1;
                    precision_sum += hits as f64 / rank as f64;
                }
            }
            (hits > 0).then(|| (if first == Some(true) { 1.0 } else { 0.0 }, precision_sum / hits as f64))
        })
        .collect();
    finish(per_query.into_iter(), q.len())
}

/// Same metrics from the definitions with explicit loops: every valid
/// entry's rank is counted directly instead of sorting.
pub fn oracle_cmc_map(dist: &[f64], q: &[Meta], g: &[Meta]) -> Result<Metrics> {
    check_inputs(dist, q, g)?;
    let ng = g.len();
    let mut per_query = Vec::with_capacity(q.len());
    for qi in 0..q.len() {
        let valid = |j: usize| !(g[j].id == q[qi].id && g[j].camera == q[qi].camera);
        let is_match = |j: usize| q[qi].id >= 0 && g[j].id == q[qi].id && valid(j);
        let d = |j: usize| dist[qi * ng + j];
        let mut ranks_of_matches = Vec::new();
        let mut top_is_match = false;
        for j in 0..ng {
            if !valid(j) {
                continue;
            }
            let mut rank = 1;
            for k in 0..ng {
                if valid(k) && (d(k) < d(j) || (d(k) == d(j) && k < j)) {
                    rank += 1;
                }
            }
            if rank == 1 {
                top_is_match = is_match(j);
            }
            if is_match(j) {
                ranks_of_matches.push(rank);
            }
        }
        if ranks_of_matches.is_empty() {
            per_query.push(None);
            continue;
        }
        let mut ap = 0.0;
        for &r in &ranks_of_matches {
            let at_or_above = ranks_of_matches.iter().filter(|&&s| s <= r).count();
            ap += at_or_above as f64 / r as f64;
        }
        ap /= ranks_of_matches.len() as f64;
        per_query.push(Some((if top_is_match { 1.0 } else { 0.0 }, ap)));
    }
    finish(per_query.into_iter(), q.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: String,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub num_excluded: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Scores one protocol using features extracted for all test records.
pub fn evaluate_split(all: &FeatureSet, split: &ProtocolSplit) -> Result<EvalReport> {
    let (q, g) = (all.select(&split.query)?, all.select(&split.gallery)?);
    let dist = distance_matrix(&q.features, &g.features)?;
    let m = cmc_map(&dist, &q.meta(), &g.meta())?;
    Ok(EvalReport {
        protocol: split.name.to_string(),
        rank1: m.rank1,
        map: m.map,
        num_queries: q.len(),
        num_gallery: g.len(),
        num_excluded: m.num_excluded,
    })
}

/// Extracts features for every test record once and scores each protocol.
/// `designated` are the candidate query images of both views.
pub fn evaluate_protocols<F, L>(
    model: &SeCap,
    store: &ParamStore<F>,
    test: &[SampleRecord],
    designated: &[SampleRecord],
    protocols: &[ProtocolName],
    batch_size: usize,
    load: L,
) -> Result<Vec<EvalReport>>
where
    F: Float,
    L: Fn(&SampleRecord) -> Result<Tensor<f32>>,
{
    let all = extract_features(model, store, test, batch_size, load)?;
    protocols
        .iter()
        .map(|&p| evaluate_split(&all, &crate::data::protocol::build_protocol(test, p, designated)?))
        .collect()
}

/// Mean mAP over the two cross-view protocols.
pub fn cross_view_map(reports: &[EvalReport]) -> Option<f64> {
    let pick = |n: ProtocolName| reports.iter().find(|r| r.protocol == n.to_string()).map(|r| r.map);
    Some((pick(ProtocolName::A2G)? + pick(ProtocolName::G2A)?) / 2.0)
}
