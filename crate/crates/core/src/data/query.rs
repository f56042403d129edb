//! Representative query selection: gradient-histogram descriptors, k-NN
//! grouping, one medoid per group.

use std::collections::BTreeMap;

use super::manifest::SampleRecord;
use crate::error::Result;
use crate::tensor::Tensor;

pub const HOG_CELL: usize = 8;
pub const HOG_BINS: usize = 9;

/// Histogram-of-gradients descriptor of a `[C, H, W]` image: grayscale,
/// centred differences, 9 unsigned orientation bins with linear vote
/// splitting, 8×8 cells, L2-normalised 2×2-cell blocks at a one-cell
/// stride.
pub fn hog_descriptor(image: &Tensor<f32>) -> Vec<f64> {
    let &[c, h, w] = image.shape() else {
        panic!("hog expects [C, H, W], got {:?}", image.shape());
    };
    let src = image.data();
    let gray: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ci| src[ci * h * w + i] as f64).sum::<f64>() / c as f64)
        .collect();
    let (ch, cw) = (h / HOG_CELL, w / HOG_CELL);
    let mut cells = vec![0.0f64; ch * cw * HOG_BINS];
    let at = |y: usize, x: usize| gray[y * w + x];
    for y in 0..ch * HOG_CELL {
        for x in 0..cw * HOG_CELL {
            let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let pos = angle / (180.0 / HOG_BINS as f64) - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as i64).rem_euclid(HOG_BINS as i64) as usize;
            let b1 = (b0 + 1) % HOG_BINS;
            let cell = ((y / HOG_CELL) * cw + x / HOG_CELL) * HOG_BINS;
            cells[cell + b0] += mag * (1.0 - frac);
            cells[cell + b1] += mag * frac;
        }
    }
    if ch < 2 || cw < 2 {
        return cells;
    }
    let mut out = Vec::with_capacity((ch - 1) * (cw - 1) * 4 * HOG_BINS);
    for by in 0..ch - 1 {
        for bx in 0..cw - 1 {
            let start = out.len();
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let cell = ((by + dy) * cw + bx + dx) * HOG_BINS;
                out.extend_from_slice(&cells[cell..cell + HOG_BINS]);
            }
            let norm = (out[start..].iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            for v in &mut out[start..] {
                *v /= norm;
            }
        }
    }
    out
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Member whose summed distance to the rest is smallest; ties go to the
/// first member.
fn medoid(members: &[usize], dist: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, members[0]);
    for &i in members {
        let s: f64 = members.iter().map(|&j| dist[i][j]).sum();
        if s < best.0 {
            best = (s, i);
        }
    }
    best.1
}

/// Groups `descs` into `groups` clusters by single linkage, merging along
/// k-nearest-neighbour edges (`k = min(3, n-1)`) first and along the
/// remaining pairs only if that leaves too many clusters. Returns member
/// lists ordered by their first index.
pub fn knn_groups(descs: &[Vec<f64>], groups: usize) -> Vec<Vec<usize>> {
    let n = descs.len();
    let dist: Vec<Vec<f64>> = descs
        .iter()
        .map(|a| descs.iter().map(|b| euclidean(a, b)).collect())
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut i = i;
        while p[i] != r {
            let next = p[i];
            p[i] = r;
            i = next;
        }
        r
    }
    let mut components = n;
    let target = groups.max(1);
    let k = 3.min(n.saturating_sub(1));
    let mut knn_edges = Vec::new();
    let mut other_edges = Vec::new();
    for (i, row) in dist.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        for (rank, &j) in order.iter().enumerate() {
            let edge = (row[j], i.min(j), i.max(j));
            if rank < k {
                knn_edges.push(edge);
            } else {
                other_edges.push(edge);
            }
        }
    }
    for edges in [&mut knn_edges, &mut other_edges] {
        edges.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        for &(_, i, j) in edges.iter() {
            if components <= target {
                break;
            }
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri.max(rj)] = ri.min(rj);
                components -= 1;
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        by_root.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = by_root.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Representatives of one identity's images: the medoid of each k-NN group.
pub fn representatives(descs: &[Vec<f64>], count: usize) -> Vec<usize> {
    let dist: Vec<Vec<f64>> = descs
        .iter()
        .map(|a| descs.iter().map(|b| euclidean(a, b)).collect())
        .collect();
    let mut reps: Vec<usize> = knn_groups(descs, count)
        .iter()
        .map(|g| medoid(g, &dist))
        .collect();
    reps.sort_unstable();
    reps
}

/// Picks up to `per_view` query images for every identity in each view
/// group (aerial, ground). `load` returns the image for a record. Records
/// are visited in path order, so ties resolve to the first path.
/// Distractors are never selected.
pub fn select_queries<L>(test: &[SampleRecord], per_view: usize, mut load: L) -> Result<Vec<SampleRecord>>
where
    L: FnMut(&SampleRecord) -> Result<Tensor<f32>>,
{
    let mut groups: BTreeMap<(i64, bool), Vec<&SampleRecord>> = BTreeMap::new();
    for r in test.iter().filter(|r| !r.is_distractor()) {
        groups.entry((r.id, r.view.is_aerial())).or_default().push(r);
    }
    let mut out = Vec::new();
    for mut members in groups.into_values() {
        members.sort_by(|a, b| a.path.cmp(&b.path));
        let descs = members
            .iter()
            .map(|r| load(r).map(|img| hog_descriptor(&img)))
            .collect::<Result<Vec<_>>>()?;
        out.extend(representatives(&descs, per_view).into_iter().map(|i| members[i].clone()));
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}
