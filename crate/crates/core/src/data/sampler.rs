//! Identity-balanced P×K batches.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::SampleRecord;
use crate::error::{Error, Result};

/// `P` distinct identities with `K` records each, as indices into
/// `records`. Identities with fewer than `K` records are sampled with
/// replacement. Distractors are never drawn.
pub fn pk_sample(records: &[SampleRecord], p: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(Error::contract("P and K must be positive"));
    }
    let mut by_id: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.id >= 0 {
            by_id.entry(r.id).or_default().push(i);
        }
    }
    if by_id.len() < p {
        return Err(Error::contract(format!(
            "P={p} identities requested but only {} are available",
            by_id.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<&Vec<usize>> = by_id.values().collect();
    let chosen = rand::seq::index::sample(&mut rng, groups.len(), p);
    let mut batch = Vec::with_capacity(p * k);
    for g in chosen.iter().map(|i| groups[i]) {
        if g.len() >= k {
            let mut pool = g.clone();
            pool.shuffle(&mut rng);
            batch.extend_from_slice(&pool[..k]);
        } else {
            batch.extend((0..k).map(|_| *g.choose(&mut rng).expect("non-empty group")));
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::View;

    fn records(per_id: &[usize]) -> Vec<SampleRecord> {
        let mut v = Vec::new();
        for (id, &n) in per_id.iter().enumerate() {
            for f in 0..n {
                v.push(SampleRecord {
                    path: format!("train/{id}_{f}"),
                    id: id as i64,
                    camera: 0,
                    view: View::Aerial,
                    frame: f as u32,
                });
            }
        }
        v
    }

    #[test]
    fn batch_shape_and_determinism() {
        let recs = records(&[5; 20]);
        let b = pk_sample(&recs, 16, 4, 7).unwrap();
        assert_eq!(b.len(), 64);
        assert_eq!(b, pk_sample(&recs, 16, 4, 7).unwrap());
        for chunk in b.chunks(4) {
            assert!(chunk.iter().all(|&i| recs[i].id == recs[chunk[0]].id));
        }
    }

    #[test]
    fn small_identity_is_duplicated() {
        let recs = records(&[1, 1]);
        let b = pk_sample(&recs, 2, 2, 0).unwrap();
        assert_eq!(b.len(), 4);
        for chunk in b.chunks(2) {
            assert_eq!(chunk[0], chunk[1]);
        }
    }

    #[test]
    fn too_few_identities() {
        assert!(matches!(pk_sample(&records(&[3, 3]), 3, 2, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_frequency_is_binomial() {
        let (ids, p, trials) = (10usize, 3usize, 2000usize);
        let recs = records(&vec![2; ids]);
        let mut hits = vec![0usize; ids];
        for seed in 0..trials as u64 {
            let b = pk_sample(&recs, p, 2, seed).unwrap();
            for chunk in b.chunks(2) {
                hits[recs[chunk[0]].id as usize] += 1;
            }
        }
        let q = p as f64 / ids as f64;
        let mean = trials as f64 * q;
        let sigma = (trials as f64 * q * (1.0 - q)).sqrt();
        for h in hits {
            assert!((h as f64 - mean).abs() <= 3.0 * sigma, "{h} vs {mean}±{sigma}");
        }
    }
}
