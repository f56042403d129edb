//! Deterministic synthetic cross-view corpus.
//!
//! Every identity owns a latent appearance: an RGB colour for each of four
//! body regions (head, torso, legs, feet). Identity latents are drawn by
//! rejection so any two sit at least [`LATENT_MARGIN`] apart, and each
//! image perturbs its identity's latent by at most a fifth of that. Views
//! apply a fixed geometric squash and colour shift, cameras a fixed gain,
//! and every image gets its own placement jitter and pixel noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::manifest::{Manifest, SampleRecord, View};
use super::naming::{format_image_name, ImageName};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const REGIONS: usize = 4;
pub const LATENT_DIM: usize = REGIONS * 3;
pub const LATENT_MARGIN: f64 = 0.5;
/// Upper bound on the L2 norm of a per-image latent perturbation.
pub const LATENT_JITTER: f64 = LATENT_MARGIN / 5.0;
pub const CAMERAS_PER_VIEW: u32 = 2;
pub const MANIFEST_FILE: &str = "manifest.tsv";

const REGION_SPLITS: [f64; REGIONS] = [0.15, 0.35, 0.35, 0.15];
const PIXEL_NOISE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub images_per_id_per_view: usize,
    /// 2 (aerial, ground-frontal) or 3 (adds ground-oblique).
    pub num_views: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
    /// Scales the view squash and colour shift; 0 makes views identical up
    /// to camera gain.
    pub view_strength: f64,
    /// Identity `-1` images added to the test split.
    pub distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 8,
            images_per_id_per_view: 4,
            num_views: 2,
            image_height: 64,
            image_width: 32,
            seed: 0,
            view_strength: 1.0,
            distractors: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids == 0 || self.images_per_id_per_view == 0 {
            return Err(Error::Config("identity and image counts must be at least 1".into()));
        }
        if !(2..=3).contains(&self.num_views) {
            return Err(Error::Config(format!("num_views must be 2 or 3, got {}", self.num_views)));
        }
        if self.image_height < 8 || self.image_width < 8 {
            return Err(Error::Config("images must be at least 8x8".into()));
        }
        if !(0.0..=1.0).contains(&self.view_strength) {
            return Err(Error::Config("view_strength must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn views(&self) -> &'static [View] {
        &[View::Aerial, View::GroundFrontal, View::GroundOblique][..self.num_views]
    }

    /// Identities below this go to the train split, the rest to test.
    pub fn train_ids(&self) -> usize {
        self.num_ids.div_ceil(2)
    }
}

/// FNV-1a over the bytes, finished with a splitmix round.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &b in seed.to_le_bytes().iter().chain(key.as_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Identity latents in `[0.1, 0.9]^12`, pairwise at least `LATENT_MARGIN`
/// apart.
pub fn identity_latents(num_ids: usize, seed: u64) -> Result<Vec<[f64; LATENT_DIM]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "identity-latents"));
    let mut out: Vec<[f64; LATENT_DIM]> = Vec::with_capacity(num_ids);
    while out.len() < num_ids {
        let mut accepted = false;
        for _ in 0..10_000 {
            let cand: [f64; LATENT_DIM] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            if out.iter().all(|o| distance(o, &cand) >= LATENT_MARGIN) {
                out.push(cand);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Config(format!(
                "cannot place {num_ids} identities {LATENT_MARGIN} apart"
            )));
        }
    }
    Ok(out)
}

/// The identity latent plus a perturbation of norm at most `LATENT_JITTER`.
pub fn image_latent(identity: &[f64; LATENT_DIM], rng: &mut ChaCha8Rng) -> [f64; LATENT_DIM] {
    let dir: [f64; LATENT_DIM] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let radius = rng.random_range(0.0..LATENT_JITTER);
    std::array::from_fn(|i| identity[i] + dir[i] / norm * radius)
}

fn camera_gain(seed: u64, camera: u32) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("camera-{camera}")));
    std::array::from_fn(|_| rng.random_range(0.9..1.1))
}

fn view_shift(view: View, strength: f64) -> [f64; 3] {
    let base = match view {
        View::Aerial => [0.08, -0.04, 0.10],
        View::GroundFrontal => [0.0, 0.0, 0.0],
        View::GroundOblique => [-0.05, 0.06, 0.0],
    };
    base.map(|v| v * strength)
}

/// Renders a `[3, H, W]` image of a figure coloured by `latent`.
pub fn render(
    latent: &[f64; LATENT_DIM],
    view: View,
    gain: [f64; 3],
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let s = cfg.view_strength;
    // Aerial foreshortening squashes the figure vertically, the oblique
    // ground view horizontally.
    let (sy, sx) = match view {
        View::Aerial => (1.0 - 0.4 * s, 1.0),
        View::GroundFrontal => (1.0, 1.0),
        View::GroundOblique => (1.0, 1.0 - 0.3 * s),
    };
    let fig_h = (0.85 * h as f64 * sy).round().max(REGIONS as f64) as i64;
    let fig_w = (0.5 * w as f64 * sx).round().max(2.0) as i64;
    let dy: i64 = rng.random_range(-2..=2);
    let dx: i64 = rng.random_range(-2..=2);
    let bottom = (0.95 * h as f64).round() as i64 + dy;
    let top = bottom - fig_h;
    let left = (w as i64 - fig_w) / 2 + dx;
    let background: f64 = rng.random_range(0.3..0.5);
    let shift = view_shift(view, s);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive std");

    let mut bounds = [0i64; REGIONS + 1];
    let mut acc = 0.0;
    for (r, frac) in REGION_SPLITS.iter().enumerate() {
        acc += frac;
        bounds[r + 1] = top + (acc * fig_h as f64).round() as i64;
    }
    bounds[0] = top;

    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h as i64 {
        let region = (0..REGIONS).find(|&r| y >= bounds[r] && y < bounds[r + 1]);
        for x in 0..w as i64 {
            let inside = region.filter(|_| x >= left && x < left + fig_w);
            for c in 0..3 {
                let base = match inside {
                    Some(r) => latent[r * 3 + c] + shift[c],
                    None => background,
                };
                let v = base * gain[c] + noise.sample(rng);
                data[(c * h + y as usize) * w + x as usize] = v as f32;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("consistent shape")
}

struct Plan {
    record: SampleRecord,
    latent: [f64; LATENT_DIM],
}

fn plan(cfg: &SynthConfig) -> Result<Vec<Plan>> {
    let latents = identity_latents(cfg.num_ids, cfg.seed)?;
    let train_ids = cfg.train_ids();
    let mut out = Vec::new();
    let mut push = |id: i64, view: View, vi: usize, frame: u32, split: &str, latent| {
        let camera = vi as u32 * CAMERAS_PER_VIEW + frame % CAMERAS_PER_VIEW;
        let name = format_image_name(&ImageName { identity: id, camera, frame }, "rten");
        out.push(Plan {
            record: SampleRecord {
                path: format!("{split}/{view}/{name}"),
                id,
                camera,
                view,
                frame,
            },
            latent,
        });
    };
    for (id, latent) in latents.iter().enumerate() {
        let split = if id < train_ids { "train" } else { "test" };
        for (vi, &view) in cfg.views().iter().enumerate() {
            for frame in 0..cfg.images_per_id_per_view {
                push(id as i64, view, vi, frame as u32, split, *latent);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "distractors"));
    for i in 0..cfg.distractors {
        let vi = i % cfg.num_views;
        let latent = std::array::from_fn(|_| rng.random_range(0.1..0.9));
        push(-1, cfg.views()[vi], vi, i as u32, "test", latent);
    }
    Ok(out)
}

/// Renders one planned record; the result depends only on the config and
/// the record's path.
fn realise(cfg: &SynthConfig, p: &Plan) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &p.record.path));
    let latent = if p.record.is_distractor() { p.latent } else { image_latent(&p.latent, &mut rng) };
    render(&latent, p.record.view, camera_gain(cfg.seed, p.record.camera), cfg, &mut rng)
}

/// Builds the corpus in memory without touching disk.
pub fn synthesize(cfg: &SynthConfig) -> Result<(Manifest, Vec<Tensor<f32>>)> {
    cfg.validate()?;
    let mut plans = plan(cfg)?;
    // Same order as the manifest, which sorts by path.
    plans.sort_by(|a, b| a.record.path.cmp(&b.record.path));
    let images: Vec<Tensor<f32>> = plans.par_iter().map(|p| realise(cfg, p)).collect();
    let records = plans.into_iter().map(|p| p.record).collect();
    let manifest = Manifest::new(
        format!("synthetic-seed{}", cfg.seed),
        cfg.num_views,
        cfg.image_height,
        cfg.image_width,
        records,
    )?;
    Ok((manifest, images))
}

/// Writes `manifest.tsv` and one `.rten` file per record under `out`.
/// Returns the manifest path.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<std::path::PathBuf> {
    let (manifest, images) = synthesize(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    manifest
        .records
        .par_iter()
        .zip(images.par_iter())
        .try_for_each(|(r, img)| {
            let path = out.join(&r.path);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            img.write_rten(&path)
        })?;
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_layout() {
        let cfg = SynthConfig::default();
        let (m, images) = synthesize(&cfg).unwrap();
        assert_eq!(m.records.len(), 64);
        assert_eq!(images.len(), 64);
        assert_eq!(m.train().len(), 32);
        assert!(images.iter().all(|t| t.shape() == [3, 64, 32]));
        let cams: std::collections::BTreeSet<u32> = m.records.iter().map(|r| r.camera).collect();
        assert_eq!(cams.len(), 4);
    }

    #[test]
    fn same_seed_gives_identical_corpus_on_disk() {
        let cfg = SynthConfig {
            num_ids: 4,
            images_per_id_per_view: 2,
            distractors: 3,
            ..SynthConfig::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&cfg, a.path()).unwrap();
        generate_synthetic(&cfg, b.path()).unwrap();
        let m = Manifest::read(&a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.records.iter().filter(|r| r.is_distractor()).count(), 3);
        for r in &m.records {
            let x = std::fs::read(a.path().join(&r.path)).unwrap();
            let y = std::fs::read(b.path().join(&r.path)).unwrap();
            assert_eq!(x, y, "{}", r.path);
        }
        assert_eq!(
            std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn cross_view_same_identity_beats_within_view_different_identity() {
        let latents = identity_latents(16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<Vec<[f64; LATENT_DIM]>> = latents
            .iter()
            .map(|l| (0..4).map(|_| image_latent(l, &mut rng)).collect())
            .collect();
        let worst_same = samples
            .iter()
            .flat_map(|s| s.iter().flat_map(move |a| s.iter().map(move |b| distance(a, b))))
            .fold(0.0, f64::max);
        let mut best_diff = f64::INFINITY;
        for i in 0..samples.len() {
            for j in 0..samples.len() {
                if i != j {
                    for a in &samples[i] {
                        for b in &samples[j] {
                            best_diff = best_diff.min(distance(a, b));
                        }
                    }
                }
            }
        }
        assert!(worst_same <= 2.0 * LATENT_JITTER);
        assert!(best_diff >= LATENT_MARGIN - 2.0 * LATENT_JITTER);
        assert!(worst_same < best_diff);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { num_ids: 0, ..SynthConfig::default() },
            SynthConfig { num_views: 1, ..SynthConfig::default() },
        ] {
            assert!(matches!(synthesize(&cfg), Err(Error::Config(_))));
        }
    }
}
