//! Training augmentation: pad-and-crop, per-channel colour jitter and
//! random erasing, all driven by one seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub pad: usize,
    pub jitter: (f32, f32),
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            pad: 4,
            jitter: (0.8, 1.2),
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// The random draws behind one augmented image.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentTrace {
    /// Offset of the crop window inside the padded image.
    pub crop: (usize, usize),
    pub gains: Vec<f32>,
    pub erased: Option<Rect>,
}

pub fn augment(image: &Tensor<f32>, policy: &AugmentPolicy, seed: u64) -> Tensor<f32> {
    augment_traced(image, policy, seed).0
}

/// Augments a `[C, H, W]` image; the output has the same shape.
pub fn augment_traced(image: &Tensor<f32>, policy: &AugmentPolicy, seed: u64) -> (Tensor<f32>, AugmentTrace) {
    let &[c, h, w] = image.shape() else {
        panic!("augment expects [C, H, W], got {:?}", image.shape());
    };
    if !policy.enabled {
        let trace = AugmentTrace {
            crop: (policy.pad, policy.pad),
            gains: vec![1.0; c],
            erased: None,
        };
        return (image.clone(), trace);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = policy.pad;
    let (dy, dx) = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
    let gains: Vec<f32> = (0..c).map(|_| rng.random_range(policy.jitter.0..=policy.jitter.1)).collect();
    let src = image.data();
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            // Row y of the crop is row y + dy - pad of the original.
            let Some(sy) = (y + dy).checked_sub(pad).filter(|&sy| sy < h) else { continue };
            for x in 0..w {
                let Some(sx) = (x + dx).checked_sub(pad).filter(|&sx| sx < w) else { continue };
                out[(ci * h + y) * w + x] = src[(ci * h + sy) * w + sx] * gains[ci];
            }
        }
    }

    let mut erased = None;
    if rng.random_bool(policy.erase_prob.clamp(0.0, 1.0)) {
        let area = (h * w) as f64;
        for _ in 0..100 {
            let target = rng.random_range(policy.erase_area.0..=policy.erase_area.1) * area;
            let (la, lb) = (policy.erase_aspect.0.ln(), policy.erase_aspect.1.ln());
            let aspect = rng.random_range(la..=lb).exp();
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            let frac = (eh * ew) as f64 / area;
            if eh == 0 || ew == 0 || eh >= h || ew >= w || frac < policy.erase_area.0 || frac > policy.erase_area.1 {
                continue;
            }
            let rect = Rect {
                top: rng.random_range(0..=h - eh),
                left: rng.random_range(0..=w - ew),
                height: eh,
                width: ew,
            };
            for ci in 0..c {
                for y in rect.top..rect.top + eh {
                    for x in rect.left..rect.left + ew {
                        out[(ci * h + y) * w + x] = rng.random::<f32>();
                    }
                }
            }
            erased = Some(rect);
            break;
        }
    }
    let tensor = Tensor::new(image.shape(), out).expect("same shape");
    (
        tensor,
        AugmentTrace {
            crop: (dy, dx),
            gains,
            erased,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[3, 64, 32], (0..3 * 64 * 32).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn disabled_policy_is_bit_identical() {
        let img = image(1);
        assert_eq!(augment(&img, &AugmentPolicy::disabled(), 5).to_rten_bytes(), img.to_rten_bytes());
    }

    #[test]
    fn shape_and_determinism() {
        let img = image(2);
        let p = AugmentPolicy::default();
        let a = augment(&img, &p, 11);
        assert_eq!(a.shape(), img.shape());
        assert_eq!(a.to_rten_bytes(), augment(&img, &p, 11).to_rten_bytes());
        assert_ne!(a.to_rten_bytes(), augment(&img, &p, 12).to_rten_bytes());
    }

    #[test]
    fn erased_rectangle_is_in_bounds_and_sized() {
        let img = image(3);
        let p = AugmentPolicy {
            erase_prob: 1.0,
            ..AugmentPolicy::default()
        };
        for seed in 0..200 {
            let (_, trace) = augment_traced(&img, &p, seed);
            let r = trace.erased.expect("erasing always applies");
            assert!(r.top + r.height <= 64 && r.left + r.width <= 32);
            let frac = (r.height * r.width) as f64 / (64.0 * 32.0);
            assert!((0.02..=0.4).contains(&frac), "{frac}");
            assert!(trace.gains.iter().all(|g| (0.8..=1.2).contains(g)));
        }
    }
}
