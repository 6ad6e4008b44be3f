//! Deterministic procedural images for tests, demos and benchmarks.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::localized::IndexedMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Diagonal colour stripes with the given period in pixels.
pub fn stripes<S: Scalar>(height: usize, width: usize, period: usize) -> Tensor<S> {
    let p = period.max(1) as f64;
    Tensor::from_fn(3, height, width, |c, y, x| {
        let phase = TAU * (x + y) as f64 / p + c as f64 * 1.3;
        S::lit(0.5 + 0.4 * phase.sin())
    })
}

/// Smooth random texture: a few seeded plane waves per channel over a
/// channel-specific base level, plus fine noise, clipped to `[0, 1]`.
/// Every wave has an integer number of periods across the image, so the
/// texture tiles.
pub fn procedural_texture<S: Scalar>(height: usize, width: usize, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<Vec<(f64, f64, f64, f64)>> = (0..3)
        .map(|_| {
            (0..4)
                .map(|_| {
                    let fy = rng.random_range(1..6) as f64;
                    let fx = rng.random_range(1..6) as f64;
                    let amp = rng.random_range(0.05..0.15);
                    let phase = rng.random_range(0.0..TAU);
                    (fy, fx, amp, phase)
                })
                .collect()
        })
        .collect();
    let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.3..0.7)).collect();
    let noise: Vec<f64> = (0..3 * height * width)
        .map(|_| rng.random_range(-0.05..0.05))
        .collect();
    Tensor::from_fn(3, height, width, |c, y, x| {
        let (u, v) = (y as f64 / height as f64, x as f64 / width as f64);
        let mut s = base[c];
        for &(fy, fx, amp, phase) in &waves[c] {
            s += amp * (TAU * (fy * u + fx * v) + phase).sin();
        }
        s += noise[(c * height + y) * width + x];
        S::lit(s.clamp(0.0, 1.0))
    })
}

/// Left half dark fine stripes, right half bright coarse stripes, with the
/// matching two-region mask (0 left, 1 right).
pub fn two_region_fixture<S: Scalar>(height: usize, width: usize) -> (Tensor<S>, IndexedMask) {
    let half = width / 2;
    let img = Tensor::from_fn(3, height, width, |c, y, x| {
        let v = if x < half {
            0.25 + 0.15 * (TAU * (x + 2 * y) as f64 / 4.0 + c as f64).sin()
        } else {
            0.75 + 0.15 * (TAU * y as f64 / 8.0 + c as f64).sin()
        };
        S::lit(v)
    });
    let ids = (0..height * width).map(|p| (p % width >= half) as u32).collect();
    let mask = IndexedMask::new(height, width, ids, 2).expect("two non-empty halves");
    (img, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_in_range_and_deterministic() {
        let a = procedural_texture::<f64>(32, 32, 4);
        assert_eq!(a, procedural_texture::<f64>(32, 32, 4));
        assert_ne!(a, procedural_texture::<f64>(32, 32, 5));
        for t in [a, stripes(8, 12, 4), two_region_fixture(8, 8).0] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn two_region_halves_differ_in_brightness() {
        let (img, mask) = two_region_fixture::<f64>(8, 8);
        let mut sums = [0.0; 2];
        for (p, &id) in mask.indices().iter().enumerate() {
            sums[id as usize] += img.plane(0)[p];
        }
        assert!(sums[1] > 2.0 * sums[0]);
    }
}
