//! Classifier-free guidance and categorical sampling over logit rows.

use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{CoreError, Result};

/// `ℓ_g = (1 + s)·ℓ_c − s·ℓ_u`, elementwise, evaluated as `ℓ_c + s·(ℓ_c − ℓ_u)`
/// so that `ℓ_c = ℓ_u` is an exact fixed point.
pub fn logits_cfg<T: Float>(cond: &[T], uncond: &[T], scale: T) -> Result<Vec<T>> {
    if cond.len() != uncond.len() {
        return Err(CoreError::ShapeMismatch { what: "guidance logits", expected: cond.len(), got: uncond.len() });
    }
    if scale == T::zero() {
        return Ok(cond.to_vec());
    }
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| c + scale * (c - u)).collect())
}

/// Sets the logit at `index` to `-inf` so it can never be sampled.
pub fn exclude<T: Float>(logits: &mut [T], index: usize) {
    if let Some(l) = logits.get_mut(index) {
        *l = T::neg_infinity();
    }
}

/// Temperature softmax; `-inf` logits receive probability exactly zero.
pub fn softmax(logits: &[f32], temperature: f32) -> Result<Vec<f32>> {
    if !(temperature > 0.0) {
        return Err(CoreError::InvalidParameter("temperature must be positive"));
    }
    if logits.iter().any(|l| l.is_nan()) {
        return Err(CoreError::NonFinite("logits"));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Err(CoreError::InvalidParameter("all logits are -inf"));
    }
    let mut probs: Vec<f32> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f32 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Log-softmax in `f64` for scoring.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l as f64 - lse).collect()
}

/// Keeps the `k` largest logits and sets the rest to `-inf`.
pub fn top_k(logits: &mut [f32], k: usize) {
    if k == 0 || k >= logits.len() {
        return;
    }
    let mut sorted: Vec<f32> = logits.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    let cutoff = sorted[k - 1];
    let mut kept = 0;
    for l in logits.iter_mut() {
        if *l >= cutoff && kept < k {
            kept += 1;
        } else {
            *l = f32::NEG_INFINITY;
        }
    }
}

/// Draws an index from `probs` by inverse CDF.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f32], rng: &mut R) -> usize {
    let u: f32 = rng.gen();
    let mut acc = 0.0f32;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    // Rounding left u above the accumulated mass.
    last_positive
}

/// Index of the maximum; ties go to the smallest index.
pub fn argmax<T: Float>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_scale_is_identity() {
        let c = [1.5f32, -2.0, 0.25];
        let u = [9.0f32, 9.0, 9.0];
        assert_eq!(logits_cfg(&c, &u, 0.0).unwrap(), c.to_vec());
    }

    #[test]
    fn equal_logits_are_a_fixed_point() {
        let c = [1.5f64, -2.0, 0.25];
        for s in [0.5, 3.0, 7.0] {
            assert_eq!(logits_cfg(&c, &c, s).unwrap(), c.to_vec());
        }
    }

    #[test]
    fn hand_substitution() {
        assert_eq!(logits_cfg(&[2.0f64; 3], &[1.0; 3], 3.0).unwrap(), vec![5.0; 3]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(logits_cfg(&[1.0f32], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn excluded_index_has_zero_probability() {
        let mut l = vec![0.3f32, 2.0, -1.0];
        exclude(&mut l, 1);
        let p = softmax(&l, 1.0).unwrap();
        assert_eq!(p[1], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            assert_ne!(sample_categorical(&p, &mut rng), 1);
        }
    }

    #[test]
    fn sampling_frequencies() {
        let p = [0.2f32, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ones = (0..20_000).filter(|_| sample_categorical(&p, &mut rng) == 1).count();
        assert!((ones as f64 / 20_000.0 - 0.8).abs() < 0.01);
    }

    #[test]
    fn top_k_keeps_largest() {
        let mut l = vec![0.1f32, 3.0, 2.0, -1.0];
        top_k(&mut l, 2);
        assert_eq!(l[1], 3.0);
        assert_eq!(l[2], 2.0);
        assert_eq!(l[0], f32::NEG_INFINITY);
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0, 2.0, f32::NEG_INFINITY]);
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(lp[2], f64::NEG_INFINITY);
    }
}
