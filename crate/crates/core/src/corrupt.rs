//! Training-time input corruption and condition dropout.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::TokenId;

/// Conditioning signal at sequence position 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Label(u32),
    /// The learned unconditional embedding.
    Null,
}

impl Condition {
    pub fn label(&self) -> Option<u32> {
        match self {
            Condition::Label(l) => Some(*l),
            Condition::Null => None,
        }
    }
}

/// Replaces each masked motion token with a uniform code id in `[0, k)` with
/// probability `prob`. `tokens` is indexed by sequence position; positions not
/// listed in `masked` are never touched. Returns the number of replacements.
pub fn corrupt_inputs<R: Rng + ?Sized>(
    tokens: &mut [TokenId],
    masked: &[usize],
    codebook_size: usize,
    prob: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(CoreError::InvalidParameter("corruption probability must lie in [0, 1]"));
    }
    let mut replaced = 0;
    for &p in masked {
        if p >= tokens.len() {
            return Err(CoreError::OutOfRange { what: "masked position", index: p, bound: tokens.len() });
        }
        if rng.gen::<f64>() < prob {
            tokens[p] = rng.gen_range(0..codebook_size as TokenId);
            replaced += 1;
        }
    }
    Ok(replaced)
}

/// Swaps each condition for [`Condition::Null`] with probability `prob`.
/// Returns the number of dropped conditions.
pub fn drop_condition<R: Rng + ?Sized>(conds: &mut [Condition], prob: f64, rng: &mut R) -> Result<usize> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(CoreError::InvalidParameter("drop probability must lie in [0, 1]"));
    }
    let mut dropped = 0;
    for c in conds.iter_mut() {
        if rng.gen::<f64>() < prob {
            *c = Condition::Null;
            dropped += 1;
        }
    }
    Ok(dropped)
}
