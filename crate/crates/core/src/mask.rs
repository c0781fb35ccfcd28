//! Hybrid causal attention masks.
//!
//! Sequences are laid out as `[cond, x_1, .., x_t, END]`, so a sequence with
//! `t` motion tokens has length `L = t + 2`. For a set `U` of unmasked
//! positions, query `i` may attend to key `j` iff
//! `(i >= j && i ∉ U) || j ∈ U`. With `U = ∅` this is the ordinary
//! left-to-right causal mask.

use alloc::vec::Vec;
use core::ops::Range;

use num_traits::Float;
use rand::Rng;

use crate::error::{CoreError, Result};

/// Positions of the condition, motion tokens and END inside a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    t: usize,
}

impl SequenceLayout {
    pub const COND_POS: usize = 0;

    pub fn new(t: usize) -> Self {
        Self { t }
    }

    /// Number of motion tokens.
    pub fn motion_len(&self) -> usize {
        self.t
    }

    /// Total sequence length `t + 2`.
    pub fn len(&self) -> usize {
        self.t + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn end_pos(&self) -> usize {
        self.t + 1
    }

    pub fn motion_positions(&self) -> Range<usize> {
        1..self.t + 1
    }
}

/// Sorted, deduplicated set of unmasked positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnmaskedSet {
    indices: Vec<usize>,
}

impl UnmaskedSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.indices.binary_search(&pos).is_ok()
    }

    pub fn insert(&mut self, pos: usize) {
        if let Err(at) = self.indices.binary_search(&pos) {
            self.indices.insert(at, pos);
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    fn check_within(&self, len: usize) -> Result<()> {
        match self.indices.last() {
            Some(&max) if max >= len => Err(CoreError::OutOfRange {
                what: "unmasked position",
                index: max,
                bound: len,
            }),
            _ => Ok(()),
        }
    }
}

/// `L x L` attention mask stored as allowed/disallowed flags.
///
/// `bias` turns it into the additive `{0, -inf}` form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    len: usize,
    allowed: Vec<bool>,
}

impl MaskMatrix {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }

    pub fn bias<T: Float>(&self, query: usize, key: usize) -> T {
        if self.is_allowed(query, key) {
            T::zero()
        } else {
            T::neg_infinity()
        }
    }

    /// Row-major additive bias, `0` where attention is allowed and `-inf` elsewhere.
    pub fn to_bias<T: Float>(&self) -> Vec<T> {
        self.allowed
            .iter()
            .map(|&a| if a { T::zero() } else { T::neg_infinity() })
            .collect()
    }

    /// Keys visible from `query`.
    pub fn allowed_keys(&self, query: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.allowed[query * self.len..(query + 1) * self.len];
        row.iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j)
    }

    /// Positions that can influence `query` through any number of attention
    /// layers (transitive closure of the allowed relation, including itself).
    pub fn reachable_from(&self, query: usize) -> Vec<bool> {
        let mut seen = alloc::vec![false; self.len];
        let mut stack = alloc::vec![query];
        seen[query] = true;
        while let Some(q) = stack.pop() {
            for k in self.allowed_keys(q) {
                if !seen[k] {
                    seen[k] = true;
                    stack.push(k);
                }
            }
        }
        seen
    }
}

/// Builds the hybrid causal mask for a sequence of length `len`.
pub fn build_causal_mask(len: usize, unmasked: &UnmaskedSet) -> Result<MaskMatrix> {
    unmasked.check_within(len)?;
    let mut in_u = alloc::vec![false; len];
    for u in unmasked.iter() {
        in_u[u] = true;
    }
    let mut allowed = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            allowed.push((i >= j && !in_u[i]) || in_u[j]);
        }
    }
    Ok(MaskMatrix { len, allowed })
}

/// Plain lower-triangular causal mask (unidirectional decoding).
pub fn unidirectional_mask(len: usize) -> MaskMatrix {
    let mut allowed = alloc::vec![false; len * len];
    for i in 0..len {
        for a in &mut allowed[i * len..=i * len + i] {
            *a = true;
        }
    }
    MaskMatrix { len, allowed }
}

/// Fully visible mask, used by the residual refinement transformer.
pub fn full_mask(len: usize) -> MaskMatrix {
    MaskMatrix { len, allowed: alloc::vec![true; len * len] }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Unidirectional causal mask, `U = ∅`.
    Uni,
    /// Bidirectional causal mask with condition, END and a random subset of
    /// motion tokens unmasked.
    Bi,
}

/// Split of the motion positions into masked and unmasked sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSplit {
    pub unmasked: UnmaskedSet,
    /// Masked motion positions, ascending.
    pub masked: Vec<usize>,
}

impl MaskSplit {
    /// Builds the split from masked motion positions; the condition, END and
    /// all other motion positions end up in `unmasked`.
    fn from_masked(t: usize, masked: Vec<usize>) -> Self {
        let layout = SequenceLayout::new(t);
        let mut is_masked = alloc::vec![false; t + 2];
        for &p in &masked {
            is_masked[p] = true;
        }
        let unmasked = UnmaskedSet::from_indices(
            core::iter::once(SequenceLayout::COND_POS)
                .chain(layout.motion_positions().filter(|&p| !is_masked[p]))
                .chain(core::iter::once(layout.end_pos())),
        );
        Self { unmasked, masked }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingMask {
    pub mode: MaskMode,
    pub unmasked: UnmaskedSet,
    pub masked: Vec<usize>,
}

/// Samples the attention mode and masked set for one training sequence.
///
/// With probability `lambda` the unidirectional mode is chosen (`U = ∅`, every
/// motion position masked). Otherwise a ratio `r ~ U(ratio_range)` of the
/// motion positions (rounded, at least one) is masked uniformly at random.
pub fn sample_training_mask<R: Rng + ?Sized>(
    t: usize,
    rng: &mut R,
    lambda: f64,
    ratio_range: (f64, f64),
) -> Result<TrainingMask> {
    if t == 0 {
        return Err(CoreError::Empty("motion tokens"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::InvalidParameter("lambda must lie in [0, 1]"));
    }
    let (lo, hi) = ratio_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(CoreError::InvalidParameter("ratio range must lie in (0, 1]"));
    }
    if rng.gen::<f64>() < lambda {
        return Ok(TrainingMask {
            mode: MaskMode::Uni,
            unmasked: UnmaskedSet::empty(),
            masked: (1..=t).collect(),
        });
    }
    let ratio = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let n_masked = ((ratio * t as f64).round() as usize).clamp(1, t);
    let mut positions: Vec<usize> = (1..=t).collect();
    // Partial Fisher-Yates: the first n_masked entries form a uniform subset.
    for i in 0..n_masked {
        let j = rng.gen_range(i..t);
        positions.swap(i, j);
    }
    let mut masked: Vec<usize> = positions[..n_masked].to_vec();
    masked.sort_unstable();
    let split = MaskSplit::from_masked(t, masked);
    Ok(TrainingMask { mode: MaskMode::Bi, unmasked: split.unmasked, masked: split.masked })
}

/// Which iteration-1 tokens get re-predicted during refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefineStrategy {
    /// Mask the `⌊fraction · t⌋` lowest-confidence positions.
    LowConfidence { fraction: f64 },
    /// Mask every position whose confidence is below the threshold.
    ConfidenceBelow { threshold: f64 },
    /// Mask the first `⌈t/2⌉` positions, keep the rest as context.
    Suffix,
    /// Mask even motion positions (counted from 1).
    EveryOther,
}

impl RefineStrategy {
    pub const LOW_CONF_50: RefineStrategy = RefineStrategy::LowConfidence { fraction: 0.5 };
}

/// Masked set for a refinement pass over `t` iteration-1 tokens.
///
/// `confidences[p - 1]` is the confidence of motion position `p`.
pub fn refinement_mask(
    t: usize,
    strategy: RefineStrategy,
    confidences: Option<&[f64]>,
) -> Result<MaskSplit> {
    let need_conf = || -> Result<&[f64]> {
        let conf = confidences.ok_or(CoreError::Missing("token confidences"))?;
        if conf.len() != t {
            return Err(CoreError::ShapeMismatch { what: "confidences", expected: t, got: conf.len() });
        }
        Ok(conf)
    };
    let masked: Vec<usize> = match strategy {
        RefineStrategy::EveryOther => (1..=t).filter(|p| p % 2 == 0).collect(),
        RefineStrategy::Suffix => (1..=t.div_ceil(2)).collect(),
        RefineStrategy::ConfidenceBelow { threshold } => {
            let conf = need_conf()?;
            (1..=t).filter(|&p| conf[p - 1] < threshold).collect()
        }
        RefineStrategy::LowConfidence { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(CoreError::InvalidParameter("fraction must lie in [0, 1]"));
            }
            let conf = need_conf()?;
            let n = (fraction * t as f64).floor() as usize;
            let mut order: Vec<usize> = (1..=t).collect();
            // Stable sort keeps lower positions first among equal confidences.
            order.sort_by(|&a, &b| {
                conf[a - 1].partial_cmp(&conf[b - 1]).unwrap_or(core::cmp::Ordering::Equal)
            });
            let mut m = order[..n].to_vec();
            m.sort_unstable();
            m
        }
    };
    Ok(MaskSplit::from_masked(t, masked))
}

/// Zero-shot temporal editing tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditTask {
    /// Keep the first and last quarter, regenerate the middle.
    Inpaint,
    /// Keep the middle, regenerate the first and last quarter.
    Outpaint,
    /// Keep the first half, regenerate the rest.
    Prefix,
    /// Keep the second half, regenerate the first.
    Suffix,
    /// Regenerate exactly the given spans.
    Custom,
}

/// Masked set for an editing task over `t` motion tokens.
///
/// `spans` are half-open ranges of 1-based motion positions and are only
/// consulted for [`EditTask::Custom`].
pub fn edit_mask(t: usize, task: EditTask, spans: &[Range<usize>]) -> Result<MaskSplit> {
    let quarter = t / 4;
    let half = t / 2;
    let masked: Vec<usize> = match task {
        EditTask::Inpaint => (quarter + 1..=t - quarter).collect(),
        EditTask::Outpaint => (1..=quarter).chain(t - quarter + 1..=t).collect(),
        EditTask::Prefix => (half + 1..=t).collect(),
        EditTask::Suffix => (1..=t - half).collect(),
        EditTask::Custom => {
            let mut sorted: Vec<Range<usize>> = spans.to_vec();
            sorted.sort_by_key(|r| r.start);
            for span in &sorted {
                if span.start < 1 || span.start >= span.end {
                    return Err(CoreError::OutOfRange { what: "span start", index: span.start, bound: t + 1 });
                }
                if span.end > t + 1 {
                    return Err(CoreError::OutOfRange { what: "span end", index: span.end, bound: t + 1 });
                }
            }
            for pair in sorted.windows(2) {
                if pair[1].start < pair[0].end {
                    return Err(CoreError::OverlappingSpans {
                        first: (pair[0].start, pair[0].end),
                        second: (pair[1].start, pair[1].end),
                    });
                }
            }
            sorted.into_iter().flatten().collect()
        }
    };
    Ok(MaskSplit::from_masked(t, masked))
}
