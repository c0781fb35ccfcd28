//! Bookkeeping for the hybrid negative log-likelihood objective.
//!
//! Row `p` of the logits predicts the token at sequence position `p + 1`.
//! Unidirectional samples contribute every motion target (and END, row `t`);
//! bidirectional samples contribute only rows whose target is masked, since an
//! unmasked target is directly visible to the row that predicts it.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mask::{MaskMode, UnmaskedSet};

/// A logits row paired with the sequence position of its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossRow {
    pub row: usize,
    pub target_pos: usize,
}

/// Rows that contribute to the loss of a sample with `t` motion tokens.
pub fn loss_rows(t: usize, mode: MaskMode, masked: &[usize], include_end: bool) -> Vec<LossRow> {
    match mode {
        MaskMode::Uni => {
            let last = if include_end { t + 1 } else { t };
            (1..=last).map(|q| LossRow { row: q - 1, target_pos: q }).collect()
        }
        MaskMode::Bi => masked
            .iter()
            .filter(|&&q| q >= 1 && q <= t)
            .map(|&q| LossRow { row: q - 1, target_pos: q })
            .collect(),
    }
}

/// Fails if any loss row's target is visible as an unmasked token.
pub fn check_no_leakage(rows: &[LossRow], unmasked: &UnmaskedSet) -> Result<()> {
    match rows.iter().find(|r| unmasked.contains(r.target_pos)) {
        Some(r) => Err(CoreError::Leakage { position: r.target_pos }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossReduction {
    /// Per-sample summed NLL, averaged over samples.
    SampleSum,
    /// NLL averaged over all contributing tokens of a mode.
    #[default]
    TokenMean,
}

/// Summed NLL of one sample together with its token count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleNll {
    pub mode: MaskMode,
    pub nll_sum: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    /// `None` when no unidirectional sample was present.
    pub uni_component: Option<f64>,
    /// `None` when no bidirectional sample contributed.
    pub bi_component: Option<f64>,
    pub uni_tokens: usize,
    pub bi_tokens: usize,
    /// Samples without any contributing row.
    pub skipped: usize,
}

/// Combines per-sample NLLs: `λ·uni + (1−λ)·bi` when both modes are present,
/// otherwise the mean of the mode that is.
pub fn combine_hybrid(samples: &[SampleNll], lambda: f64, reduction: LossReduction) -> Result<LossReport> {
    let mut report = LossReport::default();
    let (mut uni_sum, mut bi_sum) = (0.0, 0.0);
    let (mut uni_n, mut bi_n) = (0usize, 0usize);
    for s in samples {
        if s.tokens == 0 {
            report.skipped += 1;
            continue;
        }
        match s.mode {
            MaskMode::Uni => {
                uni_sum += s.nll_sum;
                uni_n += 1;
                report.uni_tokens += s.tokens;
            }
            MaskMode::Bi => {
                bi_sum += s.nll_sum;
                bi_n += 1;
                report.bi_tokens += s.tokens;
            }
        }
    }
    let mean = |sum: f64, samples: usize, tokens: usize| match reduction {
        LossReduction::SampleSum => sum / samples as f64,
        LossReduction::TokenMean => sum / tokens as f64,
    };
    report.uni_component = (uni_n > 0).then(|| mean(uni_sum, uni_n, report.uni_tokens));
    report.bi_component = (bi_n > 0).then(|| mean(bi_sum, bi_n, report.bi_tokens));
    report.total = match (report.uni_component, report.bi_component) {
        (Some(u), Some(b)) => lambda * u + (1.0 - lambda) * b,
        (Some(u), None) => u,
        (None, Some(b)) => b,
        (None, None) => return Err(CoreError::Empty("loss-contributing rows")),
    };
    Ok(report)
}

/// Summed NLL of `targets` under row-major log-probabilities with `classes`
/// columns. `targets[pos]` is the token id at sequence position `pos`.
pub fn rows_nll(log_probs: &[f64], classes: usize, targets: &[u32], rows: &[LossRow]) -> Result<f64> {
    let mut total = 0.0;
    for r in rows {
        let target = *targets
            .get(r.target_pos)
            .ok_or(CoreError::OutOfRange { what: "target position", index: r.target_pos, bound: targets.len() })?
            as usize;
        if target >= classes {
            return Err(CoreError::OutOfRange { what: "target id", index: target, bound: classes });
        }
        let idx = r.row * classes + target;
        let lp = *log_probs
            .get(idx)
            .ok_or(CoreError::OutOfRange { what: "logits row", index: r.row, bound: log_probs.len() / classes })?;
        total -= lp;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Sequence [cond, x1=0, x2=1, END=2] with three classes.
    fn log_probs(p_row0_x1: f64, p_row1_x2: f64) -> Vec<f64> {
        let mut lp = vec![f64::NEG_INFINITY; 4 * 3];
        lp[0] = p_row0_x1.ln();
        lp[3 + 1] = p_row1_x2.ln();
        lp[6 + 2] = 0.0;
        lp
    }

    #[test]
    fn uni_rows_cover_all_targets() {
        let rows = loss_rows(2, MaskMode::Uni, &[1, 2], true);
        assert_eq!(rows.iter().map(|r| r.row).collect::<Vec<_>>(), vec![0, 1, 2]);
        let rows = loss_rows(2, MaskMode::Uni, &[1, 2], false);
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn hand_evaluated_hybrid_loss() {
        let targets = [0u32, 0, 1, 2];
        let uni_rows = loss_rows(2, MaskMode::Uni, &[1, 2], false);
        let uni = rows_nll(&log_probs(0.5, 0.25), 3, &targets, &uni_rows).unwrap();
        assert!((uni - 2.0794415416798357).abs() < 1e-12);

        let bi_rows = loss_rows(2, MaskMode::Bi, &[2], false);
        assert_eq!(bi_rows, vec![LossRow { row: 1, target_pos: 2 }]);
        let bi = rows_nll(&log_probs(0.3, 0.8), 3, &targets, &bi_rows).unwrap();
        assert!((bi - 0.2231435513142097).abs() < 1e-12);

        let report = combine_hybrid(
            &[
                SampleNll { mode: MaskMode::Uni, nll_sum: uni, tokens: 2 },
                SampleNll { mode: MaskMode::Bi, nll_sum: bi, tokens: 1 },
            ],
            0.5,
            LossReduction::SampleSum,
        )
        .unwrap();
        assert!((report.total - 1.1512925464970227).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        let lp = vec![0.0; 4 * 3];
        let targets = [0u32, 0, 0, 0];
        let rows = loss_rows(2, MaskMode::Uni, &[1, 2], true);
        assert_eq!(rows_nll(&lp, 3, &targets, &rows).unwrap(), 0.0);
    }

    #[test]
    fn single_mode_reports_absent_component() {
        let r = combine_hybrid(
            &[SampleNll { mode: MaskMode::Uni, nll_sum: 3.0, tokens: 3 }],
            1.0,
            LossReduction::TokenMean,
        )
        .unwrap();
        assert_eq!(r.bi_component, None);
        assert_eq!(r.total, 1.0);
    }

    #[test]
    fn empty_bi_sample_is_skipped() {
        let r = combine_hybrid(
            &[
                SampleNll { mode: MaskMode::Bi, nll_sum: 0.0, tokens: 0 },
                SampleNll { mode: MaskMode::Uni, nll_sum: 2.0, tokens: 4 },
            ],
            0.5,
            LossReduction::TokenMean,
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.total, 0.5);
        assert!(combine_hybrid(&[], 0.5, LossReduction::TokenMean).is_err());
    }

    #[test]
    fn leakage_guard() {
        let u = UnmaskedSet::from_indices([0, 1, 4]);
        assert!(check_no_leakage(&loss_rows(3, MaskMode::Bi, &[2, 3], true), &u).is_ok());
        assert!(check_no_leakage(&[LossRow { row: 0, target_pos: 1 }], &u).is_err());
    }
}
