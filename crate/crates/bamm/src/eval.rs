//! Desk-scale evaluation: reconstruction and codebook health, teacher-forced
//! masked-token likelihoods, generated-length histograms, edit fidelity and
//! decode-configuration sweeps.

use std::collections::BTreeMap;
use std::io::Write;

use bamm_core::corrupt::Condition;
use bamm_core::guidance::{argmax, log_softmax, logits_cfg};
use bamm_core::histogram::LengthHistogram;
use bamm_core::mask::{build_causal_mask, refinement_mask, unidirectional_mask, RefineStrategy};
use bamm_core::vq::utilization;
use bamm_core::MaskSplit;
use candle_core::DType;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{FrameMatrix, MotionRecord};
use crate::decoder::{decode_iter1, generate_batch, sequence_rng, DecodeConfig, GenRequest, ModelStack};
use crate::editor::{edit, EditRequest, EditSource, EditTask};
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;
use crate::trainer::TokenRecord;
use crate::transformer::{MainBatch, MainTransformer};

/// Relative peak threshold for mode detection in length histograms.
pub const MODE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerEval {
    /// Mean squared error in normalized feature space, all quantizer layers.
    pub recon_mse: f64,
    /// Same with the base layer only.
    pub recon_mse_base: f64,
    pub utilization: Vec<f64>,
    /// Mean residual norm after each quantizer layer.
    pub residual_norms: Vec<f64>,
}

/// Reconstruction and codebook statistics over normalized, aligned motions.
pub fn eval_tokenizer(tok: &Tokenizer, records: &[MotionRecord]) -> Result<TokenizerEval> {
    if records.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let v = tok.stack().num_layers();
    let k = tok.stack().codebook_size();
    let (mut se, mut se_base, mut n) = (0.0, 0.0, 0usize);
    let mut ids: Vec<Vec<u32>> = vec![Vec::new(); v];
    let mut norms = vec![0.0; v];
    for r in records {
        let enc = tok.rvq(&r.motion)?;
        let full = tok.detokenize(&enc.grid, v, r.motion.fps)?;
        let base = tok.detokenize(&enc.grid, 1, r.motion.fps)?;
        for ((a, b), x) in full.data().iter().zip(base.data()).zip(r.motion.data()) {
            se += ((a - x) as f64).powi(2);
            se_base += ((b - x) as f64).powi(2);
        }
        n += r.motion.data().len();
        for (l, ids) in ids.iter_mut().enumerate() {
            ids.extend_from_slice(enc.grid.row(l));
            norms[l] += enc.residual_norms[l] / records.len() as f64;
        }
    }
    Ok(TokenizerEval {
        recon_mse: se / n as f64,
        recon_mse_base: se_base / n as f64,
        utilization: ids.iter().map(|x| utilization(x, k)).collect(),
        residual_norms: norms,
    })
}

/// Per-sequence teacher-forced scores of the ground-truth tokens at a set of
/// masked positions, under iteration-1 context (unidirectional mask) and
/// iteration-2 context (bidirectional mask with the other tokens visible).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextScore {
    pub nll_uni: f64,
    pub nll_bi: f64,
    pub acc_uni: f64,
    pub acc_bi: f64,
    pub masked: usize,
}

/// Guidance scales applied when scoring each context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreScales {
    pub uni: f32,
    pub bi: f32,
}

impl ScoreScales {
    pub const NONE: ScoreScales = ScoreScales { uni: 0.0, bi: 0.0 };
}

fn forward_rows(
    model: &MainTransformer,
    layouts: &[Vec<u32>],
    conds: &[Condition],
    masks: &[bamm_core::MaskMatrix],
) -> Result<(usize, usize, Vec<f32>)> {
    let len = layouts.iter().map(Vec::len).max().unwrap_or(2);
    let mut batch = MainBatch::new(len);
    for ((l, &c), m) in layouts.iter().zip(conds).zip(masks) {
        batch.push(l, c, m, model.config().pad_id())?;
    }
    let logits = model.forward(&batch, None)?;
    let cols = logits.dim(2)?;
    Ok((len, cols, logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?))
}

/// Scores every record; END is excluded from both distributions so only
/// content prediction is compared. Confidence-based strategies use the
/// unidirectional probabilities of the ground-truth tokens.
pub fn context_scores(
    model: &MainTransformer,
    records: &[TokenRecord],
    strategy: RefineStrategy,
    scales: ScoreScales,
) -> Result<Vec<ContextScore>> {
    let k = model.config().codebook_size;
    let end = model.config().end_id();
    let pad = model.config().pad_id();
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(32) {
        let layouts: Vec<Vec<u32>> = chunk
            .iter()
            .map(|r| {
                let mut l = vec![pad];
                l.extend_from_slice(&r.tokens);
                l.push(end);
                l
            })
            .collect();
        let conds: Vec<Condition> = chunk.iter().map(|r| Condition::Label(r.label)).collect();
        let nulls = vec![Condition::Null; chunk.len()];
        let uni: Vec<_> = layouts.iter().map(|l| unidirectional_mask(l.len())).collect();
        let guided = |scale: f32, masks: &[bamm_core::MaskMatrix]| -> Result<(usize, usize, Vec<f32>)> {
            let (len, cols, c) = forward_rows(model, &layouts, &conds, masks)?;
            if scale == 0.0 {
                return Ok((len, cols, c));
            }
            let (_, _, u) = forward_rows(model, &layouts, &nulls, masks)?;
            Ok((len, cols, logits_cfg(&c, &u, scale)?))
        };
        let (len, cols, lu) = guided(scales.uni, &uni)?;
        let content = |data: &[f32], b: usize, p: usize| -> Vec<f64> {
            let row = &data[(b * len + p - 1) * cols..(b * len + p - 1) * cols + k];
            log_softmax(row)
        };
        let mut splits: Vec<MaskSplit> = Vec::with_capacity(chunk.len());
        for (b, r) in chunk.iter().enumerate() {
            let conf: Vec<f64> =
                (1..=r.tokens.len()).map(|p| content(&lu, b, p)[r.tokens[p - 1] as usize].exp()).collect();
            splits.push(refinement_mask(r.tokens.len(), strategy, Some(&conf))?);
        }
        let bi = splits
            .iter()
            .zip(&layouts)
            .map(|(s, l)| Ok(build_causal_mask(l.len(), &s.unmasked)?))
            .collect::<Result<Vec<_>>>()?;
        let (_, _, lb) = guided(scales.bi, &bi)?;
        for (b, (r, s)) in chunk.iter().zip(&splits).enumerate() {
            let m = s.masked.len();
            if m == 0 {
                continue;
            }
            let mut sc = ContextScore { nll_uni: 0.0, nll_bi: 0.0, acc_uni: 0.0, acc_bi: 0.0, masked: m };
            for &p in &s.masked {
                let target = r.tokens[p - 1] as usize;
                let (u, v) = (content(&lu, b, p), content(&lb, b, p));
                sc.nll_uni -= u[target] / m as f64;
                sc.nll_bi -= v[target] / m as f64;
                sc.acc_uni += f64::from(u8::from(argmax(&u) == target)) / m as f64;
                sc.acc_bi += f64::from(u8::from(argmax(&v) == target)) / m as f64;
            }
            out.push(sc);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Mean of `b − a`.
    pub mean_diff: f64,
    pub t_stat: f64,
    /// One-sided p-value for the alternative `mean(b − a) < 0`.
    pub p_value: f64,
}

/// Paired one-sided t-test that `b` is smaller than `a` on average.
pub fn paired_t_less(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    let n = a.len();
    if n != b.len() || n < 2 {
        return Err(Error::Invalid("paired test needs two equally long samples of size ≥ 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let (t_stat, p_value) = if se == 0.0 {
        let p = if mean < 0.0 { 0.0 } else { 1.0 };
        (if mean < 0.0 { f64::NEG_INFINITY } else { f64::INFINITY }, p)
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Invalid(e.to_string()))?;
        (t, dist.cdf(t))
    };
    Ok(PairedTest {
        n,
        mean_a: a.iter().sum::<f64>() / n as f64,
        mean_b: b.iter().sum::<f64>() / n as f64,
        mean_diff: mean,
        t_stat,
        p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub label: u32,
    /// `counts[i]` is the number of samples with `i + 1` tokens.
    pub counts: Vec<usize>,
    pub modes: Vec<usize>,
    pub cap_hits: usize,
}

/// Samples `n_samples` iteration-1 lengths per label and detects modes.
pub fn eval_length_distribution(
    model: &MainTransformer,
    labels: &[u32],
    n_samples: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<LengthReport>> {
    let mut out = Vec::with_capacity(labels.len());
    for &label in labels {
        let mut rngs: Vec<_> = (0..n_samples as u64).map(|i| sequence_rng(cfg.seed ^ (u64::from(label) << 32), i)).collect();
        let res = decode_iter1(model, &vec![label; n_samples], cfg, &mut rngs)?;
        let hist = LengthHistogram::from_lengths(cfg.t_max, res.iter().map(|r| r.tokens.len()));
        debug_assert_eq!(hist.out_of_range(), 0);
        out.push(LengthReport {
            label,
            counts: hist.counts().to_vec(),
            modes: if n_samples == 0 { Vec::new() } else { hist.modes(MODE_THRESHOLD) },
            cap_hits: res.iter().filter(|r| r.cap_hit).count(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditFidelity {
    pub task: EditTask,
    pub trials: usize,
    pub preserved_ok: usize,
}

/// Runs an edit task on token sources and counts calls whose unmasked
/// base-layer tokens survive exactly.
pub fn eval_edit_fidelity(stack: &ModelStack, sources: &[TokenRecord], task: EditTask, cfg: &DecodeConfig) -> Result<EditFidelity> {
    let mut ok = 0;
    for (i, src) in sources.iter().enumerate() {
        let req = EditRequest {
            source: EditSource::Tokens(src.tokens.clone()),
            label: src.label,
            task,
            spans: Vec::new(),
            config: DecodeConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() },
        };
        let out = edit(stack, &req)?;
        let row = out.grid.row(0);
        if out.preserved.iter().all(|&(p, id)| row[p - 1] == id && src.tokens[p - 1] == id) {
            ok += 1;
        }
    }
    Ok(EditFidelity { task, trials: sources.len(), preserved_ok: ok })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tokenizer: TokenizerEval,
    /// Keyed by iteration count ("1", "2").
    pub masked_nll: BTreeMap<String, f64>,
    pub masked_acc: BTreeMap<String, f64>,
    pub refinement_test: PairedTest,
    pub lengths: Vec<LengthReport>,
    pub edit_fidelity: Vec<EditFidelity>,
}

/// Knobs of [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub length_samples: usize,
    pub edit_trials: usize,
    pub decode: DecodeConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { length_samples: 1000, edit_trials: 100, decode: DecodeConfig::toy() }
    }
}

/// The full report over a held-out set (`motions` normalized and aligned).
pub fn evaluate(stack: &ModelStack, motions: &[MotionRecord], opts: &EvalOptions) -> Result<EvalReport> {
    let tokenizer = eval_tokenizer(&stack.tokenizer, motions)?;
    let tokens = tokenize_records(&stack.tokenizer, motions, stack.main.config().max_tokens())?;
    let scores = context_scores(&stack.main, &tokens, RefineStrategy::EveryOther, ScoreScales::NONE)?;
    let a: Vec<f64> = scores.iter().map(|s| s.nll_uni).collect();
    let b: Vec<f64> = scores.iter().map(|s| s.nll_bi).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let acc_u: Vec<f64> = scores.iter().map(|s| s.acc_uni).collect();
    let acc_b: Vec<f64> = scores.iter().map(|s| s.acc_bi).collect();
    let labels: Vec<u32> = (0..stack.labels.len() as u32).collect();
    let lengths = eval_length_distribution(&stack.main, &labels, opts.length_samples, &opts.decode)?;
    let sources: Vec<TokenRecord> = tokens.iter().take(opts.edit_trials).cloned().collect();
    let edit_fidelity = [EditTask::Inpaint, EditTask::Outpaint, EditTask::Prefix, EditTask::Suffix]
        .into_iter()
        .map(|task| eval_edit_fidelity(stack, &sources, task, &opts.decode))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        tokenizer,
        masked_nll: BTreeMap::from([("1".into(), mean(&a)), ("2".into(), mean(&b))]),
        masked_acc: BTreeMap::from([("1".into(), mean(&acc_u)), ("2".into(), mean(&acc_b))]),
        refinement_test: paired_t_less(&a, &b)?,
        lengths,
        edit_fidelity,
    })
}

/// Base-layer token sequences for normalized, aligned motions, truncated to
/// `max_tokens`.
pub fn tokenize_records(tok: &Tokenizer, records: &[MotionRecord], max_tokens: usize) -> Result<Vec<TokenRecord>> {
    records
        .iter()
        .map(|r| {
            let mut tokens = tok.tokenize(&r.motion)?.row(0).to_vec();
            tokens.truncate(max_tokens);
            Ok(TokenRecord { label: r.label, tokens })
        })
        .collect()
}

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_id: usize,
    pub cfg_s1: f32,
    pub cfg_s2: f32,
    pub cfg_refine: f32,
    pub strategy: String,
    pub n_iterations: u8,
    /// Teacher-forced NLL of held-out tokens at the strategy's masked
    /// positions, under the context the configuration's last iteration sees.
    pub masked_nll: f64,
    pub masked_acc: f64,
    /// Diagnostic: mean MSE (normalized space) between generated motions and
    /// their nearest held-out exemplar over the overlapping frames.
    pub gen_nearest_mse: f64,
}

/// Evaluates each decode configuration on held-out motions.
pub fn ablation_sweep(
    stack: &ModelStack,
    configs: &[DecodeConfig],
    motions: &[MotionRecord],
    samples_per_config: usize,
) -> Result<Vec<SweepRow>> {
    let tokens = tokenize_records(&stack.tokenizer, motions, stack.main.config().max_tokens())?;
    let mut rows = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        cfg.validate()?;
        let scales = ScoreScales { uni: cfg.cfg_s1, bi: cfg.cfg_s2 };
        let scores = context_scores(&stack.main, &tokens, cfg.strategy.into(), scales)?;
        let n = scores.len().max(1) as f64;
        let (nll, acc) = if cfg.n_iterations == 1 {
            (scores.iter().map(|s| s.nll_uni).sum::<f64>() / n, scores.iter().map(|s| s.acc_uni).sum::<f64>() / n)
        } else {
            (scores.iter().map(|s| s.nll_bi).sum::<f64>() / n, scores.iter().map(|s| s.acc_bi).sum::<f64>() / n)
        };
        let requests: Vec<GenRequest> = (0..samples_per_config)
            .map(|j| GenRequest { label: (j % stack.labels.len()) as u32, length: None })
            .collect();
        let generated = generate_batch(stack, &requests, cfg)?;
        let norm = stack.tokenizer.norm();
        let mut mse = 0.0;
        for (frames, _) in &generated {
            let g = match norm {
                Some(s) => crate::data::normalize(frames, s)?,
                None => frames.clone(),
            };
            mse += motions.iter().map(|m| overlap_mse(&g, &m.motion)).fold(f64::INFINITY, f64::min) / generated.len().max(1) as f64;
        }
        rows.push(SweepRow {
            config_id: i,
            cfg_s1: cfg.cfg_s1,
            cfg_s2: cfg.cfg_s2,
            cfg_refine: cfg.cfg_refine,
            strategy: serde_json::to_value(cfg.strategy)?["kind"].as_str().unwrap_or_default().to_string(),
            n_iterations: cfg.n_iterations,
            masked_nll: nll,
            masked_acc: acc,
            gen_nearest_mse: if generated.is_empty() { 0.0 } else { mse },
        });
    }
    Ok(rows)
}

fn overlap_mse(a: &FrameMatrix, b: &FrameMatrix) -> f64 {
    let n = a.num_frames().min(b.num_frames()) * a.dim();
    let s: f64 = a.data()[..n].iter().zip(&b.data()[..n]).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    s / n.max(1) as f64
}

/// Writes sweep rows as CSV with a header line.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::TransformerConfig;

    #[test]
    fn paired_test_direction_and_degenerate_cases() {
        let a = [2.0, 2.5, 3.0, 2.2, 2.8];
        let b = [1.5, 2.4, 2.1, 2.0, 2.0];
        let t = paired_t_less(&a, &b).unwrap();
        assert!(t.mean_diff < 0.0 && t.p_value < 0.05, "{t:?}");
        let rev = paired_t_less(&b, &a).unwrap();
        assert!((rev.p_value + t.p_value - 1.0).abs() < 1e-12);
        // Hand value: d = [-0.5,-0.1,-0.9,-0.2,-0.8], mean -0.5, sd 0.35355, t = -3.1623.
        assert!((t.t_stat + 3.16227766).abs() < 1e-6);
        assert!(paired_t_less(&[1.0], &[0.0]).is_err());
        assert_eq!(paired_t_less(&[1.0, 2.0], &[0.0, 1.0]).unwrap().p_value, 0.0);
    }

    #[test]
    fn sweep_csv_has_documented_columns() {
        let row = SweepRow {
            config_id: 0,
            cfg_s1: 4.0,
            cfg_s2: 3.0,
            cfg_refine: 6.0,
            strategy: "every_other".into(),
            n_iterations: 2,
            masked_nll: 1.5,
            masked_acc: 0.25,
            gen_nearest_mse: 0.1,
        };
        let mut buf = Vec::new();
        write_sweep_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "config_id,cfg_s1,cfg_s2,cfg_refine,strategy,n_iterations,masked_nll,masked_acc,gen_nearest_mse"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("0,4.0,3.0,6.0,every_other,2,"));
    }

    #[test]
    fn context_scores_are_finite_and_empty_histogram_has_no_modes() {
        let cfg = TransformerConfig { codebook_size: 6, num_labels: 2, n_layers: 1, n_heads: 2, d_model: 8, max_len: 12, dropout: 0.0, ff_mult: 2 };
        let m = MainTransformer::new(cfg, 1, DType::F32).unwrap();
        let recs = vec![TokenRecord { label: 0, tokens: vec![1, 2, 3, 4] }, TokenRecord { label: 1, tokens: vec![5, 0, 1] }];
        let s = context_scores(&m, &recs, RefineStrategy::EveryOther, ScoreScales { uni: 1.0, bi: 2.0 }).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|x| x.nll_uni.is_finite() && x.nll_bi.is_finite() && x.masked >= 1));
        let dc = DecodeConfig { t_max: 10, ..DecodeConfig::toy() };
        let r = eval_length_distribution(&m, &[0], 0, &dc).unwrap();
        assert_eq!(r[0].counts.iter().sum::<usize>(), 0);
        assert!(r[0].modes.is_empty());
    }
}
