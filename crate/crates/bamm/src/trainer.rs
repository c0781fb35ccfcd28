//! Hybrid-mask training of the main transformer and training of the
//! residual refiner.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use bamm_core::corrupt::{corrupt_inputs, drop_condition, Condition};
use bamm_core::loss::{check_no_leakage, combine_hybrid, loss_rows, LossReduction, LossReport, LossRow, SampleNll};
use bamm_core::mask::{build_causal_mask, sample_training_mask, MaskMode, SequenceLayout};
use bamm_core::TokenGrid;
use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, log_softmax_last_dim};
use crate::schedule::LrSchedule;
use crate::transformer::{MainBatch, MainTransformer, Refiner, RefinerItem};

/// A tokenized training sequence: label and base-layer ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub label: u32,
    pub tokens: Vec<u32>,
}

/// A tokenized sequence with every quantizer layer, for the refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRecord {
    pub label: u32,
    pub grid: TokenGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    SampleSum,
    #[default]
    TokenMean,
}

impl From<Reduction> for LossReduction {
    fn from(r: Reduction) -> Self {
        match r {
            Reduction::SampleSum => LossReduction::SampleSum,
            Reduction::TokenMean => LossReduction::TokenMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Probability of the unidirectional mode per sample.
    pub lambda: f64,
    pub ratio_range: (f64, f64),
    /// Probability of replacing a masked input token by a random code.
    pub corrupt_prob: f64,
    pub cond_drop_prob: f64,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub preset: String,
    pub weight_decay: f64,
    pub grad_clip: f64,
    #[serde(default)]
    pub loss_reduction: Reduction,
    /// Steps between checkpoints / probe evaluations; 0 disables them.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            lambda: 0.5,
            ratio_range: (0.5, 1.0),
            corrupt_prob: 0.5,
            cond_drop_prob: 0.1,
            lr: LrSchedule { base: 2e-4, milestones: vec![5_000, 8_000], factor: 0.1 },
            batch_size: 32,
            steps: 10_000,
            seed: 7,
            preset: "toy".into(),
            weight_decay: 1e-4,
            grad_clip: 1.0,
            loss_reduction: Reduction::TokenMean,
            checkpoint_every: 500,
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: LrSchedule { base: 2e-4, milestones: vec![50_000, 80_000], factor: 0.1 },
            batch_size: 64,
            steps: 100_000,
            preset: "paper".into(),
            checkpoint_every: 5_000,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("lambda", self.lambda), ("corrupt_prob", self.corrupt_prob), ("cond_drop_prob", self.cond_drop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        let (lo, hi) = self.ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("ratio_range must satisfy 0 < lo ≤ hi ≤ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.lr.validate()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_uni: Option<f64>,
    pub loss_bi: Option<f64>,
    pub masked_acc: Option<f64>,
    pub lr: f64,
}

/// Loss tensor and bookkeeping for one assembled batch.
pub struct BatchLoss {
    pub loss: Tensor,
    pub report: LossReport,
    /// Correct / total argmax predictions over bi-mode loss rows.
    pub bi_correct: usize,
    pub bi_rows: usize,
}

/// One training sample after mask sampling, corruption and condition drop.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub mode: MaskMode,
    /// Full layout inputs (slot 0 unused, END at `t + 1`).
    pub inputs: Vec<u32>,
    /// Uncorrupted layout (targets).
    pub targets: Vec<u32>,
    pub cond: Condition,
    pub rows: Vec<LossRow>,
    pub mask: bamm_core::MaskMatrix,
}

/// Samples mode/mask, corrupts masked inputs and checks for leakage.
pub fn prepare_sample<R: Rng + ?Sized>(
    rec: &TokenRecord,
    codebook_size: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PreparedSample> {
    let t = rec.tokens.len();
    let layout = SequenceLayout::new(t);
    let end = codebook_size as u32;
    let mut targets = Vec::with_capacity(layout.len());
    targets.push(end + 1);
    targets.extend_from_slice(&rec.tokens);
    targets.push(end);
    let tm = sample_training_mask(t, rng, cfg.lambda, cfg.ratio_range)?;
    let mut inputs = targets.clone();
    corrupt_inputs(&mut inputs, &tm.masked, codebook_size, cfg.corrupt_prob, rng)?;
    let rows = loss_rows(t, tm.mode, &tm.masked, tm.mode == MaskMode::Uni);
    check_no_leakage(&rows, &tm.unmasked)?;
    let mask = build_causal_mask(layout.len(), &tm.unmasked)?;
    Ok(PreparedSample { mode: tm.mode, inputs, targets, cond: Condition::Label(rec.label), rows, mask })
}

/// Builds the weighted NLL for prepared samples.
pub fn batch_loss(
    model: &MainTransformer,
    samples: &[PreparedSample],
    lambda: f64,
    reduction: LossReduction,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchLoss> {
    let len = samples.iter().map(|s| s.inputs.len()).max().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let pad = model.config().pad_id();
    let mut batch = MainBatch::new(len);
    for s in samples {
        batch.push(&s.inputs, s.cond, &s.mask, pad)?;
    }
    let logits = model.forward(&batch, rng)?;
    let logp = log_softmax_last_dim(&logits)?;
    let classes = model.config().codebook_size + 1;

    let (mut uni_tokens, mut bi_tokens, mut uni_n, mut bi_n) = (0usize, 0usize, 0usize, 0usize);
    for s in samples {
        match (s.mode, s.rows.len()) {
            (_, 0) => {}
            (MaskMode::Uni, n) => {
                uni_tokens += n;
                uni_n += 1;
            }
            (MaskMode::Bi, n) => {
                bi_tokens += n;
                bi_n += 1;
            }
        }
    }
    let both = uni_n > 0 && bi_n > 0;
    let mode_weight = |mode: MaskMode| -> f64 {
        let share = match (both, mode) {
            (true, MaskMode::Uni) => lambda,
            (true, MaskMode::Bi) => 1.0 - lambda,
            (false, _) => 1.0,
        };
        let denom = match (reduction, mode) {
            (LossReduction::TokenMean, MaskMode::Uni) => uni_tokens,
            (LossReduction::TokenMean, MaskMode::Bi) => bi_tokens,
            (LossReduction::SampleSum, MaskMode::Uni) => uni_n,
            (LossReduction::SampleSum, MaskMode::Bi) => bi_n,
        };
        share / denom.max(1) as f64
    };
    let n = samples.len();
    let mut weights = vec![0f32; n * len];
    let mut target_ids = vec![0u32; n * len];
    for (b, s) in samples.iter().enumerate() {
        let w = mode_weight(s.mode) as f32;
        for r in &s.rows {
            weights[b * len + r.row] = w;
            target_ids[b * len + r.row] = s.targets[r.target_pos];
        }
    }
    let dev = Device::Cpu;
    let dtype = logp.dtype();
    let tgt = Tensor::from_vec(target_ids.clone(), (n, len, 1), &dev)?;
    let picked = logp.gather(&tgt, D::Minus1)?.squeeze(D::Minus1)?;
    let wt = Tensor::from_vec(weights, (n, len), &dev)?.to_dtype(dtype)?;
    let loss = (picked * wt)?.sum_all()?.neg()?;

    // Host-side bookkeeping on detached values.
    let lp: Vec<f32> = logp.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut per_sample = Vec::with_capacity(n);
    let (mut bi_correct, mut bi_rows) = (0usize, 0usize);
    for (b, s) in samples.iter().enumerate() {
        let mut nll = 0.0f64;
        for r in &s.rows {
            let row = &lp[(b * len + r.row) * classes..(b * len + r.row + 1) * classes];
            let target = s.targets[r.target_pos] as usize;
            nll -= row[target] as f64;
            if s.mode == MaskMode::Bi {
                bi_rows += 1;
                if bamm_core::guidance::argmax(&row[..classes]) == target {
                    bi_correct += 1;
                }
            }
        }
        if s.rows.is_empty() {
            log::warn!("sample without loss-contributing rows skipped");
        }
        per_sample.push(SampleNll { mode: s.mode, nll_sum: nll, tokens: s.rows.len() });
    }
    let report = combine_hybrid(&per_sample, lambda, reduction)?;
    Ok(BatchLoss { loss, report, bi_correct, bi_rows })
}

/// Length-bucketed batches: shuffle, group into pools of 16 batches, sort each
/// pool by length and cut it into batches, then shuffle the batch order.
pub fn bucketed_batches<R: Rng + ?Sized>(lengths: &[usize], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    let mut out = Vec::new();
    for pool in idx.chunks(batch * 16) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        out.extend(pool.chunks(batch).map(<[usize]>::to_vec));
    }
    out.shuffle(rng);
    out
}

/// Where to write checkpoints and the metrics log during training.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

fn optimizer(vars: Vec<Var>, cfg: &TrainConfig) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr: cfg.lr.at(0), weight_decay: cfg.weight_decay, ..Default::default() })?)
}

fn validate_records(records: &[TokenRecord], model: &MainTransformer) -> Result<()> {
    let k = model.config().codebook_size as u32;
    let max_t = model.config().max_tokens();
    if records.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if r.tokens.is_empty() || r.tokens.len() > max_t {
            return Err(Error::Invalid(format!("sequence {i} has {} tokens (allowed 1..={max_t})", r.tokens.len())));
        }
        if r.tokens.iter().any(|&x| x >= k) || r.label as usize >= model.config().num_labels {
            return Err(Error::Invalid(format!("sequence {i} has an out-of-vocabulary token or label")));
        }
    }
    Ok(())
}

/// Hybrid-mask training of the main transformer. Calls `on_step` after every
/// optimizer step; aborts with [`Error::Diverged`] on a non-finite loss
/// (the last periodic checkpoint stays on disk).
pub fn train_main(
    model: &MainTransformer,
    records: &[TokenRecord],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    validate_records(records, model)?;
    let k = model.config().codebook_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd40f);
    let vars = model.params().vars();
    let mut opt = optimizer(vars.clone(), cfg)?;
    let lengths: Vec<usize> = records.iter().map(|r| r.tokens.len()).collect();
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = bucketed_batches(&lengths, cfg.batch_size, &mut rng);
            queue.reverse();
        }
        let ids = queue.pop().expect("refilled");
        let mut samples =
            ids.iter().map(|&i| prepare_sample(&records[i], k, cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
        let mut conds: Vec<Condition> = samples.iter().map(|s| s.cond).collect();
        drop_condition(&mut conds, cfg.cond_drop_prob, &mut rng)?;
        for (s, c) in samples.iter_mut().zip(conds) {
            s.cond = c;
        }
        let bl = batch_loss(model, &samples, cfg.lambda, cfg.loss_reduction.into(), Some(&mut drop_rng))?;
        let loss = bl.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("hybrid loss {loss}") });
        }
        let lr = cfg.lr.at(step);
        opt.set_learning_rate(lr);
        let mut grads = bl.loss.backward()?;
        clip_grad_norm(&mut grads, &vars, cfg.grad_clip)?;
        opt.step(&grads)?;
        let metrics = StepMetrics {
            step,
            loss_total: bl.report.total,
            loss_uni: bl.report.uni_component,
            loss_bi: bl.report.bi_component,
            masked_acc: (bl.bi_rows > 0).then(|| bl.bi_correct as f64 / bl.bi_rows as f64),
            lr,
        };
        if let Some(p) = &outputs.metrics {
            append_jsonl(p, &metrics)?;
        }
        let last = step + 1 == cfg.steps;
        if cfg.checkpoint_every > 0 && ((step + 1) % cfg.checkpoint_every == 0 || last) {
            log::info!("main step {}: loss {:.4} uni {:?} bi {:?}", step + 1, metrics.loss_total, metrics.loss_uni, metrics.loss_bi);
            if let Some(p) = &outputs.checkpoint {
                model.save(p)?;
            }
        } else if last {
            if let Some(p) = &outputs.checkpoint {
                model.save(p)?;
            }
        }
        on_step(&metrics);
        history.push(metrics);
    }
    Ok(history)
}

/// Teacher-forced bi-mode masked-token accuracy over `records`, with masks
/// drawn from `ratio_range` under `seed` (no corruption, no dropout).
pub fn masked_accuracy(
    model: &MainTransformer,
    records: &[TokenRecord],
    ratio_range: (f64, f64),
    seed: u64,
) -> Result<f64> {
    let cfg = TrainConfig { lambda: 0.0, corrupt_prob: 0.0, ratio_range, ..TrainConfig::toy() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = model.config().codebook_size;
    let (mut correct, mut total) = (0usize, 0usize);
    for chunk in records.chunks(64) {
        let samples = chunk.iter().map(|r| prepare_sample(r, k, &cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
        let bl = batch_loss(model, &samples, 0.0, LossReduction::TokenMean, None)?;
        correct += bl.bi_correct;
        total += bl.bi_rows;
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerMetrics {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
}

/// Cross-entropy of a refiner batch at every motion position; returns the
/// loss tensor and the number of correct argmax predictions.
pub fn refiner_loss(
    refiner: &Refiner,
    batch: &[(RefinerItem, Vec<u32>)],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, usize, usize)> {
    let items: Vec<RefinerItem> = batch.iter().map(|(it, _)| it.clone()).collect();
    let logits = refiner.forward(&items, rng)?;
    let (n, len, k) = logits.dims3()?;
    let logp = log_softmax_last_dim(&logits)?;
    let mut weights = vec![0f32; n * len];
    let mut targets = vec![0u32; n * len];
    let total: usize = batch.iter().map(|(_, t)| t.len()).sum();
    for (b, (_, tgt)) in batch.iter().enumerate() {
        for (p, &id) in tgt.iter().enumerate() {
            weights[b * len + p + 1] = 1.0 / total as f32;
            targets[b * len + p + 1] = id;
        }
    }
    let dev = Device::Cpu;
    let picked = logp.gather(&Tensor::from_vec(targets.clone(), (n, len, 1), &dev)?, D::Minus1)?.squeeze(D::Minus1)?;
    let loss = (picked * Tensor::from_vec(weights.clone(), (n, len), &dev)?.to_dtype(logp.dtype())?)?.sum_all()?.neg()?;
    let pred: Vec<u32> = logits.detach().argmax(D::Minus1)?.flatten_all()?.to_vec1()?;
    let correct = (0..n * len).filter(|&i| weights[i] > 0.0 && pred[i] == targets[i]).count();
    let _ = k;
    Ok((loss, correct, total))
}

/// Trains the refiner: per sample a target layer `v ~ U[1, V)` is drawn and
/// layer-`v` ids are predicted from the embeddings of layers `< v`.
/// With a single-layer stack there is nothing to learn and this is a no-op.
pub fn train_refiner(
    refiner: &Refiner,
    records: &[GridRecord],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    mut on_step: impl FnMut(&RefinerMetrics),
) -> Result<Vec<RefinerMetrics>> {
    cfg.validate()?;
    let v_count = refiner.config().num_quantizers;
    if v_count < 2 {
        log::info!("refiner training skipped: the quantizer stack has a single layer");
        return Ok(Vec::new());
    }
    if records.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e71);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd40f);
    let vars = refiner.params().vars();
    let mut opt = optimizer(vars.clone(), cfg)?;
    let lengths: Vec<usize> = records.iter().map(|r| r.grid.len()).collect();
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = bucketed_batches(&lengths, cfg.batch_size, &mut rng);
            queue.reverse();
        }
        let ids = queue.pop().expect("refilled");
        let mut batch = Vec::with_capacity(ids.len());
        for &i in &ids {
            let r = &records[i];
            let target = rng.gen_range(1..v_count);
            let cond = if rng.gen::<f64>() < cfg.cond_drop_prob { Condition::Null } else { Condition::Label(r.label) };
            let item = RefinerItem { ids: (0..target).map(|l| r.grid.row(l).to_vec()).collect(), target, cond };
            batch.push((item, r.grid.row(target).to_vec()));
        }
        let (loss, correct, total) = refiner_loss(refiner, &batch, Some(&mut drop_rng))?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, detail: format!("refiner loss {value}") });
        }
        let lr = cfg.lr.at(step);
        opt.set_learning_rate(lr);
        let mut grads = loss.backward()?;
        clip_grad_norm(&mut grads, &vars, cfg.grad_clip)?;
        opt.step(&grads)?;
        let m = RefinerMetrics { step, loss: value, acc: correct as f64 / total.max(1) as f64, lr };
        if let Some(p) = &outputs.metrics {
            append_jsonl(p, &m)?;
        }
        let last = step + 1 == cfg.steps;
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) || last {
            log::info!("refiner step {}: loss {:.4} acc {:.3}", step + 1, m.loss, m.acc);
            if let Some(p) = &outputs.checkpoint {
                refiner.save(p)?;
            }
        }
        on_step(&m);
        history.push(m);
    }
    Ok(history)
}
