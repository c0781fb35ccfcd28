//! Cascaded decoding: autoregressive iteration 1 with length prediction (or a
//! fixed length), bidirectional re-prediction passes, residual refinement and
//! decoding back to frames.

use std::path::{Path, PathBuf};

use bamm_core::corrupt::Condition;
use bamm_core::guidance::{argmax, exclude, logits_cfg, softmax, top_k};
use bamm_core::mask::{build_causal_mask, refinement_mask, RefineStrategy};
use bamm_core::{MaskSplit, TokenGrid};
use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{denormalize, FrameMatrix, DEFAULT_FPS};
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;
use crate::transformer::{MainBatch, MainTransformer, Refiner, RefinerItem};

/// Re-prediction mask strategy, serialized as `{"kind": ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    LowConfidence { fraction: f64 },
    ConfidenceBelow { threshold: f64 },
    Suffix,
    EveryOther,
}

impl From<Strategy> for RefineStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::LowConfidence { fraction } => RefineStrategy::LowConfidence { fraction },
            Strategy::ConfidenceBelow { threshold } => RefineStrategy::ConfidenceBelow { threshold },
            Strategy::Suffix => RefineStrategy::Suffix,
            Strategy::EveryOther => RefineStrategy::EveryOther,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub cfg_s1: f32,
    pub cfg_s2: f32,
    pub cfg_refine: f32,
    pub temperature_1: f32,
    pub temperature_2: f32,
    pub strategy: Strategy,
    pub n_iterations: u8,
    pub t_max: usize,
    pub seed: u64,
    #[serde(default)]
    pub top_k: Option<usize>,
}

impl DecodeConfig {
    pub fn humanml3d_paper() -> Self {
        Self {
            cfg_s1: 4.0,
            cfg_s2: 3.0,
            cfg_refine: 6.0,
            temperature_1: 1.0,
            temperature_2: 1.0,
            strategy: Strategy::EveryOther,
            n_iterations: 2,
            t_max: 50,
            seed: 0,
            top_k: None,
        }
    }

    pub fn kit_paper() -> Self {
        Self { cfg_s1: 2.0, cfg_s2: 2.0, cfg_refine: 6.0, ..Self::humanml3d_paper() }
    }

    /// Scales for the desk-scale models: strong guidance distorts the length
    /// distribution of a small model, so iteration 1 stays mild.
    pub fn toy() -> Self {
        Self { cfg_s1: 1.0, cfg_s2: 1.0, cfg_refine: 1.0, ..Self::humanml3d_paper() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "humanml3d-paper" => Ok(Self::humanml3d_paper()),
            "kit-paper" => Ok(Self::kit_paper()),
            other => Err(Error::Config(format!("unknown decode preset `{other}` (toy, humanml3d-paper, kit-paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.cfg_s1, self.cfg_s2, self.cfg_refine].iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("guidance scales must be finite and ≥ 0".into()));
        }
        if !(self.temperature_1 > 0.0 && self.temperature_2 > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(1..=3).contains(&self.n_iterations) {
            return Err(Error::Config("n_iterations must be 1, 2 or 3".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// One bidirectional re-prediction pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassTrace {
    pub masked: Vec<usize>,
    /// Re-predicted ids, aligned with `masked`.
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub label: u32,
    pub length_restricted: bool,
    pub iter1_tokens: Vec<u32>,
    pub iter1_confidences: Vec<f64>,
    pub t: usize,
    pub cap_hit: bool,
    /// END was the most likely first token and had to be suppressed.
    pub end_suppressed: bool,
    pub passes: Vec<PassTrace>,
    pub final_grid: Vec<Vec<u32>>,
}

/// Output of iteration 1 for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Iter1 {
    pub tokens: Vec<u32>,
    pub confidences: Vec<f64>,
    pub cap_hit: bool,
    pub end_suppressed: bool,
}

/// Sequences decoded together; larger requests are split.
const CHUNK: usize = 128;

/// Independent per-sequence generator: stream `index` of the ChaCha stream
/// family keyed by `seed`.
pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn tensor_rows(t: &Tensor) -> Result<(usize, Vec<f32>)> {
    let cols = t.dim(1)?;
    Ok((cols, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?))
}

/// Guided logits of row `b` given cond/uncond halves of a `2n`-row matrix
/// (or a single `n`-row matrix when guidance is off).
fn guided_row(data: &[f32], cols: usize, n: usize, b: usize, scale: f32, paired: bool) -> Result<Vec<f32>> {
    let c = &data[b * cols..(b + 1) * cols];
    if !paired {
        return Ok(c.to_vec());
    }
    let u = &data[(n + b) * cols..(n + b + 1) * cols];
    Ok(logits_cfg(c, u, scale)?)
}

/// Samples from `softmax(logits / temperature)` after optional top-k; returns
/// the id and its probability under the sampling distribution.
fn sample(logits: &mut [f32], temperature: f32, k: Option<usize>, rng: &mut ChaCha8Rng) -> Result<(u32, f64)> {
    if let Some(k) = k {
        top_k(logits, k);
    }
    let probs = softmax(logits, temperature)?;
    let id = bamm_core::guidance::sample_categorical(&probs, rng);
    Ok((id as u32, probs[id] as f64))
}

fn with_null(labels: &[u32], paired: bool) -> Vec<Condition> {
    let mut conds: Vec<Condition> = labels.iter().map(|&l| Condition::Label(l)).collect();
    if paired {
        conds.extend(std::iter::repeat(Condition::Null).take(labels.len()));
    }
    conds
}

fn check_cap(model: &MainTransformer, t: usize) -> Result<()> {
    if t > model.config().max_tokens() {
        return Err(Error::Invalid(format!("{t} tokens exceed the model limit of {}", model.config().max_tokens())));
    }
    Ok(())
}

/// Iteration 1 for a batch: left-to-right sampling under the unidirectional
/// mask until END or `cfg.t_max`. `rngs[b]` drives sequence `b`.
pub fn decode_iter1(model: &MainTransformer, labels: &[u32], cfg: &DecodeConfig, rngs: &mut [ChaCha8Rng]) -> Result<Vec<Iter1>> {
    if rngs.len() != labels.len() {
        return Err(Error::Dimension("one generator per sequence is required".into()));
    }
    let mut out = Vec::with_capacity(labels.len());
    for (l, r) in labels.chunks(CHUNK).zip(rngs.chunks_mut(CHUNK)) {
        out.extend(decode_iter1_chunk(model, l, cfg, r)?);
    }
    Ok(out)
}

fn decode_iter1_chunk(model: &MainTransformer, labels: &[u32], cfg: &DecodeConfig, rngs: &mut [ChaCha8Rng]) -> Result<Vec<Iter1>> {
    cfg.validate()?;
    check_cap(model, cfg.t_max)?;
    let n = labels.len();
    if rngs.len() != n {
        return Err(Error::Dimension("one generator per sequence is required".into()));
    }
    let end = model.config().end_id();
    let paired = cfg.cfg_s1 != 0.0;
    let (mut cache, mut logits) = model.prefill(&with_null(labels, paired), None)?;
    let mut out: Vec<Iter1> = (0..n).map(|_| Iter1 { tokens: Vec::new(), confidences: Vec::new(), cap_hit: false, end_suppressed: false }).collect();
    let mut active = vec![true; n];
    for p in 1..=cfg.t_max + 1 {
        let (cols, data) = tensor_rows(&logits)?;
        let mut fed = vec![end; if paired { 2 * n } else { n }];
        for b in 0..n {
            if !active[b] {
                continue;
            }
            if p == cfg.t_max + 1 {
                out[b].cap_hit = true;
                active[b] = false;
                continue;
            }
            let mut row = guided_row(&data, cols, n, b, cfg.cfg_s1, paired)?;
            if p == 1 {
                if argmax(&row) == end as usize {
                    out[b].end_suppressed = true;
                    log::warn!("END predicted for an empty motion; suppressed");
                }
                exclude(&mut row, end as usize);
            }
            let (id, prob) = sample(&mut row, cfg.temperature_1, cfg.top_k, &mut rngs[b])?;
            if id == end {
                active[b] = false;
                continue;
            }
            out[b].tokens.push(id);
            out[b].confidences.push(prob);
            fed[b] = id;
            if paired {
                fed[n + b] = id;
            }
        }
        if !active.iter().any(|&a| a) {
            break;
        }
        logits = model.step(&mut cache, &fed, p)?;
    }
    Ok(out)
}

/// Fixed-length generation: END is anchored at `t + 1` as an unmasked input
/// and excluded from every output distribution.
pub fn decode_length_restricted(
    model: &MainTransformer,
    labels: &[u32],
    lengths: &[usize],
    cfg: &DecodeConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Iter1>> {
    if lengths.len() != labels.len() || rngs.len() != labels.len() {
        return Err(Error::Dimension("one length and one generator per sequence are required".into()));
    }
    let mut out = Vec::with_capacity(labels.len());
    for ((l, t), r) in labels.chunks(CHUNK).zip(lengths.chunks(CHUNK)).zip(rngs.chunks_mut(CHUNK)) {
        out.extend(restricted_chunk(model, l, t, cfg, r)?);
    }
    Ok(out)
}

fn restricted_chunk(
    model: &MainTransformer,
    labels: &[u32],
    lengths: &[usize],
    cfg: &DecodeConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Iter1>> {
    cfg.validate()?;
    let n = labels.len();
    for &t in lengths {
        if t == 0 || t > cfg.t_max {
            return Err(Error::Invalid(format!("requested length {t} outside 1..={}", cfg.t_max)));
        }
        check_cap(model, t)?;
    }
    let end = model.config().end_id();
    let paired = cfg.cfg_s1 != 0.0;
    let mut anchors: Vec<usize> = lengths.iter().map(|t| t + 1).collect();
    if paired {
        anchors.extend_from_within(..);
    }
    let (mut cache, mut logits) = model.prefill(&with_null(labels, paired), Some(&anchors))?;
    let mut out: Vec<Iter1> = (0..n).map(|_| Iter1 { tokens: Vec::new(), confidences: Vec::new(), cap_hit: false, end_suppressed: false }).collect();
    let longest = *lengths.iter().max().unwrap_or(&0);
    for p in 1..=longest {
        let (cols, data) = tensor_rows(&logits)?;
        let mut fed = vec![0u32; if paired { 2 * n } else { n }];
        for b in 0..n {
            if p > lengths[b] {
                continue;
            }
            let mut row = guided_row(&data, cols, n, b, cfg.cfg_s1, paired)?;
            exclude(&mut row, end as usize);
            let (id, prob) = sample(&mut row, cfg.temperature_1, cfg.top_k, &mut rngs[b])?;
            out[b].tokens.push(id);
            out[b].confidences.push(prob);
            fed[b] = id;
            if paired {
                fed[n + b] = id;
            }
        }
        if p < longest {
            logits = model.step(&mut cache, &fed, p)?;
        }
    }
    Ok(out)
}

/// A sequence to re-predict: motion tokens, their confidences and the split.
#[derive(Debug, Clone)]
pub struct RepredictItem {
    pub label: Condition,
    pub tokens: Vec<u32>,
    pub confidences: Vec<f64>,
    pub split: MaskSplit,
}

/// Re-predicts the masked positions of each item left to right under the
/// bidirectional causal mask built from `split.unmasked`. END stays anchored
/// at `t + 1` and is excluded from the outputs; unmasked tokens never change.
pub fn repredict(
    model: &MainTransformer,
    items: &mut [RepredictItem],
    scale: f32,
    temperature: f32,
    k: Option<usize>,
    rngs: &mut [ChaCha8Rng],
) -> Result<()> {
    let n = items.len();
    if rngs.len() != n {
        return Err(Error::Dimension("one generator per sequence is required".into()));
    }
    let end = model.config().end_id();
    let pad = model.config().pad_id();
    let paired = scale != 0.0;
    let masks = items
        .iter()
        .map(|it| {
            check_cap(model, it.tokens.len())?;
            Ok(build_causal_mask(it.tokens.len() + 2, &it.split.unmasked)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let before: Vec<Vec<u32>> = items.iter().map(|it| it.tokens.clone()).collect();
    let rounds = items.iter().map(|it| it.split.masked.len()).max().unwrap_or(0);
    for r in 0..rounds {
        let live: Vec<usize> = (0..n).filter(|&b| r < items[b].split.masked.len()).collect();
        let len = live.iter().map(|&b| items[b].tokens.len() + 2).max().unwrap_or(2);
        let mut batch = MainBatch::new(len);
        let copies = if paired { 2 } else { 1 };
        for copy in 0..copies {
            for &b in &live {
                let it = &items[b];
                let mut layout = Vec::with_capacity(it.tokens.len() + 2);
                layout.push(pad);
                layout.extend_from_slice(&it.tokens);
                layout.push(end);
                let cond = if copy == 0 { it.label } else { Condition::Null };
                batch.push(&layout, cond, &masks[b], pad)?;
            }
        }
        let logits = model.forward(&batch, None)?;
        let m = live.len();
        for (i, &b) in live.iter().enumerate() {
            let p = items[b].split.masked[r];
            let pick = |row: usize| -> Result<Vec<f32>> {
                Ok(logits.get(row)?.get(p - 1)?.to_dtype(DType::F32)?.to_vec1()?)
            };
            let mut row = if paired { logits_cfg(&pick(i)?, &pick(m + i)?, scale)? } else { pick(i)? };
            exclude(&mut row, end as usize);
            let (id, prob) = sample(&mut row, temperature, k, &mut rngs[b])?;
            items[b].tokens[p - 1] = id;
            items[b].confidences[p - 1] = prob;
        }
    }
    for (it, old) in items.iter().zip(&before) {
        let changed_ok = old
            .iter()
            .zip(&it.tokens)
            .enumerate()
            .all(|(i, (a, b))| a == b || it.split.masked.binary_search(&(i + 1)).is_ok());
        if !changed_ok {
            return Err(Error::Invalid("re-prediction altered an unmasked position".into()));
        }
    }
    Ok(())
}

/// Predicts quantizer layers `1..V` greedily from the base layer.
///
/// With `keep = Some((source, masked))` only the masked positions are
/// predicted; every other position keeps the source grid's ids.
pub fn refine_residuals(
    refiner: Option<&Refiner>,
    bases: &[Vec<u32>],
    labels: &[Condition],
    scale: f32,
    keep: Option<&[(TokenGrid, Vec<usize>)]>,
) -> Result<Vec<TokenGrid>> {
    let n = bases.len();
    if labels.len() != n || keep.is_some_and(|k| k.len() != n) {
        return Err(Error::Dimension("one label (and source) per sequence is required".into()));
    }
    let Some(refiner) = refiner.filter(|r| r.config().num_quantizers > 1) else {
        return bases.iter().map(|b| Ok(TokenGrid::from_rows(std::slice::from_ref(b))?)).collect();
    };
    let v_count = refiner.config().num_quantizers;
    let mut rows: Vec<Vec<Vec<u32>>> = bases.iter().map(|b| vec![b.clone()]).collect();
    let paired = scale != 0.0;
    for v in 1..v_count {
        let mut items: Vec<RefinerItem> =
            (0..n).map(|b| RefinerItem { ids: rows[b].clone(), target: v, cond: labels[b] }).collect();
        if paired {
            items.extend((0..n).map(|b| RefinerItem { ids: rows[b].clone(), target: v, cond: Condition::Null }));
        }
        let logits = refiner.forward(&items, None)?;
        for b in 0..n {
            let t = bases[b].len();
            let mut layer = Vec::with_capacity(t);
            for p in 0..t {
                if let Some(keep) = keep {
                    let (src, masked) = &keep[b];
                    if masked.binary_search(&(p + 1)).is_err() {
                        layer.push(src.row(v)[p]);
                        continue;
                    }
                }
                let pick = |row: usize| -> Result<Vec<f32>> {
                    Ok(logits.get(row)?.get(p + 1)?.to_dtype(DType::F32)?.to_vec1()?)
                };
                let guided = if paired { logits_cfg(&pick(b)?, &pick(n + b)?, scale)? } else { pick(b)? };
                layer.push(argmax(&guided) as u32);
            }
            rows[b].push(layer);
        }
    }
    rows.iter().map(|r| Ok(TokenGrid::from_rows(r)?)).collect()
}

/// Trained tokenizer, main transformer, optional refiner and label names.
pub struct ModelStack {
    pub tokenizer: Tokenizer,
    pub main: MainTransformer,
    pub refiner: Option<Refiner>,
    pub labels: Vec<String>,
}

pub const TOKENIZER_FILE: &str = "tokenizer.ckpt";
pub const MAIN_FILE: &str = "transformer.ckpt";
pub const REFINER_FILE: &str = "refiner.ckpt";
pub const LABELS_FILE: &str = "labels.json";

impl ModelStack {
    pub fn paths(dir: &Path) -> [PathBuf; 4] {
        [TOKENIZER_FILE, MAIN_FILE, REFINER_FILE, LABELS_FILE].map(|f| dir.join(f))
    }

    /// Loads every artifact from `dir`; the refiner is optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let [tok, main, refiner, labels] = Self::paths(dir);
        let tokenizer = Tokenizer::load(&tok)?;
        let main = MainTransformer::load(&main)?;
        let refiner = if refiner.exists() { Some(Refiner::load(&refiner)?) } else { None };
        let labels = load_labels(&labels)?;
        let stack = Self { tokenizer, main, refiner, labels };
        stack.check()?;
        Ok(stack)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let [tok, main, refiner, labels] = Self::paths(dir);
        self.tokenizer.save(&tok)?;
        self.main.save(&main)?;
        if let Some(r) = &self.refiner {
            r.save(&refiner)?;
        }
        save_labels(&labels, &self.labels)
    }

    pub fn check(&self) -> Result<()> {
        let k = self.tokenizer.config().codebook_size;
        if self.main.config().codebook_size != k {
            return Err(Error::Config(format!("transformer K {} vs tokenizer K {k}", self.main.config().codebook_size)));
        }
        if self.main.config().num_labels != self.labels.len() {
            return Err(Error::Config("label vocabulary does not match the transformer".into()));
        }
        if let Some(r) = &self.refiner {
            if r.config().num_quantizers != self.tokenizer.config().num_quantizers || r.config().base.codebook_size != k {
                return Err(Error::Config("refiner does not match the tokenizer stack".into()));
            }
        }
        Ok(())
    }

    pub fn label_index(&self, label: u32) -> Result<u32> {
        if (label as usize) < self.labels.len() {
            Ok(label)
        } else {
            Err(Error::Invalid(format!("label {label} outside 0..{}", self.labels.len())))
        }
    }

    /// Frames in physical units for a token grid.
    pub fn grid_to_frames(&self, grid: &TokenGrid) -> Result<FrameMatrix> {
        let frames = self.tokenizer.detokenize(grid, grid.layers(), DEFAULT_FPS)?;
        match self.tokenizer.norm() {
            Some(norm) => denormalize(&frames, norm),
            None => Ok(frames),
        }
    }
}

pub fn load_labels(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_labels(path: &Path, labels: &[String]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(labels)?).map_err(|e| Error::io(path, e))
}

/// A generation request: label and an optional fixed token length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenRequest {
    pub label: u32,
    pub length: Option<usize>,
}

/// Runs the full cascade for a batch of requests. Request `i` draws its
/// randomness from [`sequence_rng`]`(cfg.seed, i)`, so a single request
/// reproduces the first entry of any batch.
pub fn generate_batch(stack: &ModelStack, requests: &[GenRequest], cfg: &DecodeConfig) -> Result<Vec<(FrameMatrix, DecodeTrace)>> {
    cfg.validate()?;
    for r in requests {
        stack.label_index(r.label)?;
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..requests.len()).map(|i| sequence_rng(cfg.seed, i as u64)).collect();
    let mut iter1: Vec<Option<Iter1>> = vec![None; requests.len()];
    let (free, fixed): (Vec<usize>, Vec<usize>) = (0..requests.len()).partition(|&i| requests[i].length.is_none());
    for (group, restricted) in [(free, false), (fixed, true)] {
        if group.is_empty() {
            continue;
        }
        let labels: Vec<u32> = group.iter().map(|&i| requests[i].label).collect();
        let mut sub: Vec<ChaCha8Rng> = group.iter().map(|&i| rngs[i].clone()).collect();
        let res = if restricted {
            let lengths: Vec<usize> = group.iter().map(|&i| requests[i].length.expect("fixed")).collect();
            decode_length_restricted(&stack.main, &labels, &lengths, cfg, &mut sub)?
        } else {
            decode_iter1(&stack.main, &labels, cfg, &mut sub)?
        };
        for ((&i, r), g) in group.iter().zip(res).zip(sub) {
            iter1[i] = Some(r);
            rngs[i] = g;
        }
    }
    let iter1: Vec<Iter1> = iter1.into_iter().map(|x| x.expect("every request decoded")).collect();
    let mut items: Vec<RepredictItem> = Vec::with_capacity(requests.len());
    for (r, it) in requests.iter().zip(&iter1) {
        let t = it.tokens.len();
        items.push(RepredictItem {
            label: Condition::Label(r.label),
            tokens: it.tokens.clone(),
            confidences: it.confidences.clone(),
            split: refinement_mask(t, cfg.strategy.into(), Some(&it.confidences))?,
        });
    }
    let mut passes: Vec<Vec<PassTrace>> = vec![Vec::new(); requests.len()];
    for pass in 1..cfg.n_iterations {
        if pass == 2 {
            for it in items.iter_mut() {
                let third = RefineStrategy::LowConfidence { fraction: 1.0 / 3.0 };
                it.split = refinement_mask(it.tokens.len(), third, Some(&it.confidences))?;
            }
        }
        repredict(&stack.main, &mut items, cfg.cfg_s2, cfg.temperature_2, cfg.top_k, &mut rngs)?;
        for (trace, it) in passes.iter_mut().zip(&items) {
            let tokens = it.split.masked.iter().map(|&p| it.tokens[p - 1]).collect();
            trace.push(PassTrace { masked: it.split.masked.clone(), tokens });
        }
    }
    let bases: Vec<Vec<u32>> = items.iter().map(|it| it.tokens.clone()).collect();
    let conds: Vec<Condition> = requests.iter().map(|r| Condition::Label(r.label)).collect();
    let grids = refine_residuals(stack.refiner.as_ref(), &bases, &conds, cfg.cfg_refine, None)?;
    let mut out = Vec::with_capacity(requests.len());
    for (((r, it), grid), passes) in requests.iter().zip(iter1).zip(grids).zip(passes) {
        if grid.row(0).contains(&stack.main.config().end_id()) {
            return Err(Error::Invalid("END id leaked into the motion tokens".into()));
        }
        let frames = stack.grid_to_frames(&grid)?;
        let trace = DecodeTrace {
            label: r.label,
            length_restricted: r.length.is_some(),
            t: it.tokens.len(),
            iter1_tokens: it.tokens,
            iter1_confidences: it.confidences,
            cap_hit: it.cap_hit,
            end_suppressed: it.end_suppressed,
            passes,
            final_grid: grid.rows(),
        };
        out.push((frames, trace));
    }
    Ok(out)
}

/// Single-request form of [`generate_batch`].
pub fn generate(stack: &ModelStack, label: u32, cfg: &DecodeConfig, length: Option<usize>) -> Result<(FrameMatrix, DecodeTrace)> {
    Ok(generate_batch(stack, &[GenRequest { label, length }], cfg)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::TransformerConfig;

    fn tiny() -> MainTransformer {
        let cfg = TransformerConfig { codebook_size: 6, num_labels: 2, n_layers: 2, n_heads: 2, d_model: 8, max_len: 14, dropout: 0.0, ff_mult: 2 };
        MainTransformer::new(cfg, 9, DType::F32).unwrap()
    }

    fn cfg() -> DecodeConfig {
        DecodeConfig { t_max: 12, ..DecodeConfig::toy() }
    }

    #[test]
    fn presets_and_json_round_trip() {
        let p = DecodeConfig::preset("humanml3d-paper").unwrap();
        assert_eq!((p.cfg_s1, p.cfg_s2, p.cfg_refine), (4.0, 3.0, 6.0));
        let k = DecodeConfig::preset("kit-paper").unwrap();
        assert_eq!((k.cfg_s1, k.cfg_s2, k.cfg_refine), (2.0, 2.0, 6.0));
        assert!(DecodeConfig::preset("nope").is_err());
        let json = serde_json::to_string(&k).unwrap();
        assert_eq!(serde_json::from_str::<DecodeConfig>(&json).unwrap(), k);
        assert!(DecodeConfig { n_iterations: 4, ..k.clone() }.validate().is_err());
        assert!(DecodeConfig { cfg_s1: -1.0, ..k }.validate().is_err());
    }

    #[test]
    fn iter1_respects_cap_and_is_deterministic() {
        let m = tiny();
        let run = || {
            let mut rngs: Vec<_> = (0..4).map(|i| sequence_rng(3, i)).collect();
            decode_iter1(&m, &[0, 1, 0, 1], &cfg(), &mut rngs).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        for it in &a {
            assert!(!it.tokens.is_empty() && it.tokens.len() <= 12);
            assert_eq!(it.cap_hit, it.tokens.len() == 12);
            assert!(it.tokens.iter().all(|&x| x < 6));
            assert!(it.confidences.iter().all(|&c| c > 0.0 && c <= 1.0));
        }
    }

    #[test]
    fn batch_members_match_solo_runs() {
        let m = tiny();
        let mut rngs: Vec<_> = (0..3).map(|i| sequence_rng(5, i)).collect();
        let batch = decode_iter1(&m, &[1, 0, 1], &cfg(), &mut rngs).unwrap();
        let mut solo = vec![sequence_rng(5, 1)];
        assert_eq!(decode_iter1(&m, &[0], &cfg(), &mut solo).unwrap()[0], batch[1]);
    }

    #[test]
    fn restricted_lengths_exact() {
        let m = tiny();
        let lengths = [1, 5, 12];
        let mut rngs: Vec<_> = (0..3).map(|i| sequence_rng(1, i)).collect();
        let out = decode_length_restricted(&m, &[0, 1, 0], &lengths, &cfg(), &mut rngs).unwrap();
        for (o, &t) in out.iter().zip(&lengths) {
            assert_eq!(o.tokens.len(), t);
            assert!(o.tokens.iter().all(|&x| x < 6));
        }
        let mut r = vec![sequence_rng(1, 0)];
        assert!(decode_length_restricted(&m, &[0], &[13], &cfg(), &mut r).is_err());
    }

    #[test]
    fn repredict_touches_only_masked_positions() {
        let m = tiny();
        let tokens = vec![1, 2, 3, 4, 5];
        let split = refinement_mask(5, RefineStrategy::EveryOther, None).unwrap();
        assert_eq!(split.masked, vec![2, 4]);
        let mut items = vec![RepredictItem { label: Condition::Label(1), tokens: tokens.clone(), confidences: vec![0.5; 5], split }];
        let mut rngs = vec![sequence_rng(2, 0)];
        repredict(&m, &mut items, 2.0, 1.0, None, &mut rngs).unwrap();
        for p in [1, 3, 5] {
            assert_eq!(items[0].tokens[p - 1], tokens[p - 1]);
        }
        let empty = MaskSplit { unmasked: bamm_core::UnmaskedSet::from_indices(0..7), masked: vec![] };
        let mut items = vec![RepredictItem { label: Condition::Null, tokens: tokens.clone(), confidences: vec![0.5; 5], split: empty }];
        repredict(&m, &mut items, 2.0, 1.0, None, &mut rngs).unwrap();
        assert_eq!(items[0].tokens, tokens);
    }

    #[test]
    fn zero_scale_matches_unguided_sampling() {
        let m = tiny();
        let c = DecodeConfig { cfg_s1: 0.0, ..cfg() };
        let mut r1 = vec![sequence_rng(8, 0)];
        let guided = decode_iter1(&m, &[1], &c, &mut r1).unwrap();
        // Manual unguided reference using the full forward pass.
        let mut rng = sequence_rng(8, 0);
        let mut tokens: Vec<u32> = Vec::new();
        loop {
            let mut layout = vec![7u32];
            layout.extend(&tokens);
            layout.push(6);
            let mask = build_causal_mask(layout.len(), &bamm_core::UnmaskedSet::empty()).unwrap();
            let l = m.forward_main(&layout, Condition::Label(1), &mask).unwrap();
            let mut row = l.row(tokens.len()).to_vec();
            if tokens.is_empty() {
                exclude(&mut row, 6);
            }
            let (id, _) = sample(&mut row, 1.0, None, &mut rng).unwrap();
            if id == 6 || tokens.len() == 12 {
                break;
            }
            tokens.push(id);
            if tokens.len() == 12 {
                break;
            }
        }
        assert_eq!(guided[0].tokens, tokens);
    }
}
