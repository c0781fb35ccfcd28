//! Masked self-attention transformer over motion tokens, and the residual
//! refinement transformer that predicts the upper quantizer layers.
//!
//! Sequence layout for the main model: position 0 holds the condition, motion
//! tokens occupy `1..=t` and the END slot is `t + 1`. Row `p` of the output
//! scores the token at position `p + 1`.

use std::path::Path;

use bamm_core::corrupt::Condition;
use bamm_core::mask::{full_mask, MaskMatrix};
use bamm_core::{CoreError, TokenId};
use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{dropout, softmax_last_dim, Embedding, LayerNorm, Linear, ParamStore};

pub const MAIN_KIND: &str = "transformer";
pub const REFINER_KIND: &str = "refiner";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Motion codebook size `K`; the output vocabulary is `K + 1` with END = `K`.
    pub codebook_size: usize,
    pub num_labels: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Longest supported sequence `L_max` (condition + tokens + END).
    pub max_len: usize,
    pub dropout: f64,
    pub ff_mult: usize,
}

impl TransformerConfig {
    pub fn toy(codebook_size: usize, num_labels: usize) -> Self {
        Self { codebook_size, num_labels, n_layers: 4, n_heads: 4, d_model: 128, max_len: 52, dropout: 0.1, ff_mult: 4 }
    }

    pub fn paper(codebook_size: usize, num_labels: usize) -> Self {
        Self { n_layers: 6, n_heads: 6, d_model: 384, ..Self::toy(codebook_size, num_labels) }
    }

    pub fn end_id(&self) -> TokenId {
        self.codebook_size as TokenId
    }

    pub fn pad_id(&self) -> TokenId {
        self.codebook_size as TokenId + 1
    }

    /// Longest motion (in tokens) that fits the layout.
    pub fn max_tokens(&self) -> usize {
        self.max_len - 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.max_len < 3 || self.codebook_size < 2 || self.num_labels == 0 {
            return Err(Error::Config("transformer needs max_len ≥ 3, K ≥ 2 and at least one label".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub base: TransformerConfig,
    /// Quantizer layers `V` of the tokenizer stack.
    pub num_quantizers: usize,
    /// Feed the condition token at position 0; otherwise the null condition
    /// is always used there.
    pub use_condition: bool,
}

/// Row-major `rows x cols` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl LogitsMatrix {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Ok(Self { rows, cols, data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()? })
    }

    /// Elementwise `(1+s)·self − s·uncond`.
    pub fn guided(&self, uncond: &LogitsMatrix, scale: f32) -> Result<Self> {
        if self.rows != uncond.rows || self.cols != uncond.cols {
            return Err(CoreError::ShapeMismatch { what: "logits", expected: self.data.len(), got: uncond.data.len() }.into());
        }
        let data = bamm_core::guidance::logits_cfg(&self.data, &uncond.data, scale)?;
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }
}

/// Additive attention bias for a batch member padded to `len` positions.
/// Padded query rows attend only to themselves so no row is empty; padded
/// keys are hidden from real queries.
pub fn padded_bias(mask: &MaskMatrix, len: usize) -> Vec<f32> {
    let m = mask.len();
    let mut out = vec![f32::NEG_INFINITY; len * len];
    for i in 0..len {
        for j in 0..len {
            let ok = if i < m { j < m && mask.is_allowed(i, j) } else { i == j };
            if ok {
                out[i * len + j] = 0.0;
            }
        }
    }
    out
}

/// `softmax(QKᵀ/√d_k + bias)·V` for `q, k, v: (B, H, L, d_k)` and a bias
/// broadcastable to `(B, H, L, L)`. Returns the context and the weights.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: &Tensor) -> Result<(Tensor, Tensor)> {
    for (name, t) in [("queries", q), ("keys", k), ("values", v)] {
        let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if s.is_nan() {
            return Err(CoreError::NonFinite(match name {
                "queries" => "attention queries",
                "keys" => "attention keys",
                _ => "attention values",
            })
            .into());
        }
    }
    attention(q, k, v, bias)
}

fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: &Tensor) -> Result<(Tensor, Tensor)> {
    let dk = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? * (1.0 / (dk as f64).sqrt()))?;
    let weights = softmax_last_dim(&scores.broadcast_add(bias)?)?;
    Ok((weights.matmul(v)?, weights))
}

struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    n_heads: usize,
    dropout: f64,
}

impl Block {
    fn new(ps: &mut ParamStore, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            qkv: Linear::new(ps, &format!("{name}.qkv"), d, 3 * d, true)?,
            proj: Linear::new(ps, &format!("{name}.proj"), d, d, true)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
            ff1: Linear::new(ps, &format!("{name}.ff1"), d, cfg.ff_mult * d, true)?,
            ff2: Linear::new(ps, &format!("{name}.ff2"), cfg.ff_mult * d, d, true)?,
            n_heads: cfg.n_heads,
            dropout: cfg.dropout,
        })
    }

    fn forward(&self, x: &Tensor, bias: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let (h, dk) = (self.n_heads, d / self.n_heads);
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?.reshape((b, l, 3, h, dk))?;
        let part = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let (ctx, _) = attention(&q, &k, &v, bias)?;
        let ctx = ctx.transpose(1, 2)?.reshape((b, l, d))?;
        let a = dropout(&self.proj.forward(&ctx)?, self.dropout, rng.as_deref_mut())?;
        let x = (x + a)?;
        let f = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        let f = dropout(&f, self.dropout, rng.as_deref_mut())?;
        Ok((x + f)?)
    }

    /// Inference step over `x: (B, n, d)` new positions; their keys and values
    /// are appended to `cache` and `bias: (B, 1, n, cached + n)` applies.
    fn forward_cached(&self, x: &Tensor, bias: &Tensor, cache: &mut Option<(Tensor, Tensor)>) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let (h, dk) = (self.n_heads, d / self.n_heads);
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?.reshape((b, l, 3, h, dk))?;
        let part = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let (k, v) = match cache.take() {
            Some((ck, cv)) => (Tensor::cat(&[&ck, &k], 2)?, Tensor::cat(&[&cv, &v], 2)?),
            None => (k, v),
        };
        let (ctx, _) = attention(&q, &k, &v, bias)?;
        *cache = Some((k.detach(), v.detach()));
        let ctx = ctx.transpose(1, 2)?.reshape((b, l, d))?;
        let x = (x + self.proj.forward(&ctx)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok((x + f)?)
    }
}

/// Per-layer keys and values of the positions processed so far.
pub struct KvCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
    batch: usize,
}

impl KvCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn cached_len(&self) -> usize {
        self.layers.first().and_then(|l| l.as_ref()).map_or(0, |(k, _)| k.dims()[2])
    }
}

/// Shared trunk: blocks plus final norm and head.
struct Trunk {
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Trunk {
    fn new(ps: &mut ParamStore, cfg: &TransformerConfig, outputs: usize) -> Result<Self> {
        let blocks = (0..cfg.n_layers).map(|i| Block::new(ps, &format!("block{i}"), cfg)).collect::<Result<_>>()?;
        Ok(Self { blocks, ln_f: LayerNorm::new(ps, "ln_f", cfg.d_model)?, head: Linear::new(ps, "head", cfg.d_model, outputs, true)? })
    }

    fn forward(&self, x: Tensor, bias: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(&h, bias, rng.as_deref_mut())?;
        }
        self.head.forward(&self.ln_f.forward(&h)?)
    }

    fn forward_cached(&self, x: Tensor, bias: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let mut h = x;
        for (b, c) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            h = b.forward_cached(&h, bias, c)?;
        }
        self.head.forward(&self.ln_f.forward(&h)?)
    }
}

fn cond_index(c: Condition, num_labels: usize) -> Result<u32> {
    match c {
        Condition::Label(l) if (l as usize) < num_labels => Ok(l),
        Condition::Label(l) => Err(Error::Invalid(format!("label {l} outside the {num_labels}-label vocabulary"))),
        Condition::Null => Ok(num_labels as u32),
    }
}

/// A padded batch for the main transformer.
#[derive(Debug, Clone)]
pub struct MainBatch {
    pub batch: usize,
    pub len: usize,
    /// `batch x len` input ids; position 0 is ignored (condition slot).
    pub ids: Vec<u32>,
    pub conds: Vec<Condition>,
    /// `batch x len x len` additive bias.
    pub bias: Vec<f32>,
}

impl MainBatch {
    pub fn new(len: usize) -> Self {
        Self { batch: 0, len, ids: Vec::new(), conds: Vec::new(), bias: Vec::new() }
    }

    /// Appends one sequence (`tokens` covers positions `0..tokens.len()`,
    /// slot 0 included) with its mask, padding to the batch length.
    pub fn push(&mut self, tokens: &[u32], cond: Condition, mask: &MaskMatrix, pad: u32) -> Result<()> {
        if tokens.len() > self.len || mask.len() != tokens.len() {
            return Err(Error::Dimension(format!(
                "sequence of {} positions (mask {}) does not fit batch length {}",
                tokens.len(),
                mask.len(),
                self.len
            )));
        }
        self.ids.extend_from_slice(tokens);
        self.ids.extend(std::iter::repeat(pad).take(self.len - tokens.len()));
        self.conds.push(cond);
        self.bias.extend(padded_bias(mask, self.len));
        self.batch += 1;
        Ok(())
    }
}

pub struct MainTransformer {
    cfg: TransformerConfig,
    params: ParamStore,
    tok_emb: Embedding,
    cond_emb: Embedding,
    pos_emb: Embedding,
    trunk: Trunk,
}

impl MainTransformer {
    pub fn new(cfg: TransformerConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let d = cfg.d_model;
        let tok_emb = Embedding::new(&mut ps, "tok_emb", cfg.codebook_size + 2, d, 0.02)?;
        let cond_emb = Embedding::new(&mut ps, "cond_emb", cfg.num_labels + 1, d, 0.02)?;
        let pos_emb = Embedding::new(&mut ps, "pos_emb", cfg.max_len, d, 0.02)?;
        let trunk = Trunk::new(&mut ps, &cfg, cfg.codebook_size + 1)?;
        Ok(Self { cfg, params: ps, tok_emb, cond_emb, pos_emb, trunk })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Input embeddings `(B, L, d)` for a batch; exposed for gradient tests.
    pub fn embed(&self, batch: &MainBatch) -> Result<Tensor> {
        let (b, l) = (batch.batch, batch.len);
        if l > self.cfg.max_len {
            return Err(Error::Invalid(format!("sequence length {l} exceeds L_max {}", self.cfg.max_len)));
        }
        let vocab = self.cfg.codebook_size as u32 + 2;
        if let Some(bad) = batch.ids.iter().enumerate().find(|(i, &id)| i % l != 0 && id >= vocab) {
            return Err(Error::Invalid(format!("token id {} outside the input vocabulary", bad.1)));
        }
        let dev = Device::Cpu;
        let ids = Tensor::from_slice(&batch.ids, (b, l), &dev)?;
        let conds = batch.conds.iter().map(|&c| cond_index(c, self.cfg.num_labels)).collect::<Result<Vec<u32>>>()?;
        let cond = self.cond_emb.forward(&Tensor::from_vec(conds, (b, 1), &dev)?)?;
        let tokens = self.tok_emb.forward(&ids.narrow(1, 1, l - 1)?)?;
        let pos = self.pos_emb.forward(&Tensor::arange(0u32, l as u32, &dev)?)?;
        Ok(Tensor::cat(&[cond, tokens], 1)?.broadcast_add(&pos)?)
    }

    pub fn bias_tensor(&self, batch: &MainBatch) -> Result<Tensor> {
        Ok(Tensor::from_slice(&batch.bias, (batch.batch, 1, batch.len, batch.len), &Device::Cpu)?
            .to_dtype(self.params.dtype())?)
    }

    /// Logits `(B, L, K+1)` from precomputed embeddings.
    pub fn forward_embedded(&self, x: Tensor, bias: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        self.trunk.forward(x, bias, rng)
    }

    /// Logits `(B, L, K+1)`; dropout is active only when `rng` is given.
    pub fn forward(&self, batch: &MainBatch, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let x = self.embed(batch)?;
        let bias = self.bias_tensor(batch)?;
        self.forward_embedded(x, &bias, rng)
    }

    /// Starts incremental decoding. The condition (and, when `end_pos` is
    /// given, an END anchor at `end_pos[b]`) form the unmasked set and see
    /// each other. Returns the cache and the logits `(B, K+1)` of the
    /// condition row, which scores motion position 1.
    ///
    /// Every later [`step`](Self::step) query sees all cached positions,
    /// which matches the causal mask with `U = {0}` or `U = {0, end}`.
    pub fn prefill(&self, conds: &[Condition], end_pos: Option<&[usize]>) -> Result<(KvCache, Tensor)> {
        let b = conds.len();
        let dev = Device::Cpu;
        let ids = conds.iter().map(|&c| cond_index(c, self.cfg.num_labels)).collect::<Result<Vec<u32>>>()?;
        let cond = self.cond_emb.forward(&Tensor::from_vec(ids, (b, 1), &dev)?)?;
        let pos0 = self.pos_emb.forward(&Tensor::zeros(1, DType::U32, &dev)?)?;
        let mut x = cond.broadcast_add(&pos0)?;
        if let Some(ends) = end_pos {
            if ends.len() != b || ends.iter().any(|&e| e < 2 || e >= self.cfg.max_len) {
                return Err(Error::Invalid("END anchor positions must lie in 2..L_max, one per row".into()));
            }
            let end_ids = Tensor::from_vec(vec![self.cfg.end_id(); b], (b, 1), &dev)?;
            let pos = Tensor::from_vec(ends.iter().map(|&e| e as u32).collect(), (b, 1), &dev)?;
            let end = (self.tok_emb.forward(&end_ids)? + self.pos_emb.forward(&pos)?)?;
            x = Tensor::cat(&[x, end], 1)?;
        }
        let n = x.dim(1)?;
        let bias = Tensor::zeros((b, 1, n, n), self.params.dtype(), &dev)?;
        let mut cache = KvCache { layers: vec![None; self.cfg.n_layers], batch: b };
        let logits = self.trunk.forward_cached(x, &bias, &mut cache)?;
        Ok((cache, logits.narrow(1, 0, 1)?.squeeze(1)?))
    }

    /// Feeds one motion token per row at layout position `pos` and returns
    /// the logits `(B, K+1)` scoring position `pos + 1`.
    pub fn step(&self, cache: &mut KvCache, tokens: &[u32], pos: usize) -> Result<Tensor> {
        let b = cache.batch;
        if tokens.len() != b {
            return Err(Error::Dimension(format!("{} tokens for a batch of {b}", tokens.len())));
        }
        if pos == 0 || pos >= self.cfg.max_len {
            return Err(Error::Invalid(format!("position {pos} outside 1..L_max")));
        }
        let dev = Device::Cpu;
        let x = self.tok_emb.forward(&Tensor::from_slice(tokens, (b, 1), &dev)?)?;
        let x = x.broadcast_add(&self.pos_emb.forward(&Tensor::from_vec(vec![pos as u32], 1, &dev)?)?)?;
        let n = cache.cached_len() + 1;
        let bias = Tensor::zeros((b, 1, 1, n), self.params.dtype(), &dev)?;
        Ok(self.trunk.forward_cached(x, &bias, cache)?.squeeze(1)?)
    }

    /// Single-sequence forward: `tokens` covers the whole layout (slot 0 is
    /// ignored), `mask` matches its length.
    pub fn forward_main(&self, tokens: &[u32], cond: Condition, mask: &MaskMatrix) -> Result<LogitsMatrix> {
        if tokens.len() < 2 {
            return Err(Error::Invalid("layout needs at least the condition and END slots".into()));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::Invalid(format!("sequence length {} exceeds L_max {}", tokens.len(), self.cfg.max_len)));
        }
        let mut batch = MainBatch::new(tokens.len());
        batch.push(tokens, cond, mask, self.cfg.pad_id())?;
        LogitsMatrix::from_tensor(&self.forward(&batch, None)?.squeeze(0)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(MAIN_KIND, serde_json::to_value(&self.cfg)?);
        self.params.write_into(&mut ck)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(MAIN_KIND)?;
        let cfg: TransformerConfig = serde_json::from_value(ck.config.clone())?;
        let mut m = Self::new(cfg, 0, DType::F32)?;
        m.params.read_from(ck)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One refiner input: lower-layer ids for a sequence and the layer to predict.
#[derive(Debug, Clone)]
pub struct RefinerItem {
    /// `ids[l]` are layer-`l` code ids, for at least layers `0..target`.
    pub ids: Vec<Vec<u32>>,
    pub target: usize,
    pub cond: Condition,
}

pub struct Refiner {
    cfg: RefinerConfig,
    params: ParamStore,
    code_embs: Vec<Embedding>,
    layer_emb: Embedding,
    cond_emb: Embedding,
    pos_emb: Embedding,
    trunk: Trunk,
}

impl Refiner {
    pub fn new(cfg: RefinerConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.base.validate()?;
        if cfg.num_quantizers == 0 {
            return Err(Error::Config("refiner needs at least one quantizer layer".into()));
        }
        let b = &cfg.base;
        let mut ps = ParamStore::new(dtype, seed);
        let code_embs = (0..cfg.num_quantizers.saturating_sub(1))
            .map(|l| Embedding::new(&mut ps, &format!("code_emb{l}"), b.codebook_size, b.d_model, 0.02))
            .collect::<Result<_>>()?;
        let layer_emb = Embedding::new(&mut ps, "layer_emb", cfg.num_quantizers, b.d_model, 0.02)?;
        let cond_emb = Embedding::new(&mut ps, "cond_emb", b.num_labels + 1, b.d_model, 0.02)?;
        let pos_emb = Embedding::new(&mut ps, "pos_emb", b.max_len, b.d_model, 0.02)?;
        let trunk = Trunk::new(&mut ps, b, b.codebook_size)?;
        Ok(Self { cfg, params: ps, code_embs, layer_emb, cond_emb, pos_emb, trunk })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Logits `(B, 1 + t_max, K)`; row `p ≥ 1` scores the layer-`target`
    /// code at motion position `p`.
    pub fn forward(&self, items: &[RefinerItem], rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let b = self.cfg.base.clone();
        let dev = Device::Cpu;
        let t_max = items.iter().map(|it| it.ids.first().map_or(0, Vec::len)).max().unwrap_or(0);
        if items.is_empty() || t_max == 0 {
            return Err(Error::Invalid("refiner batch is empty".into()));
        }
        let len = t_max + 1;
        if len > b.max_len {
            return Err(Error::Invalid(format!("sequence length {len} exceeds L_max {}", b.max_len)));
        }
        let n = items.len();
        let v_count = self.cfg.num_quantizers;
        let mut x: Option<Tensor> = None;
        for l in 0..v_count.saturating_sub(1) {
            let mut ids = vec![0u32; n * t_max];
            let mut on = vec![0f32; n];
            for (i, it) in items.iter().enumerate() {
                if l < it.target {
                    on[i] = 1.0;
                    let row = &it.ids[l];
                    ids[i * t_max..i * t_max + row.len()].copy_from_slice(row);
                }
            }
            if on.iter().all(|&o| o == 0.0) {
                continue;
            }
            let e = self.code_embs[l].forward(&Tensor::from_vec(ids, (n, t_max), &dev)?)?;
            let gate = Tensor::from_vec(on, (n, 1, 1), &dev)?.to_dtype(self.params.dtype())?;
            let e = e.broadcast_mul(&gate)?;
            x = Some(match x {
                Some(acc) => (acc + e)?,
                None => e,
            });
        }
        let mut targets = Vec::with_capacity(n);
        let mut conds = Vec::with_capacity(n);
        let mut bias = Vec::with_capacity(n * len * len);
        for it in items {
            if it.target == 0 || it.target >= v_count {
                return Err(Error::Invalid(format!(
                    "refiner target layer must lie in [1, {v_count}), got {}",
                    it.target
                )));
            }
            if it.ids.len() < it.target {
                return Err(Error::Dimension(format!("item has {} layers, target {}", it.ids.len(), it.target)));
            }
            targets.push(it.target as u32);
            let c = if self.cfg.use_condition { it.cond } else { Condition::Null };
            conds.push(cond_index(c, b.num_labels)?);
            bias.extend(padded_bias(&full_mask(it.ids[0].len() + 1), len));
        }
        let layer = self.layer_emb.forward(&Tensor::from_vec(targets, (n, 1), &dev)?)?;
        let motion = match x {
            Some(x) => x.broadcast_add(&layer)?,
            None => layer.broadcast_as((n, t_max, b.d_model))?.contiguous()?,
        };
        let cond = self.cond_emb.forward(&Tensor::from_vec(conds, (n, 1), &dev)?)?;
        let pos = self.pos_emb.forward(&Tensor::arange(0u32, len as u32, &dev)?)?;
        let h = Tensor::cat(&[cond, motion], 1)?.broadcast_add(&pos)?;
        let bias = Tensor::from_vec(bias, (n, 1, len, len), &dev)?.to_dtype(self.params.dtype())?;
        self.trunk.forward(h, &bias, rng)
    }

    /// Logits `t x K` for one sequence.
    pub fn forward_refiner(&self, lower: &[Vec<u32>], target: usize, cond: Condition) -> Result<LogitsMatrix> {
        if target == 0 {
            return Err(Error::Invalid("layer 0 is predicted by the main transformer, not the refiner".into()));
        }
        let item = RefinerItem { ids: lower.to_vec(), target, cond };
        let out = self.forward(&[item], None)?.squeeze(0)?;
        let t = out.dim(0)? - 1;
        LogitsMatrix::from_tensor(&out.narrow(0, 1, t)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(REFINER_KIND, serde_json::to_value(&self.cfg)?);
        self.params.write_into(&mut ck)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(REFINER_KIND)?;
        let cfg: RefinerConfig = serde_json::from_value(ck.config.clone())?;
        let mut m = Self::new(cfg, 0, DType::F32)?;
        m.params.read_from(ck)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bamm_core::mask::build_causal_mask;
    use bamm_core::UnmaskedSet;

    fn tiny() -> TransformerConfig {
        TransformerConfig { codebook_size: 6, num_labels: 2, n_layers: 2, n_heads: 2, d_model: 8, max_len: 10, dropout: 0.0, ff_mult: 2 }
    }

    #[test]
    fn shape_and_determinism() {
        let m = MainTransformer::new(tiny(), 1, DType::F32).unwrap();
        let tokens = [0, 1, 2, 3, 4, 6];
        let mask = build_causal_mask(6, &UnmaskedSet::empty()).unwrap();
        let a = m.forward_main(&tokens, Condition::Label(1), &mask).unwrap();
        assert_eq!((a.rows, a.cols), (6, 7));
        let b = m.forward_main(&tokens, Condition::Label(1), &mask).unwrap();
        assert_eq!(a, b);
        assert!(m.forward_main(&[0; 11], Condition::Null, &build_causal_mask(11, &UnmaskedSet::empty()).unwrap()).is_err());
    }

    #[test]
    fn attention_single_allowed_key_copies_value() {
        let dev = Device::Cpu;
        let q = Tensor::new(&[[[[0.3f32, -1.0], [2.0, 0.1], [0.5, 0.5]]]], &dev).unwrap();
        let v = Tensor::new(&[[[[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]]]], &dev).unwrap();
        let ni = f32::NEG_INFINITY;
        let bias = Tensor::new(&[[[0.0f32, ni, ni], [0.0, ni, ni], [0.0, 0.0, 0.0]]], &dev).unwrap();
        let (ctx, w) = masked_attention(&q, &q, &v, &bias).unwrap();
        let ctx = ctx.flatten_to(2).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(ctx[0], vec![1.0, 2.0]);
        assert_eq!(ctx[1], vec![1.0, 2.0]);
        let w = w.flatten_to(2).unwrap().to_vec2::<f32>().unwrap();
        assert!((w[2].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let nan = Tensor::new(&[[[[f32::NAN, 0.0]]]], &dev).unwrap();
        assert!(masked_attention(&nan, &nan, &nan, &Tensor::zeros((1, 1, 1), DType::F32, &dev).unwrap()).is_err());
    }

    #[test]
    fn refiner_shapes_and_layer_zero_rejected() {
        let cfg = RefinerConfig { base: tiny(), num_quantizers: 3, use_condition: true };
        let r = Refiner::new(cfg, 2, DType::F32).unwrap();
        let lower = vec![vec![1, 2, 3, 4], vec![0, 0, 5, 1]];
        let l = r.forward_refiner(&lower, 2, Condition::Label(0)).unwrap();
        assert_eq!((l.rows, l.cols), (4, 6));
        assert_eq!(l, r.forward_refiner(&lower, 2, Condition::Label(0)).unwrap());
        assert!(r.forward_refiner(&lower, 0, Condition::Null).is_err());
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let m = MainTransformer::new(tiny(), 5, DType::F64).unwrap();
        let tokens = [0u32, 3, 1, 5, 2];
        let close = |a: &[f64], b: &[f32]| a.iter().zip(b).all(|(x, y)| (*x as f32 - y).abs() < 1e-5);
        // Unidirectional: full layout with a dummy END slot.
        let mut full = tokens.to_vec();
        full.push(6);
        let mask = build_causal_mask(full.len(), &UnmaskedSet::empty()).unwrap();
        let reference = m.forward_main(&full, Condition::Label(1), &mask).unwrap();
        let (mut cache, first) = m.prefill(&[Condition::Label(1)], None).unwrap();
        assert!(close(&first.squeeze(0).unwrap().to_vec1::<f64>().unwrap(), reference.row(0)));
        for p in 1..tokens.len() {
            let l = m.step(&mut cache, &tokens[p..p + 1], p).unwrap();
            assert!(close(&l.squeeze(0).unwrap().to_vec1::<f64>().unwrap(), reference.row(p)), "row {p}");
        }
        // END anchored at position 5.
        let mask = build_causal_mask(6, &UnmaskedSet::from_indices([0, 5])).unwrap();
        let reference = m.forward_main(&full, Condition::Null, &mask).unwrap();
        let (mut cache, first) = m.prefill(&[Condition::Null], Some(&[5])).unwrap();
        assert!(close(&first.squeeze(0).unwrap().to_vec1::<f64>().unwrap(), reference.row(0)));
        for p in 1..4 {
            let l = m.step(&mut cache, &tokens[p..p + 1], p).unwrap();
            assert!(close(&l.squeeze(0).unwrap().to_vec1::<f64>().unwrap(), reference.row(p)), "anchored row {p}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MainTransformer::new(tiny(), 4, DType::F32).unwrap();
        let back = MainTransformer::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        let mask = build_causal_mask(4, &UnmaskedSet::empty()).unwrap();
        let t = [0, 3, 2, 6];
        assert_eq!(
            m.forward_main(&t, Condition::Null, &mask).unwrap(),
            back.forward_main(&t, Condition::Null, &mask).unwrap()
        );
    }
}
