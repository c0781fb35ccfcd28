//! Convolutional motion encoder/decoder around a residual VQ stack.
//!
//! The encoder downsamples time by 4 with two stride-2 stages; the decoder
//! mirrors it with nearest-neighbour upsampling. Codebooks are maintained by
//! EMA updates and dead-code resets rather than by gradients, and gradients
//! reach the encoder through the straight-through estimator.

use std::path::Path;

use bamm_core::vq::{ema_update, reset_dead_codes, rvq_decode, rvq_encode, RvqEncoding};
use bamm_core::{Codebook, RvqStack, TokenGrid};
use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{FrameMatrix, MotionRecord, NormStats, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, smooth_l1, Conv1d, ParamStore};
use crate::schedule::LrSchedule;

pub const CHECKPOINT_KIND: &str = "tokenizer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub input_dim: usize,
    /// Channel width of the convolutional trunk.
    pub width: usize,
    /// Latent / code vector dimension `d`.
    pub code_dim: usize,
    /// Codes per quantization layer `K`.
    pub codebook_size: usize,
    /// Number of residual quantization layers `V`.
    pub num_quantizers: usize,
    /// Residual blocks per resolution stage.
    pub res_depth: usize,
    /// Commitment weight `β`.
    pub beta: f64,
    pub ema_decay: f64,
    pub ema_eps: f64,
    pub dead_threshold: f64,
    pub reset_every: usize,
    /// Weight of the first-difference reconstruction term; 0 disables it.
    pub velocity_weight: f64,
    pub zero_init_output: bool,
}

impl TokenizerConfig {
    pub fn toy(input_dim: usize) -> Self {
        Self {
            input_dim,
            width: 64,
            code_dim: 64,
            codebook_size: 64,
            num_quantizers: 3,
            res_depth: 2,
            beta: 0.25,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            dead_threshold: 1.0,
            reset_every: 50,
            velocity_weight: 0.5,
            zero_init_output: false,
        }
    }

    pub fn paper(input_dim: usize) -> Self {
        Self { width: 512, code_dim: 512, codebook_size: 512, num_quantizers: 6, res_depth: 3, ..Self::toy(input_dim) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 || self.num_quantizers == 0 || self.code_dim == 0 || self.width == 0 {
            return Err(Error::Config("tokenizer needs K ≥ 2, V ≥ 1 and non-zero widths".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.beta < 0.0 {
            return Err(Error::Config("ema_decay must lie in [0,1) and beta ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Training window in frames (multiple of 4).
    pub window: usize,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl TokenizerTrainConfig {
    pub fn toy() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            window: 48,
            lr: LrSchedule { base: 1e-3, milestones: vec![1000, 1300], factor: 0.1 },
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 7,
            log_every: 100,
        }
    }

    pub fn paper() -> Self {
        Self {
            steps: 100_000,
            batch_size: 256,
            window: 64,
            lr: LrSchedule { base: 2e-4, milestones: vec![50_000, 80_000], factor: 0.1 },
            ..Self::toy()
        }
    }
}

struct ResBlock {
    conv: Conv1d,
    proj: Conv1d,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, width: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(ps, &format!("{name}.conv"), width, width, 3, 1, dilation, dilation)?,
            proj: Conv1d::new(ps, &format!("{name}.proj"), width, width, 1, 1, 0, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.proj.forward(&self.conv.forward(&x.relu()?)?.relu()?)?;
        Ok((x + h)?)
    }
}

fn res_stack(ps: &mut ParamStore, name: &str, width: usize, depth: usize) -> Result<Vec<ResBlock>> {
    (0..depth).map(|i| ResBlock::new(ps, &format!("{name}.res{i}"), width, 3usize.pow(i as u32))).collect()
}

struct Encoder {
    conv_in: Conv1d,
    stages: Vec<(Conv1d, Vec<ResBlock>)>,
    conv_out: Conv1d,
}

impl Encoder {
    fn new(ps: &mut ParamStore, cfg: &TokenizerConfig) -> Result<Self> {
        let w = cfg.width;
        let conv_in = Conv1d::new(ps, "enc.in", cfg.input_dim, w, 3, 1, 1, 1)?;
        let mut stages = Vec::new();
        for s in 0..2 {
            let down = Conv1d::new(ps, &format!("enc.down{s}"), w, w, 4, 2, 1, 1)?;
            stages.push((down, res_stack(ps, &format!("enc.down{s}"), w, cfg.res_depth)?));
        }
        let conv_out = Conv1d::new(ps, "enc.out", w, cfg.code_dim, 3, 1, 1, 1)?;
        Ok(Self { conv_in, stages, conv_out })
    }

    /// `(B, τ, C)` → `(B, τ/4, d)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?.relu()?;
        for (down, blocks) in &self.stages {
            h = down.forward(&h)?;
            for b in blocks {
                h = b.forward(&h)?;
            }
        }
        self.conv_out.forward(&h)
    }
}

struct Decoder {
    conv_in: Conv1d,
    stages: Vec<(Vec<ResBlock>, Conv1d)>,
    conv_mid: Conv1d,
    conv_out: Conv1d,
}

/// Nearest-neighbour doubling along time of a `(B, T, C)` tensor.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    Ok(x.unsqueeze(2)?.broadcast_as((b, t, 2, c))?.reshape((b, 2 * t, c))?)
}

impl Decoder {
    fn new(ps: &mut ParamStore, cfg: &TokenizerConfig) -> Result<Self> {
        let w = cfg.width;
        let conv_in = Conv1d::new(ps, "dec.in", cfg.code_dim, w, 3, 1, 1, 1)?;
        let mut stages = Vec::new();
        for s in 0..2 {
            let blocks = res_stack(ps, &format!("dec.up{s}"), w, cfg.res_depth)?;
            stages.push((blocks, Conv1d::new(ps, &format!("dec.up{s}.conv"), w, w, 3, 1, 1, 1)?));
        }
        let conv_mid = Conv1d::new(ps, "dec.mid", w, w, 3, 1, 1, 1)?;
        let conv_out = if cfg.zero_init_output {
            Conv1d::zeroed(ps, "dec.out", w, cfg.input_dim, 3, 1)?
        } else {
            Conv1d::new(ps, "dec.out", w, cfg.input_dim, 3, 1, 1, 1)?
        };
        Ok(Self { conv_in, stages, conv_mid, conv_out })
    }

    /// `(B, t, d)` → `(B, 4t, C)`.
    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?.relu()?;
        for (blocks, conv) in &self.stages {
            for b in blocks {
                h = b.forward(&h)?;
            }
            h = conv.forward(&upsample2(&h)?)?;
        }
        let h = self.conv_mid.forward(&h)?.relu()?;
        self.conv_out.forward(&h)
    }
}

/// Differentiable loss terms of one tokenizer step.
pub struct LossTerms {
    pub recon: Tensor,
    pub velocity: Tensor,
    pub commit: Tensor,
    pub total: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TokenizerStepReport {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub velocity: f64,
    pub commit: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub latent_rms: f64,
    pub n_reset: usize,
}

pub struct Tokenizer {
    cfg: TokenizerConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    stack: RvqStack<f64>,
    norm: Option<NormStats>,
    initialized: bool,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(dtype, seed);
        let encoder = Encoder::new(&mut params, &cfg)?;
        let decoder = Decoder::new(&mut params, &cfg)?;
        let (k, d) = (cfg.codebook_size, cfg.code_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let layers = (0..cfg.num_quantizers)
            .map(|_| Codebook::new(k, d, (0..k * d).map(|_| rng.gen_range(-1.0..1.0) / (d as f64).sqrt()).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { stack: RvqStack::new(layers)?, cfg, params, encoder, decoder, norm: None, initialized: false })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn stack(&self) -> &RvqStack<f64> {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut RvqStack<f64> {
        &mut self.stack
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn set_norm(&mut self, norm: NormStats) {
        self.norm = Some(norm);
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// `(B, τ, D)` → `(B, τ/4, d)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let tau = x.dim(1)?;
        if tau % DOWNSAMPLE != 0 || tau == 0 {
            return Err(Error::Invalid(format!("frame count {tau} is not a positive multiple of {DOWNSAMPLE}")));
        }
        self.encoder.forward(x)
    }

    /// `(B, t, d)` → `(B, 4t, D)`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        if z.dim(1)? == 0 {
            return Err(Error::Invalid("latent sequence must have t ≥ 1".into()));
        }
        self.decoder.forward(z)
    }

    fn motion_tensor(&self, motion: &FrameMatrix) -> Result<Tensor> {
        if motion.dim() != self.cfg.input_dim {
            return Err(Error::Dimension(format!("motion dim {} vs tokenizer dim {}", motion.dim(), self.cfg.input_dim)));
        }
        Ok(Tensor::from_slice(motion.data(), (1, motion.num_frames(), motion.dim()), &Device::Cpu)?
            .to_dtype(self.dtype())?)
    }

    /// Latent sequence, flat `t x d`, for a (normalized) motion.
    pub fn encode(&self, motion: &FrameMatrix) -> Result<Vec<f64>> {
        let z = self.encode_tensor(&self.motion_tensor(motion)?)?;
        Ok(z.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    /// Frames (normalized space) for a flat `t x d` latent sequence.
    pub fn decode(&self, latent: &[f64], fps: u32) -> Result<FrameMatrix> {
        let d = self.cfg.code_dim;
        if latent.is_empty() || latent.len() % d != 0 {
            return Err(Error::Dimension(format!("latent of {} values is not t x {d}", latent.len())));
        }
        let t = latent.len() / d;
        let z = Tensor::from_slice(latent, (1, t, d), &Device::Cpu)?.to_dtype(self.dtype())?;
        let x = self.decode_tensor(&z)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        FrameMatrix::new(4 * t, self.cfg.input_dim, x, fps)
    }

    pub fn rvq(&self, motion: &FrameMatrix) -> Result<RvqEncoding<f64>> {
        Ok(rvq_encode(&self.encode(motion)?, &self.stack)?)
    }

    pub fn tokenize(&self, motion: &FrameMatrix) -> Result<TokenGrid> {
        Ok(self.rvq(motion)?.grid)
    }

    /// Decodes the first `upto` quantizer layers of `grid` back to frames.
    pub fn detokenize(&self, grid: &TokenGrid, upto: usize, fps: u32) -> Result<FrameMatrix> {
        let latent = rvq_decode(grid, &self.stack, upto)?;
        self.decode(&latent, fps)
    }

    /// Loss terms for a batch `x: (B, τ, D)` with quantized latents `zq`.
    /// `st_offset` overrides the straight-through offset `sg(zq − z)`; with a
    /// fixed offset the loss becomes an ordinary differentiable function of
    /// the encoder weights, which is what finite-difference checks need.
    pub fn losses(&self, x: &Tensor, zq: &Tensor, st_offset: Option<&Tensor>) -> Result<LossTerms> {
        let z = self.encode_tensor(x)?;
        self.losses_with_latent(x, &z, zq, st_offset)
    }

    /// As [`Tokenizer::losses`] with the encoder output `z` already computed.
    pub fn losses_with_latent(&self, x: &Tensor, z: &Tensor, zq: &Tensor, st_offset: Option<&Tensor>) -> Result<LossTerms> {
        let offset = match st_offset {
            Some(o) => o.clone(),
            None => (zq - z)?.detach(),
        };
        let z_st = (z + offset)?;
        let x_hat = self.decode_tensor(&z_st)?;
        let diff = (&x_hat - x)?;
        let recon = smooth_l1(&diff)?.mean_all()?;
        let tau = x.dim(1)?;
        let velocity = if self.cfg.velocity_weight > 0.0 && tau > 1 {
            let dv = (diff.narrow(1, 1, tau - 1)? - diff.narrow(1, 0, tau - 1)?)?;
            smooth_l1(&dv)?.mean_all()?
        } else {
            Tensor::zeros((), self.dtype(), &Device::Cpu)?
        };
        let commit = ((z - zq.detach())?.sqr()?.mean_all()? * self.cfg.beta)?;
        let total = ((&recon + (&velocity * self.cfg.velocity_weight)?)? + &commit)?;
        Ok(LossTerms { recon, velocity, commit, total })
    }

    /// Quantizes encoder outputs `(B, t, d)` through the stack.
    pub fn quantize_batch(&self, z: &Tensor) -> Result<(Tensor, RvqEncoding<f64>)> {
        let dims = z.dims().to_vec();
        let flat: Vec<f64> = z.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let enc = rvq_encode(&flat, &self.stack)?;
        let approx = rvq_decode(&enc.grid, &self.stack, self.stack.num_layers())?;
        let zq = Tensor::from_vec(approx, dims, &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok((zq, enc))
    }

    /// Seeds each layer's codes with random residual vectors of a batch.
    fn init_codebooks(&mut self, flat: &[f64], rng: &mut ChaCha8Rng) -> Result<()> {
        let (k, d) = (self.cfg.codebook_size, self.cfg.code_dim);
        let n = flat.len() / d;
        let mut residual = flat.to_vec();
        for v in 0..self.stack.num_layers() {
            let mut codes = Vec::with_capacity(k * d);
            for _ in 0..k {
                let i = rng.gen_range(0..n);
                codes.extend_from_slice(&residual[i * d..(i + 1) * d]);
            }
            let cb = Codebook::with_state(k, d, codes.clone(), vec![1.0; k], codes)?;
            for i in 0..n {
                let (_, c) = cb.nearest(&residual[i * d..(i + 1) * d])?;
                let c = c.to_vec();
                for (r, c) in residual[i * d..(i + 1) * d].iter_mut().zip(c) {
                    *r -= c;
                }
            }
            *self.stack.layer_mut(v) = cb;
        }
        self.initialized = true;
        Ok(())
    }

    fn codebook_maintenance(&mut self, enc: &RvqEncoding<f64>, step: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        let mut n_reset = 0;
        for v in 0..self.stack.num_layers() {
            let assign: Vec<usize> = enc.grid.row(v).iter().map(|&i| i as usize).collect();
            let inputs = &enc.layer_inputs[v];
            ema_update(self.stack.layer_mut(v), &assign, inputs, self.cfg.ema_decay, self.cfg.ema_eps)?;
            if self.cfg.reset_every > 0 && (step + 1) % self.cfg.reset_every == 0 {
                n_reset += reset_dead_codes(self.stack.layer_mut(v), inputs, self.cfg.dead_threshold, rng)?;
            }
        }
        Ok(n_reset)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::json!({ "tokenizer": self.cfg, "norm": self.norm });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, config);
        self.params.write_into(&mut ck)?;
        let (k, d) = (self.cfg.codebook_size, self.cfg.code_dim);
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        for (v, cb) in self.stack.layers().iter().enumerate() {
            ck.insert(&format!("rvq.{v}.codes"), vec![k, d], f(cb.codes()));
            ck.insert(&format!("rvq.{v}.cluster_size"), vec![k], f(cb.ema_cluster_size()));
            ck.insert(&format!("rvq.{v}.embed_sum"), vec![k, d], f(cb.ema_embed_sum()));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let cfg: TokenizerConfig = serde_json::from_value(ck.config["tokenizer"].clone())?;
        let norm: Option<NormStats> = serde_json::from_value(ck.config["norm"].clone())?;
        let mut tok = Self::new(cfg, 0, DType::F32)?;
        tok.params.read_from(ck)?;
        let (k, d) = (tok.cfg.codebook_size, tok.cfg.code_dim);
        let g = |name: String| -> Result<Vec<f64>> { Ok(ck.tensor(&name)?.1.iter().map(|&x| x as f64).collect()) };
        for v in 0..tok.cfg.num_quantizers {
            let cb = Codebook::with_state(
                k,
                d,
                g(format!("rvq.{v}.codes"))?,
                g(format!("rvq.{v}.cluster_size"))?,
                g(format!("rvq.{v}.embed_sum"))?,
            )?;
            *tok.stack.layer_mut(v) = cb;
        }
        tok.norm = norm;
        tok.initialized = true;
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Random fixed-length windows from normalized, 4-aligned motions.
pub fn sample_windows(
    motions: &[&FrameMatrix],
    batch: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let dim = motions.first().ok_or_else(|| Error::Invalid("no training motions".into()))?.dim();
    let mut data = Vec::with_capacity(batch * window * dim);
    for _ in 0..batch {
        let m = motions.choose(rng).expect("nonempty");
        let n = m.num_frames();
        let start = if n > window { rng.gen_range(0..=n - window) } else { 0 };
        for i in 0..window {
            data.extend_from_slice(m.frame((start + i).min(n - 1)));
        }
    }
    Ok(Tensor::from_vec(data, (batch, window, dim), &Device::Cpu)?)
}

/// Trains the tokenizer on normalized records; `on_step` sees every report.
pub fn train_tokenizer(
    tok: &mut Tokenizer,
    records: &[MotionRecord],
    cfg: &TokenizerTrainConfig,
    mut on_step: impl FnMut(&TokenizerStepReport),
) -> Result<Vec<TokenizerStepReport>> {
    if records.is_empty() {
        return Err(Error::Invalid("tokenizer training needs at least one record".into()));
    }
    if cfg.window % DOWNSAMPLE != 0 || cfg.window == 0 {
        return Err(Error::Config(format!("window {} must be a positive multiple of {DOWNSAMPLE}", cfg.window)));
    }
    cfg.lr.validate()?;
    let motions: Vec<&FrameMatrix> = records.iter().map(|r| &r.motion).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vars = tok.params.vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW { lr: cfg.lr.at(0), weight_decay: cfg.weight_decay, ..Default::default() },
    )?;
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x = sample_windows(&motions, cfg.batch_size, cfg.window, &mut rng)?.to_dtype(tok.dtype())?;
        if !tok.initialized {
            let z = tok.encode_tensor(&x)?;
            let flat: Vec<f64> = z.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            tok.init_codebooks(&flat, &mut rng)?;
        }
        let z = tok.encode_tensor(&x)?;
        let (zq, enc) = tok.quantize_batch(&z)?;
        let terms = tok.losses_with_latent(&x, &z, &zq, None)?;
        let loss = terms.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("tokenizer loss {loss}") });
        }
        let lr = cfg.lr.at(step);
        opt.set_learning_rate(lr);
        let mut grads = terms.total.backward()?;
        let grad_norm = clip_grad_norm(&mut grads, &vars, cfg.grad_clip)?;
        let latent_rms = z.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.sqrt();
        opt.step(&grads)?;
        let n_reset = tok.codebook_maintenance(&enc, step, &mut rng)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let report = TokenizerStepReport {
            step,
            loss,
            recon: scalar(&terms.recon)?,
            velocity: scalar(&terms.velocity)?,
            commit: scalar(&terms.commit)?,
            lr,
            grad_norm,
            latent_rms,
            n_reset,
        };
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!(
                "tokenizer step {step}: loss {:.4} recon {:.4} commit {:.4} reset {n_reset}",
                report.loss,
                report.recon,
                report.commit
            );
        }
        on_step(&report);
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TokenizerConfig {
        TokenizerConfig { width: 8, code_dim: 4, codebook_size: 4, num_quantizers: 2, res_depth: 1, ..TokenizerConfig::toy(3) }
    }

    #[test]
    fn length_contract() {
        let tok = Tokenizer::new(tiny(), 1, DType::F32).unwrap();
        for (tau, t) in [(16, 4), (196, 49)] {
            let m = FrameMatrix::new(tau, 3, vec![0.1; tau * 3], 20).unwrap();
            let z = tok.encode(&m).unwrap();
            assert_eq!(z.len(), t * 4);
            let back = tok.decode(&z, 20).unwrap();
            assert_eq!(back.num_frames(), tau);
        }
        let odd = FrameMatrix::new(18, 3, vec![0.0; 54], 20).unwrap();
        assert!(tok.encode(&odd).is_err());
    }

    #[test]
    fn zero_input_with_zero_output_layer_is_finite() {
        let cfg = TokenizerConfig { zero_init_output: true, ..tiny() };
        let tok = Tokenizer::new(cfg, 1, DType::F32).unwrap();
        let m = FrameMatrix::new(8, 3, vec![0.0; 24], 20).unwrap();
        let z = tok.encode(&m).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
        let out = tok.decode(&z, 20).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_zero_drops_commitment() {
        let cfg = TokenizerConfig { beta: 0.0, ..tiny() };
        let tok = Tokenizer::new(cfg, 3, DType::F64).unwrap();
        let x = Tensor::from_vec((0..48).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), (2, 8, 3), &Device::Cpu).unwrap();
        let z = tok.encode_tensor(&x).unwrap();
        let (zq, _) = tok.quantize_batch(&z).unwrap();
        let terms = tok.losses(&x, &zq, None).unwrap();
        let total = terms.total.to_scalar::<f64>().unwrap();
        let r = terms.recon.to_scalar::<f64>().unwrap() + 0.5 * terms.velocity.to_scalar::<f64>().unwrap();
        assert_eq!(terms.commit.to_scalar::<f64>().unwrap(), 0.0);
        assert!((total - r).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_preserves_tokens() {
        let mut tok = Tokenizer::new(tiny(), 5, DType::F32).unwrap();
        tok.set_norm(NormStats { mean: vec![0.0; 3], std: vec![1.0; 3] });
        let m = FrameMatrix::new(16, 3, (0..48).map(|i| (i as f32 * 0.1).cos()).collect(), 20).unwrap();
        let grid = tok.tokenize(&m).unwrap();
        let back = Tokenizer::from_checkpoint(&tok.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.tokenize(&m).unwrap(), grid);
        assert_eq!(back.norm(), tok.norm());
    }
}
