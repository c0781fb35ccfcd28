//! Parameter storage and the small set of layers shared by the tokenizer and
//! the transformers, built on candle tensors with seeded initialization.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Named trainable variables with deterministic initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { vars: BTreeMap::new(), dtype, device: Device::Cpu, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Invalid(format!("parameter `{name}` defined twice")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.add(name, shape, data)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut self.rng)).collect();
        self.add(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for (name, var) in &self.vars {
            let data = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            ckpt.insert(name, var.dims().to_vec(), data);
        }
        Ok(())
    }

    pub fn read_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, var) in &self.vars {
            let (shape, data) = ckpt.tensor(name)?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, model expects {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(data, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    /// Uniform `±1/√in` weights and zero bias.
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let w = ps.uniform(&format!("{name}.weight"), &[output, input], 1.0 / (input as f64).sqrt())?;
        let b = if bias { Some(ps.constant(&format!("{name}.bias"), &[output], 0.0)?) } else { None };
        Ok(Self { w, b })
    }

    pub fn zeroed(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let w = ps.constant(&format!("{name}.weight"), &[output, input], 0.0)?;
        let b = Some(ps.constant(&format!("{name}.bias"), &[output], 0.0)?);
        Ok(Self { w, b })
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("rank ≥ 1");
        let rows = x.elem_count() / input;
        let y = x.reshape((rows, input))?.matmul(&self.w.t()?)?;
        let y = match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank ≥ 1") = self.w.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, n: usize, dim: usize, std: f64) -> Result<Self> {
        Ok(Self { table: ps.normal(&format!("{name}.weight"), &[n, dim], std)? })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        dims.push(self.table.dim(1)?);
        Ok(self.table.index_select(&ids.flatten_all()?, 0)?.reshape(dims)?)
    }
}

#[derive(Clone)]
pub struct Conv1d {
    w: Tensor,
    b: Tensor,
    padding: usize,
    stride: usize,
    dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        let w = ps.uniform(&format!("{name}.weight"), &[cout, cin, kernel], bound)?;
        let b = ps.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Self { w, b, padding, stride, dilation })
    }

    /// Wraps explicit weights `(C_out, C_in, k)` and bias `(C_out)`.
    pub fn from_parts(w: Tensor, b: Tensor, padding: usize, stride: usize, dilation: usize) -> Self {
        Self { w, b, padding, stride, dilation }
    }

    /// Same shape as [`Conv1d::new`] but starting at zero.
    pub fn zeroed(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, padding: usize) -> Result<Self> {
        let w = ps.constant(&format!("{name}.weight"), &[cout, cin, kernel], 0.0)?;
        let b = ps.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Self { w, b, padding, stride: 1, dilation: 1 })
    }

    /// Channels-last convolution: `x` is `(B, T, C_in)`, the result
    /// `(B, T_out, C_out)`. Implemented as unfold + matmul so that every step
    /// is differentiable with the generic tensor ops.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let (cout, cin, k) = self.w.dims3()?;
        if c != cin {
            return Err(Error::Dimension(format!("conv expects {cin} channels, got {c}")));
        }
        let span = self.dilation * (k - 1) + 1;
        let padded = t + 2 * self.padding;
        if padded < span {
            return Err(Error::Dimension(format!("sequence of {t} frames is shorter than the conv span {span}")));
        }
        let t_out = (padded - span) / self.stride + 1;
        // Right padding so every tap can take `t_out * stride` frames.
        let need = (k - 1) * self.dilation + t_out * self.stride;
        let extra = need.saturating_sub(padded);
        let xp = if self.padding + extra > 0 { x.pad_with_zeros(1, self.padding, self.padding + extra)? } else { x.clone() };
        let mut taps = Vec::with_capacity(k);
        for j in 0..k {
            let tap = xp.narrow(1, j * self.dilation, t_out * self.stride)?;
            let tap = if self.stride > 1 {
                tap.reshape((b, t_out, self.stride, c))?.narrow(2, 0, 1)?.squeeze(2)?
            } else {
                tap
            };
            taps.push(tap);
        }
        let cols = Tensor::cat(&taps, 2)?.reshape((b * t_out, k * c))?;
        let w = self.w.permute((2, 1, 0))?.reshape((k * c, cout))?;
        let y = cols.matmul(&w)?.broadcast_add(&self.b)?;
        Ok(y.reshape((b, t_out, cout))?)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            beta: ps.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

struct SoftmaxLastDim;

fn softmax_rows<T: num_traits::Float>(src: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (s, d) in src.chunks(dim).zip(out.chunks_mut(dim)) {
        let m = s.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &x) in d.iter_mut().zip(s) {
            *o = (x - m).exp();
            sum = sum + *o;
        }
        for o in d.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = layout.dims().last().copied().unwrap_or(1);
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax input must be contiguous".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(&v[start..end], dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(&v[start..end], dim)),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad.broadcast_sub(&dot)?)?))
    }
}

/// Softmax over the last dimension, differentiable.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLastDim)?)
}

pub fn log_softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Inverted dropout with an explicit generator; identity when `rng` is `None`.
pub fn dropout(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let Some(rng) = rng else { return Ok(x.clone()) };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.elem_count()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep as f32 }).collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Smooth-L1 (Huber, δ = 1) elementwise: `0.5·min(|d|,1)² + (|d| − min(|d|,1))`.
pub fn smooth_l1(diff: &Tensor) -> Result<Tensor> {
    let a = diff.abs()?;
    let c = a.clamp(0.0, 1.0)?;
    Ok(((c.sqr()? * 0.5)? + (a - c)?)?)
}

/// Sum of squares of all gradients present in `grads` for `vars`.
pub fn clip_grad_norm(grads: &mut candle_core::backprop::GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut total = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = total.sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}
