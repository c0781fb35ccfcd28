//! Codebooks and residual vector quantization.
//!
//! Vectors are passed as flat row-major slices: a sequence of `t` vectors of
//! dimension `d` is a slice of length `t * d`.

use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{CoreError, Result};

/// `K` code vectors of dimension `d` plus their EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    size: usize,
    dim: usize,
    codes: Vec<T>,
    ema_cluster_size: Vec<T>,
    ema_embed_sum: Vec<T>,
}

impl<T: Float> Codebook<T> {
    /// Creates a codebook whose EMA state is consistent with `codes`
    /// (unit cluster sizes, sums equal to the codes).
    pub fn new(size: usize, dim: usize, codes: Vec<T>) -> Result<Self> {
        if size < 2 {
            return Err(CoreError::InvalidParameter("codebook needs at least two codes"));
        }
        if codes.len() != size * dim {
            return Err(CoreError::ShapeMismatch { what: "codebook", expected: size * dim, got: codes.len() });
        }
        if codes.iter().any(|c| !c.is_finite()) {
            return Err(CoreError::NonFinite("codebook"));
        }
        Ok(Self {
            size,
            dim,
            ema_embed_sum: codes.clone(),
            ema_cluster_size: alloc::vec![T::one(); size],
            codes,
        })
    }

    /// Restores a codebook together with explicit EMA state.
    pub fn with_state(
        size: usize,
        dim: usize,
        codes: Vec<T>,
        ema_cluster_size: Vec<T>,
        ema_embed_sum: Vec<T>,
    ) -> Result<Self> {
        let mut cb = Self::new(size, dim, codes)?;
        if ema_cluster_size.len() != size {
            return Err(CoreError::ShapeMismatch { what: "ema cluster size", expected: size, got: ema_cluster_size.len() });
        }
        if ema_embed_sum.len() != size * dim {
            return Err(CoreError::ShapeMismatch { what: "ema embed sum", expected: size * dim, got: ema_embed_sum.len() });
        }
        if ema_cluster_size.iter().any(|&c| c < T::zero()) {
            return Err(CoreError::InvalidParameter("ema cluster sizes must be non-negative"));
        }
        cb.ema_cluster_size = ema_cluster_size;
        cb.ema_embed_sum = ema_embed_sum;
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn code(&self, k: usize) -> &[T] {
        &self.codes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn codes(&self) -> &[T] {
        &self.codes
    }

    pub fn ema_cluster_size(&self) -> &[T] {
        &self.ema_cluster_size
    }

    pub fn ema_embed_sum(&self) -> &[T] {
        &self.ema_embed_sum
    }

    /// Returns `(id, code)` of the nearest code in squared Euclidean distance.
    /// Ties go to the smallest id.
    pub fn nearest(&self, z: &[T]) -> Result<(usize, &[T])> {
        quantize_nearest(z, self)
    }
}

fn sq_dist<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Nearest-code search; ties are broken by the smallest index.
pub fn quantize_nearest<'a, T: Float>(z: &[T], cb: &'a Codebook<T>) -> Result<(usize, &'a [T])> {
    if z.len() != cb.dim {
        return Err(CoreError::ShapeMismatch { what: "latent vector", expected: cb.dim, got: z.len() });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("latent vector"));
    }
    let mut best = 0;
    let mut best_dist = T::infinity();
    for k in 0..cb.size {
        let d = sq_dist(z, cb.code(k));
        if d < best_dist {
            best = k;
            best_dist = d;
        }
    }
    Ok((best, cb.code(best)))
}

/// `V x t` matrix of code ids; row 0 is the base layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenGrid {
    layers: usize,
    len: usize,
    ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(layers: usize, len: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != layers * len {
            return Err(CoreError::ShapeMismatch { what: "token grid", expected: layers * len, got: ids.len() });
        }
        Ok(Self { layers, len, ids })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            if r.len() != len {
                return Err(CoreError::ShapeMismatch { what: "token grid row", expected: len, got: r.len() });
            }
            ids.extend_from_slice(r);
        }
        Ok(Self { layers: rows.len(), len, ids })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Number of token positions `t`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, layer: usize) -> &[u32] {
        &self.ids[layer * self.len..(layer + 1) * self.len]
    }

    pub fn row_mut(&mut self, layer: usize) -> &mut [u32] {
        &mut self.ids[layer * self.len..(layer + 1) * self.len]
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        (0..self.layers).map(|v| self.row(v).to_vec()).collect()
    }

    /// Keeps only the first `layers` rows.
    pub fn truncated(&self, layers: usize) -> Self {
        let layers = layers.min(self.layers);
        Self { layers, len: self.len, ids: self.ids[..layers * self.len].to_vec() }
    }

    /// Concatenates grids along the time axis.
    pub fn concat(parts: &[TokenGrid]) -> Result<Self> {
        let layers = parts.first().map_or(0, |g| g.layers);
        let mut rows: Vec<Vec<u32>> = alloc::vec![Vec::new(); layers];
        for g in parts {
            if g.layers != layers {
                return Err(CoreError::ShapeMismatch { what: "grid layers", expected: layers, got: g.layers });
            }
            for (v, row) in rows.iter_mut().enumerate() {
                row.extend_from_slice(g.row(v));
            }
        }
        Self::from_rows(&rows)
    }
}

/// Stack of same-shaped codebooks; each layer quantizes the residual left by
/// the layers below it.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqStack<T> {
    layers: Vec<Codebook<T>>,
}

impl<T: Float> RvqStack<T> {
    pub fn new(layers: Vec<Codebook<T>>) -> Result<Self> {
        let first = layers.first().ok_or(CoreError::Empty("rvq layers"))?;
        let (k, d) = (first.size, first.dim);
        for cb in &layers {
            if cb.size != k {
                return Err(CoreError::ShapeMismatch { what: "codebook size", expected: k, got: cb.size });
            }
            if cb.dim != d {
                return Err(CoreError::ShapeMismatch { what: "codebook dim", expected: d, got: cb.dim });
            }
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.layers[0].size
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim
    }

    pub fn layer(&self, v: usize) -> &Codebook<T> {
        &self.layers[v]
    }

    pub fn layer_mut(&mut self, v: usize) -> &mut Codebook<T> {
        &mut self.layers[v]
    }

    pub fn layers(&self) -> &[Codebook<T>] {
        &self.layers
    }
}

/// Result of greedy residual quantization of a latent sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqEncoding<T> {
    pub grid: TokenGrid,
    /// Per-layer residual norm after that layer, `mean_i ‖r_{v+1, i}‖`.
    pub residual_norms: Vec<T>,
    /// Final residual `z - Σ_v code_v`, flat `t x d`.
    pub residual: Vec<T>,
    /// Per-layer residual vectors entering each layer, flat `t x d` each
    /// (`inputs[0] == z`). Needed for EMA updates of the upper layers.
    pub layer_inputs: Vec<Vec<T>>,
}

/// Greedy residual quantization: `r_0 = z`, `id_v = nearest(r_v)`,
/// `r_{v+1} = r_v - code(id_v)`.
pub fn rvq_encode<T: Float>(z: &[T], stack: &RvqStack<T>) -> Result<RvqEncoding<T>> {
    let d = stack.dim();
    if z.len() % d != 0 {
        return Err(CoreError::ShapeMismatch { what: "latent sequence (multiple of dim)", expected: d, got: z.len() % d });
    }
    let t = z.len() / d;
    let v_count = stack.num_layers();
    let mut ids = Vec::with_capacity(v_count * t);
    let mut residual = z.to_vec();
    let mut residual_norms = Vec::with_capacity(v_count);
    let mut layer_inputs = Vec::with_capacity(v_count);
    for cb in &stack.layers {
        layer_inputs.push(residual.clone());
        let mut norm_sum = T::zero();
        for i in 0..t {
            let r = &mut residual[i * d..(i + 1) * d];
            let (id, code) = quantize_nearest(r, cb)?;
            ids.push(id as u32);
            for (x, &c) in r.iter_mut().zip(code) {
                *x = *x - c;
            }
            norm_sum = norm_sum + r.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
        }
        let denom = T::from(t.max(1)).unwrap();
        residual_norms.push(norm_sum / denom);
    }
    Ok(RvqEncoding { grid: TokenGrid::new(v_count, t, ids)?, residual_norms, residual, layer_inputs })
}

/// Sum of the selected code vectors over layers `[0, upto_layer)`.
pub fn rvq_decode<T: Float>(grid: &TokenGrid, stack: &RvqStack<T>, upto_layer: usize) -> Result<Vec<T>> {
    if upto_layer > stack.num_layers() || upto_layer > grid.layers {
        return Err(CoreError::OutOfRange {
            what: "decode layer count",
            index: upto_layer,
            bound: stack.num_layers().min(grid.layers),
        });
    }
    let d = stack.dim();
    let mut out = alloc::vec![T::zero(); grid.len * d];
    for v in 0..upto_layer {
        let cb = &stack.layers[v];
        for (i, &id) in grid.row(v).iter().enumerate() {
            let id = id as usize;
            if id >= cb.size {
                return Err(CoreError::OutOfRange { what: "code id", index: id, bound: cb.size });
            }
            for (o, &c) in out[i * d..(i + 1) * d].iter_mut().zip(cb.code(id)) {
                *o = *o + c;
            }
        }
    }
    Ok(out)
}

/// EMA codebook update.
///
/// `size' = decay·size + (1-decay)·count`,
/// `sum' = decay·sum + (1-decay)·Σ assigned`,
/// `code = sum' / ((size'_k + eps) / (n + K·eps) · n)` with `n = Σ size'`.
pub fn ema_update<T: Float>(
    cb: &mut Codebook<T>,
    assignments: &[usize],
    vectors: &[T],
    decay: T,
    eps: T,
) -> Result<()> {
    let d = cb.dim;
    if vectors.len() != assignments.len() * d {
        return Err(CoreError::ShapeMismatch { what: "assigned vectors", expected: assignments.len() * d, got: vectors.len() });
    }
    if !(decay >= T::zero() && decay < T::one()) {
        return Err(CoreError::InvalidParameter("decay must lie in [0, 1)"));
    }
    let mut counts = alloc::vec![T::zero(); cb.size];
    let mut sums = alloc::vec![T::zero(); cb.size * d];
    for (i, &k) in assignments.iter().enumerate() {
        if k >= cb.size {
            return Err(CoreError::OutOfRange { what: "code id", index: k, bound: cb.size });
        }
        counts[k] = counts[k] + T::one();
        for (s, &x) in sums[k * d..(k + 1) * d].iter_mut().zip(&vectors[i * d..(i + 1) * d]) {
            *s = *s + x;
        }
    }
    let keep = T::one() - decay;
    for (s, c) in cb.ema_cluster_size.iter_mut().zip(&counts) {
        *s = decay * *s + keep * *c;
    }
    for (s, x) in cb.ema_embed_sum.iter_mut().zip(&sums) {
        *s = decay * *s + keep * *x;
    }
    let n = cb.ema_cluster_size.iter().fold(T::zero(), |a, &s| a + s);
    let k_eps = T::from(cb.size).unwrap() * eps;
    for k in 0..cb.size {
        let smoothed = (cb.ema_cluster_size[k] + eps) / (n + k_eps) * n;
        if smoothed > T::zero() {
            for j in 0..d {
                cb.codes[k * d + j] = cb.ema_embed_sum[k * d + j] / smoothed;
            }
        }
    }
    Ok(())
}

/// Re-initializes codes whose EMA cluster size fell below `threshold` with
/// randomly drawn rows of `outputs` (sampling with replacement). Returns the
/// number of codes reset.
pub fn reset_dead_codes<T: Float, R: Rng + ?Sized>(
    cb: &mut Codebook<T>,
    outputs: &[T],
    threshold: T,
    rng: &mut R,
) -> Result<usize> {
    let d = cb.dim;
    if outputs.len() % d != 0 {
        return Err(CoreError::ShapeMismatch { what: "encoder outputs (multiple of dim)", expected: d, got: outputs.len() % d });
    }
    let n_out = outputs.len() / d;
    let dead: Vec<usize> = (0..cb.size).filter(|&k| cb.ema_cluster_size[k] < threshold).collect();
    if dead.is_empty() {
        return Ok(0);
    }
    if n_out == 0 {
        return Err(CoreError::Empty("encoder outputs"));
    }
    for &k in &dead {
        let src = rng.gen_range(0..n_out);
        let row = &outputs[src * d..(src + 1) * d];
        cb.codes[k * d..(k + 1) * d].copy_from_slice(row);
        cb.ema_embed_sum[k * d..(k + 1) * d].copy_from_slice(row);
        cb.ema_cluster_size[k] = T::one();
    }
    Ok(dead.len())
}

/// Fraction of codes in `[0, k)` that appear at least once in `ids`.
pub fn utilization(ids: &[u32], k: usize) -> f64 {
    let mut used = alloc::vec![false; k];
    for &id in ids {
        if (id as usize) < k {
            used[id as usize] = true;
        }
    }
    used.iter().filter(|&&u| u).count() as f64 / k as f64
}
