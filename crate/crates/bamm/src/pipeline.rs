//! Preset bundles and the data preparation shared by the CLI and tests.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{compute_norm_stats, normalize, MotionRecord, DOWNSAMPLE, FEATURE_DIM};
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::tokenizer::{train_tokenizer, Tokenizer, TokenizerConfig, TokenizerStepReport, TokenizerTrainConfig};
use crate::trainer::{GridRecord, TokenRecord, TrainConfig};
use crate::transformer::{RefinerConfig, TransformerConfig};

pub const PRESETS: [&str; 3] = ["toy", "humanml3d-paper", "kit-paper"];

/// Every configurable knob of a training/inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TokenizerTrainConfig,
    /// `codebook_size` and `num_labels` are overwritten from the tokenizer
    /// and the label vocabulary when models are built.
    pub transformer: TransformerConfig,
    pub train: TrainConfig,
    pub refiner_train: TrainConfig,
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let toy = Self {
            tokenizer: TokenizerConfig::toy(FEATURE_DIM),
            tokenizer_train: TokenizerTrainConfig::toy(),
            transformer: TransformerConfig::toy(64, 1),
            train: TrainConfig::toy(),
            refiner_train: TrainConfig { steps: 3_000, lr: crate::schedule::LrSchedule { base: 2e-4, milestones: vec![2_000], factor: 0.1 }, ..TrainConfig::toy() },
            decode: DecodeConfig::toy(),
        };
        let paper = |decode: DecodeConfig| Self {
            tokenizer: TokenizerConfig::paper(FEATURE_DIM),
            tokenizer_train: TokenizerTrainConfig::paper(),
            transformer: TransformerConfig::paper(512, 1),
            train: TrainConfig::paper(),
            refiner_train: TrainConfig { batch_size: 64, ..TrainConfig::paper() },
            decode,
        };
        match name {
            "toy" => Ok(toy),
            "humanml3d-paper" => Ok(paper(DecodeConfig::humanml3d_paper())),
            "kit-paper" => Ok(paper(DecodeConfig::kit_paper())),
            other => Err(Error::Config(format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", ")))),
        }
    }

    /// Applies a (possibly partial) JSON document on top of this config;
    /// objects merge recursively, anything else replaces.
    pub fn merged(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overrides);
        serde_json::from_value(base).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    /// Overrides the seeds of every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.tokenizer_train.seed = seed;
        self.train.seed = seed;
        self.refiner_train.seed = seed;
        self.decode.seed = seed;
        self
    }

    pub fn transformer_for(&self, codebook_size: usize, num_labels: usize) -> TransformerConfig {
        TransformerConfig { codebook_size, num_labels, ..self.transformer.clone() }
    }

    pub fn refiner_for(&self, codebook_size: usize, num_labels: usize, num_quantizers: usize) -> RefinerConfig {
        RefinerConfig { base: self.transformer_for(codebook_size, num_labels), num_quantizers, use_condition: true }
    }
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Normalizes with the tokenizer's stats and pads/truncates each motion to a
/// whole number of tokens, at most `max_tokens`.
pub fn prepare_motions(tok: &Tokenizer, records: &[MotionRecord], max_tokens: usize) -> Result<Vec<MotionRecord>> {
    let norm = tok.norm().ok_or_else(|| Error::Config("tokenizer has no normalization stats".into()))?;
    records
        .iter()
        .map(|r| {
            let motion = normalize(&r.motion, norm)?.align_to(DOWNSAMPLE, max_tokens * DOWNSAMPLE);
            Ok(MotionRecord { motion, ..r.clone() })
        })
        .collect()
}

/// Computes normalization stats on `records` and trains a fresh tokenizer.
pub fn fit_tokenizer(
    records: &[MotionRecord],
    cfg: &RunConfig,
    max_tokens: usize,
    on_step: impl FnMut(&TokenizerStepReport),
) -> Result<Tokenizer> {
    let mut tok = Tokenizer::new(cfg.tokenizer.clone(), cfg.tokenizer_train.seed, DType::F32)?;
    tok.set_norm(compute_norm_stats(records)?);
    let motions = prepare_motions(&tok, records, max_tokens)?;
    train_tokenizer(&mut tok, &motions, &cfg.tokenizer_train, on_step)?;
    Ok(tok)
}

/// Base-layer tokens and full grids for prepared motions.
pub fn tokenize_all(tok: &Tokenizer, motions: &[MotionRecord]) -> Result<(Vec<TokenRecord>, Vec<GridRecord>)> {
    let mut tokens = Vec::with_capacity(motions.len());
    let mut grids = Vec::with_capacity(motions.len());
    for r in motions {
        let grid = tok.tokenize(&r.motion)?;
        tokens.push(TokenRecord { label: r.label, tokens: grid.row(0).to_vec() });
        grids.push(GridRecord { label: r.label, grid });
    }
    Ok((tokens, grids))
}

/// Deterministic split: every `every`-th record is held out.
pub fn holdout_split<T: Clone>(items: &[T], every: usize) -> (Vec<T>, Vec<T>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, x) in items.iter().enumerate() {
        if every > 0 && i % every == every - 1 {
            held.push(x.clone());
        } else {
            train.push(x.clone());
        }
    }
    (train, held)
}
