//! Zero-shot temporal editing and long-sequence synthesis by stitching
//! independently generated segments with generated transitions.

use std::ops::Range;

use bamm_core::corrupt::Condition;
use bamm_core::mask::{edit_mask, EditTask as CoreTask};
use bamm_core::{MaskSplit, TokenGrid, UnmaskedSet};
use serde::{Deserialize, Serialize};

use crate::data::{normalize, FrameMatrix, DOWNSAMPLE};
use crate::decoder::{generate, refine_residuals, repredict, sequence_rng, DecodeConfig, DecodeTrace, ModelStack, PassTrace, RepredictItem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditTask {
    Inpaint,
    Outpaint,
    Prefix,
    Suffix,
    Custom,
}

impl From<EditTask> for CoreTask {
    fn from(t: EditTask) -> Self {
        match t {
            EditTask::Inpaint => CoreTask::Inpaint,
            EditTask::Outpaint => CoreTask::Outpaint,
            EditTask::Prefix => CoreTask::Prefix,
            EditTask::Suffix => CoreTask::Suffix,
            EditTask::Custom => CoreTask::Custom,
        }
    }
}

/// Motion to edit: frames in physical units, or base-layer token ids.
#[derive(Debug, Clone, PartialEq)]
pub enum EditSource {
    Frames(FrameMatrix),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub source: EditSource,
    pub label: u32,
    pub task: EditTask,
    /// Half-open frame ranges, only used by [`EditTask::Custom`].
    pub spans: Vec<Range<usize>>,
    pub config: DecodeConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    pub frames: FrameMatrix,
    pub grid: TokenGrid,
    pub masked: Vec<usize>,
    /// Unmasked motion positions (1-based) with their preserved ids.
    pub preserved: Vec<(usize, u32)>,
    pub trace: DecodeTrace,
}

/// Frame span → 1-based token positions, rounded outward to whole tokens.
pub fn frames_to_tokens(span: &Range<usize>) -> Range<usize> {
    let start = span.start / DOWNSAMPLE;
    let end = span.end.div_ceil(DOWNSAMPLE);
    start + 1..end + 1
}

/// Token positions → the frame range they cover.
pub fn tokens_to_frames(positions: &Range<usize>) -> Range<usize> {
    (positions.start - 1) * DOWNSAMPLE..(positions.end - 1) * DOWNSAMPLE
}

/// Edits a motion: tokenizes it, masks positions per task, re-predicts them
/// under the bidirectional mask (END anchored after the source) and refines
/// residual layers at the masked positions only.
///
/// For frame sources the output keeps the source frame count, and frames
/// covered only by preserved tokens are copied from the source.
pub fn edit(stack: &ModelStack, req: &EditRequest) -> Result<EditOutput> {
    req.config.validate()?;
    stack.label_index(req.label)?;
    let (source_grid, source_frames) = match &req.source {
        EditSource::Frames(f) => {
            let norm = stack.tokenizer.norm().ok_or_else(|| Error::Config("tokenizer has no normalization stats".into()))?;
            let aligned = normalize(f, norm)?.align_to(DOWNSAMPLE, usize::MAX);
            (Some(stack.tokenizer.tokenize(&aligned)?), Some(f))
        }
        EditSource::Tokens(_) => (None, None),
    };
    let base: Vec<u32> = match (&req.source, &source_grid) {
        (EditSource::Tokens(t), _) => t.clone(),
        (_, Some(g)) => g.row(0).to_vec(),
        _ => unreachable!("frame sources are tokenized"),
    };
    let t = base.len();
    let k = stack.main.config().codebook_size as u32;
    if t == 0 || base.iter().any(|&x| x >= k) {
        return Err(Error::Invalid("source tokens must be non-empty codebook ids".into()));
    }
    if t > stack.main.config().max_tokens() {
        return Err(Error::Invalid(format!("source of {t} tokens exceeds the model limit {}", stack.main.config().max_tokens())));
    }
    let spans: Vec<Range<usize>> = req.spans.iter().map(frames_to_tokens).collect();
    if req.task == EditTask::Custom {
        if let Some(bad) = req.spans.iter().zip(&spans).find(|(f, s)| f.start >= f.end || s.end > t + 1) {
            return Err(Error::Invalid(format!("span {:?} lies outside the {}-frame motion", bad.0, t * DOWNSAMPLE)));
        }
    }
    let split = edit_mask(t, req.task.into(), &spans)?;
    let out = repredict_split(stack, &base, req.label, split, &req.config, source_grid.as_ref())?;
    let frames = match source_frames {
        Some(src) => splice_frames(&stack.grid_to_frames(&out.grid)?, src, &out.masked)?,
        None => stack.grid_to_frames(&out.grid)?,
    };
    Ok(EditOutput { frames, ..out })
}

/// Re-predicts `split.masked` in `base` and fills the residual layers.
fn repredict_split(
    stack: &ModelStack,
    base: &[u32],
    label: u32,
    split: MaskSplit,
    cfg: &DecodeConfig,
    source_grid: Option<&TokenGrid>,
) -> Result<EditOutput> {
    let t = base.len();
    let masked = split.masked.clone();
    let mut items = vec![RepredictItem { label: Condition::Label(label), tokens: base.to_vec(), confidences: vec![1.0; t], split }];
    let mut rngs = vec![sequence_rng(cfg.seed, 0)];
    repredict(&stack.main, &mut items, cfg.cfg_s2, cfg.temperature_2, cfg.top_k, &mut rngs)?;
    let tokens = items.remove(0).tokens;
    let preserved: Vec<(usize, u32)> =
        (1..=t).filter(|p| masked.binary_search(p).is_err()).map(|p| (p, tokens[p - 1])).collect();
    if preserved.iter().any(|&(p, id)| base[p - 1] != id) {
        return Err(Error::Invalid("edit altered a preserved token".into()));
    }
    let keep = source_grid.map(|g| vec![(g.clone(), masked.clone())]);
    let grid = refine_residuals(stack.refiner.as_ref(), &[tokens.clone()], &[Condition::Label(label)], cfg.cfg_refine, keep.as_deref())?
        .remove(0);
    let trace = DecodeTrace {
        label,
        length_restricted: true,
        iter1_tokens: base.to_vec(),
        iter1_confidences: vec![1.0; t],
        t,
        cap_hit: false,
        end_suppressed: false,
        passes: vec![PassTrace { masked: masked.clone(), tokens: masked.iter().map(|&p| tokens[p - 1]).collect() }],
        final_grid: grid.rows(),
    };
    Ok(EditOutput { frames: stack.grid_to_frames(&grid)?, grid, masked, preserved, trace })
}

/// Output frames with the source's frame count: frames of masked tokens come
/// from `decoded`, everything else is copied from `source`.
fn splice_frames(decoded: &FrameMatrix, source: &FrameMatrix, masked: &[usize]) -> Result<FrameMatrix> {
    let n = source.num_frames();
    let mut rows = source.rows();
    for &p in masked {
        for f in tokens_to_frames(&(p..p + 1)) {
            if f < n {
                rows[f] = decoded.frame(f).to_vec();
            }
        }
    }
    FrameMatrix::from_rows(&rows, source.fps)
}

/// Which condition drives a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransitionCondition {
    #[default]
    Next,
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorySegment {
    pub label: u32,
    #[serde(default)]
    pub length: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryScript {
    pub segments: Vec<StorySegment>,
    pub transition_tokens: usize,
    #[serde(default)]
    pub transition_condition: TransitionCondition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongOutput {
    pub frames: FrameMatrix,
    pub grid: TokenGrid,
    /// Base-layer tokens of each standalone segment.
    pub segments: Vec<Vec<u32>>,
    /// 1-based positions of transition tokens in the concatenated sequence.
    pub transition_positions: Vec<Range<usize>>,
}

/// Generates each segment independently (segment `k` uses seed `seed + k`),
/// then fills `transition_tokens` new tokens between consecutive segments by
/// editing a window made of the last and first `⌈n/2⌉` tokens around the gap.
pub fn generate_long(stack: &ModelStack, script: &StoryScript, cfg: &DecodeConfig) -> Result<LongOutput> {
    let n = script.segments.len();
    if n < 2 {
        return Err(Error::Invalid("a story needs at least two segments".into()));
    }
    let tt = script.transition_tokens;
    if tt == 0 {
        return Err(Error::Invalid("transition length must be at least one token".into()));
    }
    let h = tt.div_ceil(2);
    if 2 * h + tt > stack.main.config().max_tokens() {
        return Err(Error::Invalid(format!("transition window of {} tokens exceeds the model limit", 2 * h + tt)));
    }
    let mut grids = Vec::with_capacity(n);
    for (k, seg) in script.segments.iter().enumerate() {
        let seg_cfg = DecodeConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
        let (_, trace) = generate(stack, seg.label, &seg_cfg, seg.length)?;
        let grid = TokenGrid::from_rows(&trace.final_grid)?;
        if grid.len() < h {
            return Err(Error::Invalid(format!(
                "segment {k} has {} tokens but the transition needs {h}; request a longer length",
                grid.len()
            )));
        }
        grids.push(grid);
    }
    let layers = grids[0].layers();
    let mut parts: Vec<TokenGrid> = vec![grids[0].clone()];
    let mut transitions = Vec::with_capacity(n - 1);
    let mut offset = grids[0].len();
    for k in 0..n - 1 {
        let (a, b) = (&grids[k], &grids[k + 1]);
        let mut rows = Vec::with_capacity(layers);
        for v in 0..layers {
            let mut row = a.row(v)[a.len() - h..].to_vec();
            let fill = *row.last().expect("h ≥ 1");
            row.extend(std::iter::repeat(fill).take(tt));
            row.extend_from_slice(&b.row(v)[..h]);
            rows.push(row);
        }
        let window = TokenGrid::from_rows(&rows)?;
        let w = window.len();
        let masked: Vec<usize> = (h + 1..=h + tt).collect();
        let split = MaskSplit {
            unmasked: UnmaskedSet::from_indices(std::iter::once(0).chain((1..=w + 1).filter(|p| !masked.contains(p)))),
            masked,
        };
        let label = script.segments[k + 1].label;
        let trans_cfg = DecodeConfig { seed: cfg.seed.wrapping_add((n + k) as u64), ..cfg.clone() };
        let out = match script.transition_condition {
            TransitionCondition::Next => repredict_split(stack, window.row(0), label, split, &trans_cfg, Some(&window))?,
            TransitionCondition::Null => repredict_null(stack, window.row(0), split, &trans_cfg, &window)?,
        };
        let middle: Vec<Vec<u32>> = (0..layers).map(|v| out.grid.row(v)[h..h + tt].to_vec()).collect();
        parts.push(TokenGrid::from_rows(&middle)?);
        transitions.push(offset + 1..offset + tt + 1);
        offset += tt + b.len();
        parts.push(b.clone());
    }
    let grid = TokenGrid::concat(&parts)?;
    Ok(LongOutput {
        frames: stack.grid_to_frames(&grid)?,
        segments: grids.iter().map(|g| g.row(0).to_vec()).collect(),
        grid,
        transition_positions: transitions,
    })
}

fn repredict_null(stack: &ModelStack, base: &[u32], split: MaskSplit, cfg: &DecodeConfig, window: &TokenGrid) -> Result<EditOutput> {
    let masked = split.masked.clone();
    let mut items = vec![RepredictItem { label: Condition::Null, tokens: base.to_vec(), confidences: vec![1.0; base.len()], split }];
    let mut rngs = vec![sequence_rng(cfg.seed, 0)];
    // Guidance against the null condition is meaningless here.
    repredict(&stack.main, &mut items, 0.0, cfg.temperature_2, cfg.top_k, &mut rngs)?;
    let tokens = items.remove(0).tokens;
    let keep = vec![(window.clone(), masked.clone())];
    let grid = refine_residuals(stack.refiner.as_ref(), &[tokens], &[Condition::Null], 0.0, Some(&keep))?.remove(0);
    let trace = DecodeTrace {
        label: 0,
        length_restricted: true,
        iter1_tokens: base.to_vec(),
        iter1_confidences: vec![1.0; base.len()],
        t: base.len(),
        cap_hit: false,
        end_suppressed: false,
        passes: Vec::new(),
        final_grid: grid.rows(),
    };
    Ok(EditOutput { frames: stack.grid_to_frames(&grid)?, grid, masked, preserved: Vec::new(), trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_spans_round_outward() {
        assert_eq!(frames_to_tokens(&(23..42)), 6..12);
        assert_eq!(tokens_to_frames(&(6..12)), 20..44);
        assert_eq!(frames_to_tokens(&(0..4)), 1..2);
        assert_eq!(frames_to_tokens(&(4..5)), 2..3);
    }

    #[test]
    fn task_names_serialize() {
        assert_eq!(serde_json::to_string(&EditTask::Inpaint).unwrap(), "\"inpaint\"");
        let s: StoryScript = serde_json::from_str(r#"{"segments":[{"label":1},{"label":2,"length":10}],"transition_tokens":4}"#).unwrap();
        assert_eq!(s.transition_condition, TransitionCondition::Next);
        assert_eq!(s.segments[1].length, Some(10));
    }
}
