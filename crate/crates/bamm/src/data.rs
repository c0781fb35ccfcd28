//! Synthetic skeletal motion: generation, normalization and JSON-Lines IO.
//!
//! A frame holds `2·J` planar joint coordinates relative to the root followed
//! by the 2-D root velocity, so the default five-joint skeleton has `D = 12`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 5;
pub const FEATURE_DIM: usize = 2 * NUM_JOINTS + 2;
pub const DEFAULT_FPS: u32 = 20;
/// Frames per motion token.
pub const DOWNSAMPLE: usize = 4;
pub const MIN_FRAMES: usize = 4;
const STD_FLOOR: f32 = 1e-6;

/// `τ x D` motion matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
    pub fps: u32,
}

impl FrameMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>, fps: u32) -> Result<Self> {
        if frames < MIN_FRAMES {
            return Err(Error::Invalid(format!("motion needs at least {MIN_FRAMES} frames, got {frames}")));
        }
        if dim == 0 || data.len() != frames * dim {
            return Err(Error::Dimension(format!("{} values for {frames} frames of dim {dim}", data.len())));
        }
        if fps == 0 {
            return Err(Error::Invalid("fps must be positive".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("motion contains non-finite values".into()));
        }
        Ok(Self { frames, dim, data, fps })
    }

    pub fn from_rows(rows: &[Vec<f32>], fps: u32) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Dimension(format!("frame {i} has {} features, expected {dim}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data, fps)
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f32>> {
        self.data.chunks(self.dim).map(<[f32]>::to_vec).collect()
    }

    /// Frames `range` as a new matrix.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let range = range.start.min(self.frames)..range.end.min(self.frames);
        Self::new(range.len(), self.dim, self.data[range.start * self.dim..range.end * self.dim].to_vec(), self.fps)
    }

    /// Pads by repeating the last frame (or truncates, if padding would exceed
    /// `max_frames`) so the frame count is a multiple of `factor`.
    pub fn align_to(&self, factor: usize, max_frames: usize) -> Self {
        let up = self.frames.div_ceil(factor) * factor;
        let target = if up <= max_frames { up } else { (self.frames.min(max_frames) / factor) * factor };
        let mut data = Vec::with_capacity(target * self.dim);
        for i in 0..target {
            data.extend_from_slice(self.frame(i.min(self.frames - 1)));
        }
        Self { frames: target, dim: self.dim, data, fps: self.fps }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionRecord {
    pub id: String,
    pub label: u32,
    pub motion: FrameMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    CircleWalk,
    Jump,
    Wave,
    Spin,
    WalkThenJump,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 5] = [
        MotionFamily::CircleWalk,
        MotionFamily::Jump,
        MotionFamily::Wave,
        MotionFamily::Spin,
        MotionFamily::WalkThenJump,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MotionFamily::CircleWalk => "circle_walk",
            MotionFamily::Jump => "jump",
            MotionFamily::Wave => "wave",
            MotionFamily::Spin => "spin",
            MotionFamily::WalkThenJump => "walk_then_jump",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Uniform { min: usize, max: usize },
    /// Equiprobable modes, each jittered uniformly by `±jitter` frames.
    Modes { modes: Vec<usize>, jitter: usize },
}

impl LengthDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match self {
            LengthDist::Uniform { min, max } => rng.gen_range(*min..=*max),
            LengthDist::Modes { modes, jitter } => {
                let m = modes[rng.gen_range(0..modes.len())];
                let j = *jitter as i64;
                (m as i64 + rng.gen_range(-j..=j)).max(1) as usize
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: MotionFamily,
    pub label: u32,
    pub count: usize,
    pub lengths: LengthDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub families: Vec<FamilySpec>,
    /// Inclusive frame-count bounds applied to every drawn length.
    pub length_range: (usize, usize),
    /// Amplitude of the additive low-pass noise.
    pub noise: f32,
    #[serde(default = "default_fps")]
    pub fps: u32,
    pub seed: u64,
}

fn default_fps() -> u32 {
    DEFAULT_FPS
}

impl GeneratorSpec {
    /// Five labelled families; `walk_then_jump` is bimodal in length
    /// (48 or 160 frames).
    pub fn standard(per_family: usize, seed: u64) -> Self {
        let lengths = |f: MotionFamily| match f {
            MotionFamily::CircleWalk => LengthDist::Uniform { min: 96, max: 104 },
            MotionFamily::Jump => LengthDist::Uniform { min: 52, max: 60 },
            MotionFamily::Wave => LengthDist::Uniform { min: 72, max: 80 },
            MotionFamily::Spin => LengthDist::Uniform { min: 84, max: 92 },
            MotionFamily::WalkThenJump => LengthDist::Modes { modes: vec![48, 160], jitter: 2 },
        };
        Self {
            families: MotionFamily::ALL
                .iter()
                .enumerate()
                .map(|(i, &f)| FamilySpec { family: f, label: i as u32, count: per_family, lengths: lengths(f) })
                .collect(),
            length_range: (8, 200),
            noise: 0.02,
            fps: DEFAULT_FPS,
            seed,
        }
    }

    pub fn label_names(&self) -> Vec<String> {
        let max = self.families.iter().map(|f| f.label as usize + 1).max().unwrap_or(0);
        let mut names = vec![String::new(); max];
        for f in &self.families {
            names[f.label as usize] = f.family.name().to_string();
        }
        names
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Generates a labelled dataset; identical specs give bit-identical output.
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<Vec<MotionRecord>> {
    if spec.families.is_empty() {
        return Err(Error::Config("generator needs at least one motion family".into()));
    }
    let (lo, hi) = spec.length_range;
    if lo < 8 || hi > 400 || lo > hi {
        return Err(Error::Config(format!("length range {lo}..={hi} must lie within [8, 400]")));
    }
    let mut records = Vec::new();
    for (fi, fam) in spec.families.iter().enumerate() {
        for idx in 0..fam.count {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((fi as u64) << 32) | idx as u64);
            let frames = fam.lengths.sample(&mut rng).clamp(lo, hi);
            let motion = synthesize(fam.family, frames, spec.noise, spec.fps, &mut rng)?;
            records.push(MotionRecord { id: format!("{}-{idx:04}", fam.family.name()), label: fam.label, motion });
        }
    }
    Ok(records)
}

struct Pose {
    joints: [(f32, f32); NUM_JOINTS],
    vel: (f32, f32),
}

impl Pose {
    fn standing() -> Self {
        Self { joints: [(0.0, 0.6), (-0.25, 0.0), (0.25, 0.0), (-0.12, -0.9), (0.12, -0.9)], vel: (0.0, 0.0) }
    }

    fn write(&self, out: &mut Vec<f32>) {
        for (x, y) in self.joints {
            out.push(x);
            out.push(y);
        }
        out.push(self.vel.0);
        out.push(self.vel.1);
    }
}

const HEAD: usize = 0;
const L_HAND: usize = 1;
const R_HAND: usize = 2;
const L_FOOT: usize = 3;
const R_FOOT: usize = 4;

fn gait(pose: &mut Pose, phase: f32, stride: f32) {
    let s = phase.sin();
    pose.joints[L_FOOT] = (-0.12 + stride * s, -0.9 + 0.08 * s.max(0.0));
    pose.joints[R_FOOT] = (0.12 - stride * s, -0.9 + 0.08 * (-s).max(0.0));
    pose.joints[L_HAND] = (-0.25 - 0.6 * stride * s, 0.0);
    pose.joints[R_HAND] = (0.25 + 0.6 * stride * s, 0.0);
}

/// Jump profile over normalized progress `s ∈ [0, 1]`: crouch, flight, land.
fn jump(pose: &mut Pose, s: f32, height: f32, frames: f32) {
    let crouch = if s < 0.3 { (s / 0.3 * std::f32::consts::PI).sin() * 0.2 } else { 0.0 };
    let flight = if (0.3..0.8).contains(&s) { ((s - 0.3) / 0.5 * std::f32::consts::PI).sin() } else { 0.0 };
    let dflight = if (0.3..0.8).contains(&s) {
        ((s - 0.3) / 0.5 * std::f32::consts::PI).cos() * std::f32::consts::PI / 0.5 / frames
    } else {
        0.0
    };
    pose.joints[HEAD].1 = 0.6 - crouch;
    pose.joints[L_HAND] = (-0.25, 0.5 * flight - crouch);
    pose.joints[R_HAND] = (0.25, 0.5 * flight - crouch);
    pose.joints[L_FOOT].1 = -0.9 + crouch * 0.5 + 0.3 * flight;
    pose.joints[R_FOOT].1 = -0.9 + crouch * 0.5 + 0.3 * flight;
    pose.vel.1 = height * dflight * 10.0;
}

fn synthesize(family: MotionFamily, frames: usize, noise: f32, fps: u32, rng: &mut ChaCha8Rng) -> Result<FrameMatrix> {
    use std::f32::consts::TAU;
    let speed = rng.gen_range(0.8f32..1.2);
    let amp = rng.gen_range(0.8f32..1.2);
    let phase0 = rng.gen_range(0.0f32..TAU);
    let freq = rng.gen_range(0.9f32..1.1);
    let dt = 1.0 / fps as f32;
    let mut data = Vec::with_capacity(frames * FEATURE_DIM);
    for i in 0..frames {
        let time = i as f32 * dt;
        let s = i as f32 / (frames.max(2) - 1) as f32;
        let mut pose = Pose::standing();
        match family {
            MotionFamily::CircleWalk => {
                let heading = phase0 + 0.8 * speed * time;
                gait(&mut pose, TAU * 1.5 * freq * time, 0.2 * amp);
                pose.vel = (speed * heading.cos(), speed * heading.sin());
            }
            MotionFamily::Jump => jump(&mut pose, s, amp, frames as f32),
            MotionFamily::Wave => {
                let w = (TAU * 2.0 * freq * time + phase0).sin();
                pose.joints[R_HAND] = (0.35 + 0.15 * amp * w, 0.55);
            }
            MotionFamily::Spin => {
                let a = phase0 + TAU * 0.7 * speed * time;
                pose.joints[L_HAND] = (-0.5 * a.cos(), 0.2 + 0.1 * a.sin());
                pose.joints[R_HAND] = (0.5 * a.cos(), 0.2 - 0.1 * a.sin());
                pose.joints[HEAD].0 = 0.05 * a.sin();
            }
            MotionFamily::WalkThenJump => {
                let jump_frames = 24usize.min(frames);
                let walk_frames = frames - jump_frames;
                if i < walk_frames {
                    gait(&mut pose, TAU * 1.5 * freq * time, 0.2 * amp);
                    pose.vel = (speed, 0.0);
                } else {
                    let js = (i - walk_frames) as f32 / (jump_frames.max(2) - 1) as f32;
                    jump(&mut pose, js, amp, jump_frames as f32);
                    pose.vel.0 = 0.5 * speed * (1.0 - js);
                }
            }
        }
        pose.write(&mut data);
    }
    add_filtered_noise(&mut data, frames, noise, rng);
    FrameMatrix::new(frames, FEATURE_DIM, data, fps)
}

fn add_filtered_noise(data: &mut [f32], frames: usize, amplitude: f32, rng: &mut ChaCha8Rng) {
    if amplitude == 0.0 {
        return;
    }
    const WIDTH: usize = 5;
    for j in 0..FEATURE_DIM {
        let white: Vec<f32> = (0..frames + WIDTH).map(|_| Distribution::<f32>::sample(&StandardNormal, rng)).collect();
        for i in 0..frames {
            let avg: f32 = white[i..i + WIDTH].iter().sum::<f32>() / WIDTH as f32;
            data[i * FEATURE_DIM + j] += amplitude * avg;
        }
    }
}

/// Per-feature mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: NormStats = serde_json::from_str(&text)?;
        if stats.mean.len() != stats.std.len() || stats.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Invalid(format!("{}: malformed normalization stats", path.display())));
        }
        Ok(stats)
    }
}

pub fn compute_norm_stats(records: &[MotionRecord]) -> Result<NormStats> {
    let first = records.first().ok_or_else(|| Error::Invalid("cannot compute stats of an empty dataset".into()))?;
    let dim = first.motion.dim();
    let mut sum = vec![0f64; dim];
    let mut sq = vec![0f64; dim];
    let mut n = 0usize;
    for r in records {
        if r.motion.dim() != dim {
            return Err(Error::Dimension(format!("record {} has dim {}, expected {dim}", r.id, r.motion.dim())));
        }
        for frame in r.motion.data().chunks(dim) {
            for (j, &v) in frame.iter().enumerate() {
                sum[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt() as f32).max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean: mean.into_iter().map(|m| m as f32).collect(), std })
}

fn check_dim(motion: &FrameMatrix, stats: &NormStats) -> Result<()> {
    if motion.dim() != stats.dim() {
        return Err(Error::Dimension(format!("motion dim {} vs stats dim {}", motion.dim(), stats.dim())));
    }
    Ok(())
}

pub fn normalize(motion: &FrameMatrix, stats: &NormStats) -> Result<FrameMatrix> {
    check_dim(motion, stats)?;
    let d = motion.dim();
    let data = motion.data().iter().enumerate().map(|(i, &v)| (v - stats.mean[i % d]) / stats.std[i % d]).collect();
    FrameMatrix::new(motion.num_frames(), d, data, motion.fps)
}

pub fn denormalize(motion: &FrameMatrix, stats: &NormStats) -> Result<FrameMatrix> {
    check_dim(motion, stats)?;
    let d = motion.dim();
    let data = motion.data().iter().enumerate().map(|(i, &v)| v * stats.std[i % d] + stats.mean[i % d]).collect();
    FrameMatrix::new(motion.num_frames(), d, data, motion.fps)
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    label: u32,
    fps: u32,
    frames: Vec<Vec<f32>>,
}

pub fn save_dataset(records: &[MotionRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = RecordLine { id: r.id.clone(), label: r.label, fps: r.motion.fps, frames: r.motion.rows() };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<MotionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: line_no, message };
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let motion = FrameMatrix::from_rows(&rec.frames, rec.fps).map_err(|e| parse_err(e.to_string()))?;
        match dim {
            None => dim = Some(motion.dim()),
            Some(d) if d != motion.dim() => {
                return Err(parse_err(format!("feature dimension {} differs from {d} in earlier records", motion.dim())))
            }
            _ => {}
        }
        records.push(MotionRecord { id: rec.id, label: rec.label, motion });
    }
    Ok(records)
}
