use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bamm::data::{generate_dataset, load_dataset, save_dataset, FrameMatrix, GeneratorSpec, DEFAULT_FPS, DOWNSAMPLE};
use bamm::decoder::{generate, load_labels, save_labels, DecodeConfig, ModelStack, Strategy};
use bamm::editor::{edit, generate_long, EditRequest, EditSource, EditTask, StoryScript};
use bamm::eval::{ablation_sweep, evaluate, write_sweep_csv, EvalOptions};
use bamm::pipeline::{fit_tokenizer, prepare_motions, tokenize_all, RunConfig};
use bamm::service::{serve, ServiceState};
use bamm::tokenizer::Tokenizer;
use bamm::trainer::{train_main, train_refiner, TrainOutputs};
use bamm::transformer::{MainTransformer, Refiner};
use bamm::{Error, Result};
use candle_core::DType;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "bamm", version, about = "Motion tokenizer, masked transformer and cascaded generation")]
struct Cli {
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file overriding preset values (same layout as the preset dump).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    /// Directory holding tokenizer.ckpt, transformer.ckpt, refiner.ckpt and labels.json.
    #[arg(long, global = true, env = "BAMM_CHECKPOINT_DIR", default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    #[value(name = "humanml3d-paper")]
    Humanml3dPaper,
    #[value(name = "kit-paper")]
    KitPaper,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Humanml3dPaper => "humanml3d-paper",
            Preset::KitPaper => "kit-paper",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled motion dataset (JSON Lines).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_family: usize,
        /// Generator spec JSON; defaults to the five standard families.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train the motion tokenizer and store it with the label vocabulary.
    TrainTokenizer {
        #[arg(long)]
        data: PathBuf,
        /// Label names JSON; defaults to labels.json next to the data.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the masked transformer on tokenized data.
    TrainTransformer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the residual refiner on tokenized data.
    TrainRefiner {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate a motion for a label.
    Generate {
        #[arg(long)]
        label: u32,
        /// Fixed length in frames (a multiple of 4); predicted when absent.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_iterations: Option<u8>,
        /// Story script JSON for long multi-segment synthesis.
        #[arg(long, conflicts_with_all = ["length"])]
        story: Option<PathBuf>,
    },
    /// Edit an existing motion file.
    Edit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        label: u32,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Frame span `start:end` (half-open) for the custom task; repeatable.
        #[arg(long = "span", value_parser = parse_span)]
        spans: Vec<(usize, usize)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the trained stack on a held-out dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        length_samples: usize,
        #[arg(long, default_value_t = 100)]
        edit_trials: usize,
    },
    /// Sweep decode configurations and write a CSV table.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON array of decode configs; defaults to strategies × iteration counts.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = 4)]
        max_concurrent: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Inpaint,
    Outpaint,
    Prefix,
    Suffix,
    Custom,
}

impl From<TaskArg> for EditTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Inpaint => EditTask::Inpaint,
            TaskArg::Outpaint => EditTask::Outpaint,
            TaskArg::Prefix => EditTask::Prefix,
            TaskArg::Suffix => EditTask::Suffix,
            TaskArg::Custom => EditTask::Custom,
        }
    }
}

fn parse_span(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected start:end")?;
    let a = a.trim().parse().map_err(|e| format!("bad start: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("bad end: {e}"))?;
    Ok((a, b))
}

/// Motion file written by `generate`/`edit` and read by `edit`.
#[derive(Serialize, Deserialize)]
struct MotionFile {
    label: u32,
    fps: u32,
    frames: Vec<Vec<f32>>,
    #[serde(default)]
    tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace: Option<serde_json::Value>,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::Invalid(format!("{}: {e}", dir.display()))),
        None => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::Invalid(format!("{}: {e}", path.display()))
        }
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(cli.preset.name())?;
    if let Some(path) = &cli.config {
        cfg = cfg.merged(&read_json::<serde_json::Value>(path)?)?;
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn default_grid(base: &DecodeConfig) -> Vec<DecodeConfig> {
    let strategies = [
        Strategy::LowConfidence { fraction: 0.5 },
        Strategy::ConfidenceBelow { threshold: 0.5 },
        Strategy::Suffix,
        Strategy::EveryOther,
    ];
    let mut grid = Vec::new();
    for n in 1..=3u8 {
        for s in strategies {
            grid.push(DecodeConfig { strategy: s, n_iterations: n, ..base.clone() });
        }
    }
    grid
}

fn run(cli: Cli) -> Result<()> {
    let cfg = run_config(&cli)?;
    let dir = cli.checkpoint_dir.clone();
    let [tok_path, main_path, refiner_path, labels_path] = ModelStack::paths(&dir);
    match cli.command {
        Command::SynthData { out, per_family, spec } => {
            let mut spec = match spec {
                Some(p) => GeneratorSpec::load(&p)?,
                None => GeneratorSpec::standard(per_family, 7),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let records = generate_dataset(&spec)?;
            ensure_parent(&out)?;
            save_dataset(&records, &out)?;
            save_labels(&out.with_file_name("labels.json"), &spec.label_names())?;
            println!("wrote {} motions to {}", records.len(), out.display());
        }
        Command::TrainTokenizer { data, labels, steps } => {
            let records = load_dataset(&data)?;
            let labels = load_labels(&labels.unwrap_or_else(|| data.with_file_name("labels.json")))?;
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.tokenizer_train.steps = s;
            }
            let max_tokens = cfg.transformer.max_tokens();
            let tok = fit_tokenizer(&records, &cfg, max_tokens, |r| {
                if r.step % cfg.tokenizer_train.log_every.max(1) == 0 {
                    log::info!("tokenizer step {}: loss {:.4} recon {:.4}", r.step, r.loss, r.recon);
                }
            })?;
            fs::create_dir_all(&dir).map_err(|e| Error::Invalid(format!("{}: {e}", dir.display())))?;
            tok.save(&tok_path)?;
            save_labels(&labels_path, &labels)?;
            println!("tokenizer saved to {}", tok_path.display());
        }
        Command::TrainTransformer { data, steps } => {
            let tok = Tokenizer::load(&tok_path)?;
            let labels = load_labels(&labels_path)?;
            let mut tc = cfg.train.clone();
            if let Some(s) = steps {
                tc.steps = s;
            }
            let mcfg = cfg.transformer_for(tok.config().codebook_size, labels.len());
            let motions = prepare_motions(&tok, &load_dataset(&data)?, mcfg.max_tokens())?;
            let (tokens, _) = tokenize_all(&tok, &motions)?;
            let model = MainTransformer::new(mcfg, tc.seed, DType::F32)?;
            let outputs = TrainOutputs { checkpoint: Some(main_path.clone()), metrics: Some(dir.join("transformer_metrics.jsonl")) };
            let hist = train_main(&model, &tokens, &tc, &outputs, |_| {})?;
            model.save(&main_path)?;
            println!("transformer saved to {} after {} steps", main_path.display(), hist.len());
        }
        Command::TrainRefiner { data, steps } => {
            let tok = Tokenizer::load(&tok_path)?;
            let labels = load_labels(&labels_path)?;
            let mut tc = cfg.refiner_train.clone();
            if let Some(s) = steps {
                tc.steps = s;
            }
            let rcfg = cfg.refiner_for(tok.config().codebook_size, labels.len(), tok.config().num_quantizers);
            let motions = prepare_motions(&tok, &load_dataset(&data)?, rcfg.base.max_tokens())?;
            let (_, grids) = tokenize_all(&tok, &motions)?;
            let refiner = Refiner::new(rcfg, tc.seed, DType::F32)?;
            let outputs = TrainOutputs { checkpoint: Some(refiner_path.clone()), metrics: Some(dir.join("refiner_metrics.jsonl")) };
            train_refiner(&refiner, &grids, &tc, &outputs, |_| {})?;
            refiner.save(&refiner_path)?;
            println!("refiner saved to {}", refiner_path.display());
        }
        Command::Generate { label, length, out, n_iterations, story } => {
            let stack = ModelStack::load(&dir)?;
            let mut dc = cfg.decode.clone();
            if let Some(n) = n_iterations {
                dc.n_iterations = n;
            }
            if let Some(story) = story {
                let script: StoryScript = read_json(&story)?;
                let long = generate_long(&stack, &script, &dc)?;
                write_json(&out, &MotionFile { label, fps: DEFAULT_FPS, frames: long.frames.rows(), tokens: long.grid.row(0).to_vec(), trace: None })?;
                println!("wrote {} frames to {}", long.frames.num_frames(), out.display());
                return Ok(());
            }
            let tokens = match length {
                Some(f) if f == 0 || f % DOWNSAMPLE != 0 => {
                    return Err(Error::Invalid(format!("--length {f} is not a positive multiple of {DOWNSAMPLE} frames")))
                }
                Some(f) => Some(f / DOWNSAMPLE),
                None => None,
            };
            let (frames, trace) = generate(&stack, label, &dc, tokens)?;
            let file = MotionFile {
                label,
                fps: frames.fps,
                frames: frames.rows(),
                tokens: trace.final_grid[0].clone(),
                trace: Some(serde_json::to_value(&trace)?),
            };
            write_json(&out, &file)?;
            println!("wrote {} frames to {}", frames.num_frames(), out.display());
        }
        Command::Edit { input, label, task, spans, out } => {
            let stack = ModelStack::load(&dir)?;
            let src: MotionFile = read_json(&input)?;
            let req = EditRequest {
                source: EditSource::Frames(FrameMatrix::from_rows(&src.frames, src.fps)?),
                label,
                task: task.into(),
                spans: spans.into_iter().map(|(a, b)| a..b).collect(),
                config: cfg.decode.clone(),
            };
            let res = edit(&stack, &req)?;
            let file = MotionFile {
                label,
                fps: res.frames.fps,
                frames: res.frames.rows(),
                tokens: res.grid.row(0).to_vec(),
                trace: Some(serde_json::to_value(&res.trace)?),
            };
            write_json(&out, &file)?;
            println!("edited {} of {} tokens; wrote {}", res.masked.len(), res.grid.len(), out.display());
        }
        Command::Eval { data, out, length_samples, edit_trials } => {
            let stack = ModelStack::load(&dir)?;
            let motions = prepare_motions(&stack.tokenizer, &load_dataset(&data)?, stack.main.config().max_tokens())?;
            let opts = EvalOptions { length_samples, edit_trials, decode: cfg.decode.clone() };
            let report = evaluate(&stack, &motions, &opts)?;
            write_json(&out, &report)?;
            println!("evaluation report written to {}", out.display());
        }
        Command::Sweep { data, out, grid, samples } => {
            let stack = ModelStack::load(&dir)?;
            let motions = prepare_motions(&stack.tokenizer, &load_dataset(&data)?, stack.main.config().max_tokens())?;
            let grid = match grid {
                Some(p) => read_json::<Vec<DecodeConfig>>(&p)?,
                None => default_grid(&cfg.decode),
            };
            let rows = ablation_sweep(&stack, &grid, &motions, samples)?;
            ensure_parent(&out)?;
            let file = fs::File::create(&out).map_err(|e| Error::Invalid(format!("{}: {e}", out.display())))?;
            write_sweep_csv(&rows, file)?;
            println!("{} configurations written to {}", rows.len(), out.display());
        }
        Command::Serve { bind, max_concurrent } => {
            let stack = ModelStack::load(&dir)?;
            let state = ServiceState::new(stack, cfg.decode.clone(), max_concurrent);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Invalid(format!("runtime: {e}")))?;
            rt.block_on(serve(state, &bind)).map_err(|e| Error::Invalid(format!("serve {bind}: {e}")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
