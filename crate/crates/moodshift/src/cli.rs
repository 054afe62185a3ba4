//! Command-line front end. Precedence for every setting: flag, then
//! environment variable (where one exists), then `--config` file, then default.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use moodshift_core::attention::{AttentionConfig, AttentionKind, AttentionSite};
use moodshift_core::cam::{grad_cam, CamLayer};
use moodshift_core::labels::{make_chunks, ChunkingConfig};
use moodshift_core::loss::DistillationConfig;
use moodshift_core::models::{Architecture, FusionSpec, ModelConfig};
use moodshift_core::synth::SyntheticDatasetSpec;
use moodshift_core::train::{HyperGrid, Hyperparams, TrainOptions};
use moodshift_core::MoodClass;
use serde::Serialize;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::{AppError, Result};
use crate::ingest::{apply_mood_mapping, frame_path, load_annotations, read_json, write_json, write_synthetic};
use crate::manifest::write_jsonl;
use crate::render::render_cam;
use crate::report::{compare_runs, evaluate_run, load_fold_models};
use crate::runs::{load_dataset, train_run, DatasetPaths, RunManifest, TrainRequest};

#[derive(Debug, Parser)]
#[command(name = "moodshift", version, about = "Mood and mood-shift classification from short video clips")]
pub struct Cli {
    /// TOML pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (annotations, PNG frames, spec).
    Synth(SynthArgs),
    /// Cut annotated videos into labelled chunks and write the chunk manifest.
    Prepare(PrepareArgs),
    /// Cross-validated training over a hyperparameter grid.
    Train(Box<TrainArgs>),
    /// Re-score a training run at chunk and video level.
    Eval(EvalArgs),
    /// Grad-CAM overlays for one held-out chunk.
    Explain(ExplainArgs),
    /// Two-sample t-test between the fold accuracies of two runs.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Videos per subject.
    #[arg(long)]
    pub videos_per_subject: Option<usize>,
    /// Frames per video.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Largest per-frame valence step of the random walk.
    #[arg(long)]
    pub walk_step: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Standard deviation of per-pixel noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Hue rotation in degrees, for a shifted external domain.
    #[arg(long)]
    pub hue_shift: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct DatasetArgs {
    /// Dataset directory holding annotations.json, frames/ and chunks.jsonl.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Chunk manifest (JSON lines).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Frames per chunk (default 5).
    #[arg(long)]
    pub window: Option<usize>,
    /// Step between chunk starts (default 1).
    #[arg(long)]
    pub stride: Option<usize>,
    /// JSON object mapping `mood_category` strings to -1, 0 or 1.
    #[arg(long)]
    pub mood_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// `1cnn`, `2cnn`, `2cnn-mlp` or `tsnet`.
    #[arg(long)]
    pub arch: Option<String>,
    /// `none`, `spatial`, `temporal`, `sst` or `pst`.
    #[arg(long)]
    pub attention: Option<String>,
    /// PST only: multiply the spatial and temporal gated inputs.
    #[arg(long)]
    pub literal_product: bool,
    /// `input` or `after_first_conv`.
    #[arg(long)]
    pub site: Option<String>,
    #[arg(long)]
    pub lstm_hidden: Option<usize>,
    #[arg(long)]
    pub dense_units: Option<usize>,
    /// `HxW`, e.g. `32x32`.
    #[arg(long)]
    pub frame_size: Option<String>,
    #[arg(long)]
    pub window: Option<usize>,
    /// `full` (every grid point) or `single`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Comma-separated; replaces the preset's axis.
    #[arg(long = "lr", value_delimiter = ',')]
    pub learning_rates: Vec<f64>,
    #[arg(long = "batch", value_delimiter = ',')]
    pub batch_sizes: Vec<usize>,
    #[arg(long = "dropout", value_delimiter = ',')]
    pub dropout_rates: Vec<f64>,
    #[arg(long = "temperature", value_delimiter = ',')]
    pub temperatures: Vec<f64>,
    #[arg(long = "alpha", value_delimiter = ',')]
    pub alphas: Vec<f64>,
    /// Scale the distillation term by T².
    #[arg(long)]
    pub t_squared: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without improvement in training loss before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Subject-independent folds (default 5).
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "MOODSHIFT_OUTPUT_ROOT")]
    pub output_root: Option<PathBuf>,
    #[arg(long, env = "MOODSHIFT_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory (or its run_manifest.json).
    #[arg(long)]
    pub run: PathBuf,
    /// Grid point tag; defaults to the selected best.
    #[arg(long)]
    pub grid_point: Option<String>,
    /// Dataset directory for cross-dataset evaluation.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Output directory (default `<run>/eval`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write accuracy and confusion-matrix PNGs.
    #[arg(long)]
    pub plots: bool,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub grid_point: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Position of the chunk among the fold's held-out chunks.
    #[arg(long, default_value_t = 0)]
    pub chunk: usize,
    /// -1, 0 or 1; defaults to the predicted class.
    #[arg(long, allow_hyphen_values = true)]
    pub target: Option<i8>,
    /// input, conv1, conv2 or conv3; defaults to the deepest map with spatial extent.
    #[arg(long)]
    pub layer: Option<String>,
    /// Output directory (default `<run>/explain/fold<k>_<video>_<start>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Integer upscaling of the overlay PNGs.
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    #[arg(long)]
    pub grid_point_a: Option<String>,
    #[arg(long)]
    pub grid_point_b: Option<String>,
    /// Also write the comparison JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{}", e.message);
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load_opt(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(&cfg, a),
        Command::Prepare(a) => prepare(&cfg, a),
        Command::Train(a) => train(&cfg, *a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a),
        Command::Compare(a) => compare(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synth(cfg: &PipelineConfig, a: SynthArgs) -> Result<()> {
    let mut spec = cfg.dataset.synthetic.clone().unwrap_or(SyntheticDatasetSpec {
        num_subjects: 5,
        videos_per_subject: 4,
        frames_per_video: 40,
        valence_walk_step: 2,
        seed: cfg.seed.unwrap_or(0),
        frame_height: 32,
        frame_width: 32,
        pixel_noise: 0.05,
        hue_shift: 0.0,
    });
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut spec.num_subjects, a.subjects);
    set(&mut spec.videos_per_subject, a.videos_per_subject);
    set(&mut spec.frames_per_video, a.frames);
    set(&mut spec.frame_height, a.height);
    set(&mut spec.frame_width, a.width);
    spec.valence_walk_step = a.walk_step.unwrap_or(spec.valence_walk_step);
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.pixel_noise = a.noise.unwrap_or(spec.pixel_noise);
    spec.hue_shift = a.hue_shift.unwrap_or(spec.hue_shift);
    spec.validate()?;
    let out = a
        .out
        .or_else(|| cfg.dataset.dir.clone())
        .ok_or_else(|| AppError::config("synth needs --out or dataset.dir"))?;
    let tracks = write_synthetic(&out, &spec)?;
    print_json(&json!({
        "out": out,
        "videos": tracks.len(),
        "frames": tracks.iter().map(|t| t.len()).sum::<usize>(),
        "seed": spec.seed,
    }))
}

fn dataset_paths(cfg: &PipelineConfig, a: &DatasetArgs) -> Result<DatasetPaths> {
    let dir = a.dataset.clone().or_else(|| cfg.dataset.dir.clone());
    let pick = |flag: &Option<PathBuf>, conf: &Option<PathBuf>, name: &str| {
        flag.clone()
            .or_else(|| conf.clone())
            .or_else(|| dir.as_ref().map(|d| d.join(name)))
            .ok_or_else(|| AppError::config(format!("no dataset given: pass --dataset DIR or the path to {name}")))
    };
    Ok(DatasetPaths {
        annotations: pick(&a.annotations, &cfg.dataset.annotations, crate::ingest::ANNOTATIONS_FILE)?,
        frames: pick(&a.frames, &cfg.dataset.frames, crate::ingest::FRAMES_DIR)?,
        manifest: pick(&a.manifest, &cfg.dataset.manifest, crate::manifest::CHUNKS_FILE)?,
    })
}

fn prepare(cfg: &PipelineConfig, a: PrepareArgs) -> Result<()> {
    let paths = dataset_paths(cfg, &a.data)?;
    let base = cfg.chunking.unwrap_or_default();
    let chunking = ChunkingConfig {
        window_k: a.window.unwrap_or(base.window_k),
        stride: a.stride.unwrap_or(base.stride),
    };
    chunking.validate()?;
    let mood_map = a.mood_map.or_else(|| cfg.dataset.mood_map.clone());
    let table: Option<BTreeMap<String, MoodClass>> = mood_map.as_deref().map(read_json).transpose()?;
    let (file, tracks) = load_annotations(&paths.annotations)?;
    if !paths.frames.is_dir() {
        return Err(AppError::data(format!("frames directory {} does not exist", paths.frames.display())));
    }
    for t in &tracks {
        let missing: Vec<usize> = (0..t.len())
            .filter(|&i| !frame_path(&paths.frames, t.video_id(), i).is_file())
            .collect();
        if !missing.is_empty() {
            return Err(AppError::data(format!(
                "video {} is missing {} frame files (first index {})",
                t.video_id(),
                missing.len(),
                missing[0]
            )));
        }
    }
    let mut chunks = Vec::new();
    let mut skipped = Vec::new();
    for t in &tracks {
        let out = make_chunks(t, &chunking)?;
        if let Some(d) = out.diagnostic {
            log::warn!("{d}");
            skipped.push(t.video_id().to_string());
        }
        chunks.extend(out.chunks);
    }
    if let Some(table) = &table {
        apply_mood_mapping(&mut chunks, &file, table)?;
    }
    write_jsonl(&paths.manifest, &chunks)?;
    print_json(&json!({
        "manifest": paths.manifest,
        "chunks": chunks.len(),
        "videos": tracks.len(),
        "skipped_videos": skipped,
        "window_k": chunking.window_k,
        "stride": chunking.stride,
    }))
}

fn parse_frame_size(s: &str) -> Result<[usize; 2]> {
    let bad = || AppError::config(format!("frame size `{s}` is not of the form HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h = h.trim().parse().map_err(|_| bad())?;
    let w = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok([h, w])
}

fn parse_site(s: &str) -> Result<AttentionSite> {
    match s {
        "input" => Ok(AttentionSite::Input),
        "after_first_conv" | "after-first-conv" | "conv1" => Ok(AttentionSite::AfterFirstConv),
        other => Err(AppError::config(format!(
            "unknown attention site `{other}` (expected input or after_first_conv)"
        ))),
    }
}

/// Everything `train` resolves before touching the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub model: ModelConfig,
    pub grid: HyperGrid,
    pub options: TrainOptions,
    pub folds: usize,
    pub seed: u64,
    pub window: usize,
    pub frame_size: [usize; 2],
    pub output_root: PathBuf,
    pub threads: Option<usize>,
}

pub fn resolve_train(cfg: &PipelineConfig, a: &TrainArgs) -> Result<TrainPlan> {
    let m = &cfg.model;
    let arch: Architecture = a
        .arch
        .as_deref()
        .or(m.architecture.as_deref())
        .unwrap_or("1cnn")
        .parse()?;
    let kind: AttentionKind = a.attention.as_deref().or(m.attention.as_deref()).unwrap_or("none").parse()?;
    let mut att = AttentionConfig::of(kind);
    att.literal_product = a.literal_product || m.literal_product.unwrap_or(false);
    if att.literal_product && kind != AttentionKind::Pst {
        return Err(AppError::config("--literal-product only applies to pst attention"));
    }
    if let Some(s) = a.site.as_deref().or(m.site.as_deref()) {
        att.site = parse_site(s)?;
    }
    if let Some(h) = a.lstm_hidden.or(m.lstm_hidden) {
        att.lstm_hidden = h;
    }
    let frame_size = match &a.frame_size {
        Some(s) => parse_frame_size(s)?,
        None => m.frame_size.unwrap_or([32, 32]),
    };
    let window = a
        .window
        .or(cfg.chunking.map(|c| c.window_k))
        .unwrap_or(ChunkingConfig::default().window_k);
    let mut model = ModelConfig::new(arch, att);
    model.branch.input_shape = [window, frame_size[0], frame_size[1], 3];
    if let Some(u) = a.dense_units.or(m.dense_units) {
        model.branch.dense_units = u;
    }
    model.fusion = FusionSpec::for_branch(&model.branch);
    model.validate()?;

    let g = &cfg.grid;
    let preset = a.grid.as_deref().or(g.preset.as_deref()).unwrap_or("full");
    let t_squared = a.t_squared || g.t_squared.unwrap_or(false);
    let mut grid = match preset {
        "full" => HyperGrid::full(arch),
        "single" => {
            let mut h = Hyperparams::default();
            if arch == Architecture::TsNet {
                h.batch_size = 16;
                h.distillation = Some(DistillationConfig {
                    temperature: 3.0,
                    alpha: 0.05,
                    t_squared,
                });
            }
            HyperGrid::singleton(&h)
        }
        other => return Err(AppError::config(format!("unknown grid preset `{other}` (expected full or single)"))),
    };
    fn axis<T: Clone>(dst: &mut Vec<T>, flag: &[T], conf: &Option<Vec<T>>) {
        if !flag.is_empty() {
            *dst = flag.to_vec();
        } else if let Some(c) = conf {
            *dst = c.clone();
        }
    }
    axis(&mut grid.learning_rates, &a.learning_rates, &g.learning_rates);
    axis(&mut grid.batch_sizes, &a.batch_sizes, &g.batch_sizes);
    axis(&mut grid.dropout_rates, &a.dropout_rates, &g.dropout_rates);
    axis(&mut grid.temperatures, &a.temperatures, &g.temperatures);
    axis(&mut grid.alphas, &a.alphas, &g.alphas);
    grid.validate(arch)?;
    if arch == Architecture::TsNet {
        model.distillation = Some(DistillationConfig {
            temperature: grid.temperatures[0],
            alpha: grid.alphas[0],
            t_squared,
        });
    }

    let defaults = TrainOptions::default();
    let options = TrainOptions {
        epochs: a.epochs.or(cfg.train.epochs).unwrap_or(defaults.epochs),
        patience: a.patience.or(cfg.train.patience).unwrap_or(defaults.patience),
        eval_batch: defaults.eval_batch,
    };
    if options.epochs == 0 {
        return Err(AppError::config("epochs must be at least 1"));
    }
    let folds = a.folds.or(cfg.train.folds).unwrap_or(5);
    if folds < 2 {
        return Err(AppError::config("at least 2 folds are needed"));
    }
    Ok(TrainPlan {
        model,
        grid,
        options,
        folds,
        seed: a.seed.or(cfg.seed).unwrap_or(0),
        window,
        frame_size,
        output_root: a
            .output_root
            .clone()
            .or_else(|| cfg.output_root.clone())
            .unwrap_or_else(|| PathBuf::from("runs")),
        threads: a.threads.or(cfg.threads),
    })
}

fn train(cfg: &PipelineConfig, a: TrainArgs) -> Result<()> {
    let plan = resolve_train(cfg, &a)?;
    let paths = dataset_paths(cfg, &a.data)?;
    let data = load_dataset(&paths, plan.window, (plan.frame_size[0], plan.frame_size[1]))?;
    log::info!("{} chunks from {} subjects", data.len(), data.subjects().len());
    let req = TrainRequest {
        model: plan.model,
        data: &data,
        dataset: paths,
        window: plan.window,
        frame_size: plan.frame_size,
        grid: plan.grid,
        folds: plan.folds,
        seed: plan.seed,
        options: plan.options,
        output_root: plan.output_root,
        threads: plan.threads,
    };
    let (manifest, dir) = train_run(&req)?;
    print_json(&json!({
        "run": dir,
        "best_grid_point": manifest.best_grid_point,
        "records": manifest.records.iter().map(|r| json!({
            "grid_point": r.hyper.tag(),
            "fold_accuracies": r.fold_accuracies,
            "mean": r.mean,
            "std": r.std,
        })).collect::<Vec<_>>(),
    }))
}

fn run_root(run: &Path) -> PathBuf {
    if run.is_dir() {
        run.to_path_buf()
    } else {
        run.parent().map_or_else(PathBuf::new, Path::to_path_buf)
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| run_root(&a.run).join("eval"));
    let external = a.external.as_deref().map(DatasetPaths::in_dir);
    let report = evaluate_run(&a.run, a.grid_point.as_deref(), external.as_ref(), &out, a.plots)?;
    print_json(&json!({
        "report": out.join("report.json"),
        "grid_point": report.grid_point,
        "chunk_accuracy": report.chunk.accuracy,
        "video_accuracy": report.video.accuracy,
        "chunk_mean": report.chunk_mean,
        "chunk_std": report.chunk_std,
        "video_mean": report.video_mean,
        "video_std": report.video_std,
        "external": report.external.as_ref().map(|x| json!({
            "chunk_mean": x.chunk_mean,
            "video_mean": x.video_mean,
        })),
    }))
}

fn explain(a: ExplainArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.run)?;
    let root = run_root(&a.run);
    if a.fold >= manifest.fold_plan.folds {
        return Err(AppError::config(format!(
            "fold {} out of range (run has {})",
            a.fold, manifest.fold_plan.folds
        )));
    }
    let layer = a.layer.as_deref().map(str::parse::<CamLayer>).transpose()?;
    let target = a
        .target
        .map(|v| MoodClass::from_value(v).ok_or_else(|| AppError::config(format!("target {v} is not -1, 0 or 1"))))
        .transpose()?;
    let tag = manifest.record(a.grid_point.as_deref())?.hyper.tag();
    let data = load_dataset(
        &manifest.dataset,
        manifest.window,
        (manifest.frame_size[0], manifest.frame_size[1]),
    )?;
    let (_, test) = manifest.fold_plan.split(&data, a.fold)?;
    let &idx = test.get(a.chunk).ok_or_else(|| {
        AppError::config(format!("fold {} has {} held-out chunks; --chunk {} is out of range", a.fold, test.len(), a.chunk))
    })?;
    let models = load_fold_models(&root, &manifest, &tag)?;
    let net = &models[a.fold].network;
    let clip = data.clip(idx);
    let probs = net.predict(&clip)?;
    let predicted = moodshift_core::models::argmax_class(&probs);
    let target = target.unwrap_or(predicted);
    let layer = layer.unwrap_or_else(|| CamLayer::default_for(net));
    let cam = grad_cam(net, &clip, target, layer)?;
    let chunk = data.chunk(idx);
    let out = a.out.unwrap_or_else(|| {
        root.join("explain")
            .join(format!("fold{}_{}_{}", a.fold, chunk.video_id, chunk.start_frame))
    });
    let frames = render_cam(&cam, &clip, &out, a.scale)?;
    let summary = json!({
        "video_id": chunk.video_id,
        "start_frame": chunk.start_frame,
        "truth": chunk.mood_label,
        "predicted": predicted,
        "probabilities": probs,
        "target": target,
        "layer": layer.tag(),
        "zero_map": cam.zero_map,
        "frames": frames,
    });
    write_json(&out.join("cam.json"), &summary)?;
    print_json(&summary)
}

fn compare(a: CompareArgs) -> Result<()> {
    let c = compare_runs(&a.run_a, a.grid_point_a.as_deref(), &a.run_b, a.grid_point_b.as_deref())?;
    if let Some(out) = &a.out {
        write_json(out, &c)?;
    }
    print_json(&c)
}
