//! Dataset assembly and the on-disk training run layout:
//!
//! ```text
//! <root>/<arch>_<attention>/run_manifest.json
//! <root>/<arch>_<attention>/<gridpoint>/fold<k>/{params.bin, model.json, metrics.json, predictions.jsonl}
//! ```

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use moodshift_core::data::ChunkDataset;
use moodshift_core::labels::LabeledChunk;
use moodshift_core::models::ModelConfig;
use moodshift_core::train::{
    plan_folds, select_best, subject_majorities, train_fold, FoldPlan, FoldResult, HyperGrid, RunRecord, StageReport,
    TrainOptions,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{data_fingerprint, save_model};
use crate::error::{AppError, Result};
use crate::ingest::{load_annotations, load_frames, read_json, write_json};
use crate::manifest::{read_jsonl, write_jsonl, PREDICTIONS_FILE};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Where a dataset lives on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub annotations: PathBuf,
    pub frames: PathBuf,
    pub manifest: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            annotations: dir.join(crate::ingest::ANNOTATIONS_FILE),
            frames: dir.join(crate::ingest::FRAMES_DIR),
            manifest: dir.join(crate::manifest::CHUNKS_FILE),
        }
    }
}

/// Loads the chunk manifest and the frames it refers to, resized to `frame_size = (H, W)`.
pub fn load_dataset(paths: &DatasetPaths, window: usize, frame_size: (usize, usize)) -> Result<ChunkDataset> {
    let (_, tracks) = load_annotations(&paths.annotations)?;
    let chunks: Vec<LabeledChunk> = read_jsonl(&paths.manifest)?;
    let used: std::collections::BTreeSet<&str> = chunks.iter().map(|c| c.video_id.as_str()).collect();
    let tracks: Vec<_> = tracks.into_iter().filter(|t| used.contains(t.video_id())).collect();
    if let Some(c) = chunks.iter().find(|c| !tracks.iter().any(|t| t.video_id() == c.video_id)) {
        return Err(AppError::data(format!("manifest names video {} absent from the annotations", c.video_id)));
    }
    let frames = load_frames(&paths.frames, &tracks, frame_size)?;
    Ok(ChunkDataset::new(frames, chunks, window)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    /// Seconds since the Unix epoch. The only field that differs between reruns.
    pub created_at: u64,
    pub tool_version: String,
}

impl RunMetadata {
    pub fn now() -> Self {
        RunMetadata {
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub architecture: String,
    pub attention: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub grid: HyperGrid,
    pub options: TrainOptions,
    pub window: usize,
    pub frame_size: [usize; 2],
    pub dataset: DatasetPaths,
    pub data_fingerprint: String,
    pub fold_plan: FoldPlan,
    pub records: Vec<RunRecord>,
    pub best: usize,
    pub best_grid_point: String,
    pub metadata: RunMetadata,
}

impl RunManifest {
    pub fn load(run: &Path) -> Result<Self> {
        let p = if run.is_dir() { run.join(RUN_MANIFEST) } else { run.to_path_buf() };
        read_json(&p)
    }

    pub fn record(&self, grid_point: Option<&str>) -> Result<&RunRecord> {
        match grid_point {
            None => Ok(&self.records[self.best]),
            Some(tag) => self
                .records
                .iter()
                .find(|r| r.hyper.tag() == tag)
                .ok_or_else(|| AppError::config(format!("run has no grid point `{tag}`"))),
        }
    }
}

/// Per-fold metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub grid_point: String,
    pub test_subjects: Vec<String>,
    pub chunk_accuracy: f64,
    pub stages: Vec<StageReport>,
    pub teacher_checksum: Option<(u64, u64)>,
}

pub fn run_dir(root: &Path, cfg: &ModelConfig) -> PathBuf {
    root.join(format!("{}_{}", cfg.architecture.tag(), cfg.attention.tag()))
}

pub fn fold_dir(run: &Path, grid_point: &str, fold: usize) -> PathBuf {
    run.join(grid_point).join(format!("fold{fold}"))
}

pub struct TrainRequest<'a> {
    pub model: ModelConfig,
    pub data: &'a ChunkDataset,
    pub dataset: DatasetPaths,
    pub window: usize,
    pub frame_size: [usize; 2],
    pub grid: HyperGrid,
    pub folds: usize,
    pub seed: u64,
    pub options: TrainOptions,
    pub output_root: PathBuf,
    pub threads: Option<usize>,
}

fn write_fold(run: &Path, plan: &FoldPlan, r: &FoldResult, fingerprint: &str) -> Result<()> {
    let tag = r.hyper.tag();
    let dir = fold_dir(run, &tag, r.fold);
    save_model(&dir, &r.outcome.model, fingerprint)?;
    write_jsonl(&dir.join(PREDICTIONS_FILE), &r.predictions)?;
    let metrics = FoldMetrics {
        fold: r.fold,
        grid_point: tag,
        test_subjects: plan.test_subjects(r.fold).into_iter().map(String::from).collect(),
        chunk_accuracy: r.report.accuracy,
        stages: r.outcome.stages.clone(),
        teacher_checksum: r.outcome.teacher_checksum,
    };
    write_json(&dir.join(METRICS_FILE), &metrics)
}

/// Trains every grid point on every fold (folds in parallel), writing
/// checkpoints and the run manifest. Returns the manifest and its directory.
pub fn train_run(req: &TrainRequest) -> Result<(RunManifest, PathBuf)> {
    req.grid.validate(req.model.architecture)?;
    req.model.validate()?;
    let plan = plan_folds(&subject_majorities(req.data.chunks()), req.folds, req.seed)?;
    let fingerprint = data_fingerprint(req.data);
    let run = run_dir(&req.output_root, &req.model);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = req.threads {
        pool = pool.num_threads(n.max(1));
    }
    let pool = pool
        .build()
        .map_err(|e| AppError::config(format!("cannot start worker pool: {e}")))?;
    let mut records = Vec::new();
    for hyper in req.grid.points() {
        log::info!("training {} folds at {}", req.folds, hyper.tag());
        let results: Vec<_> = pool.install(|| {
            (0..req.folds)
                .into_par_iter()
                .map(|k| train_fold(&req.model, req.data, &plan, k, &hyper, req.seed, &req.options))
                .collect()
        });
        let mut accs = Vec::new();
        for r in results {
            let r = r?;
            log::info!("fold {} chunk accuracy {:.4}", r.fold, r.report.accuracy);
            write_fold(&run, &plan, &r, &fingerprint)?;
            accs.push(r.report.accuracy);
        }
        records.push(RunRecord::new(&req.model, &hyper, req.seed, accs));
    }
    let best = select_best(&records).expect("validated grid is non-empty");
    let manifest = RunManifest {
        architecture: req.model.architecture.tag().into(),
        attention: req.model.attention.tag().into(),
        seed: req.seed,
        model: req.model,
        grid: req.grid.clone(),
        options: req.options,
        window: req.window,
        frame_size: req.frame_size,
        dataset: req.dataset.clone(),
        data_fingerprint: fingerprint,
        fold_plan: plan,
        best_grid_point: records[best].hyper.tag(),
        records,
        best,
        metadata: RunMetadata::now(),
    };
    write_json(&run.join(RUN_MANIFEST), &manifest)?;
    Ok((manifest, run))
}
