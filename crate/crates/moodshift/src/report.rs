//! Re-scoring saved runs and comparing runs.

use std::path::{Path, PathBuf};

use moodshift_core::eval::{
    chunk_accuracy, cross_dataset_eval, predict_chunks, video_accuracy, video_truths, ChunkPrediction,
    CrossDatasetReport, EvalReport,
};
use moodshift_core::models::{Network, TrainedModel};
use moodshift_core::stats::{compare_models, mean_std, TTest};
use moodshift_core::train::RunRecord;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_model;
use crate::error::{AppError, Result};
use crate::ingest::write_json;
use crate::manifest::write_jsonl;
use crate::render::{accuracy_bars, confusion_heatmap};
use crate::runs::{fold_dir, load_dataset, DatasetPaths, RunManifest, RunMetadata};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEval {
    pub fold: usize,
    pub chunk: EvalReport,
    pub video: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub architecture: String,
    pub attention: String,
    pub grid_point: String,
    pub seed: u64,
    /// Pooled over all held-out folds.
    pub chunk: EvalReport,
    pub video: EvalReport,
    pub folds: Vec<FoldEval>,
    pub chunk_mean: f64,
    pub chunk_std: f64,
    pub video_mean: f64,
    pub video_std: f64,
    pub external: Option<CrossDatasetReport>,
    pub metadata: RunMetadata,
}

pub fn load_fold_models(run: &Path, manifest: &RunManifest, grid_point: &str) -> Result<Vec<TrainedModel>> {
    (0..manifest.fold_plan.folds)
        .map(|k| load_model(&fold_dir(run, grid_point, k)).map(|(m, _)| m))
        .collect()
}

/// Reloads each fold checkpoint, predicts its held-out subjects and scores
/// at chunk and video level. Writes predictions and `report.json` under `out`.
pub fn evaluate_run(
    run: &Path,
    grid_point: Option<&str>,
    external: Option<&DatasetPaths>,
    out: &Path,
    plots: bool,
) -> Result<EvalOutput> {
    let manifest = RunManifest::load(run)?;
    let run = if run.is_dir() { run.to_path_buf() } else { run.parent().map_or_else(PathBuf::new, Path::to_path_buf) };
    let record = manifest.record(grid_point)?;
    let tag = record.hyper.tag();
    let size = (manifest.frame_size[0], manifest.frame_size[1]);
    let data = load_dataset(&manifest.dataset, manifest.window, size)?;
    let models = load_fold_models(&run, &manifest, &tag)?;
    let mut all = Vec::new();
    let mut folds = Vec::new();
    for (k, m) in models.iter().enumerate() {
        let (_, test) = manifest.fold_plan.split(&data, k)?;
        let preds = predict_chunks(&m.network, &data, &test, 64)?;
        write_jsonl(&out.join(format!("fold{k}.predictions.jsonl")), &preds)?;
        let truths = video_truths(&preds);
        folds.push(FoldEval {
            fold: k,
            chunk: chunk_accuracy(&preds)?,
            video: video_accuracy(&preds, &truths)?,
        });
        all.extend(preds);
    }
    let pooled_truths = video_truths(&all);
    let chunk = chunk_accuracy(&all)?;
    let video = video_accuracy(&all, &pooled_truths)?;
    let (chunk_mean, chunk_std) = mean_std(&folds.iter().map(|f| f.chunk.accuracy).collect::<Vec<_>>());
    let (video_mean, video_std) = mean_std(&folds.iter().map(|f| f.video.accuracy).collect::<Vec<_>>());
    let external = match external {
        None => None,
        Some(paths) => {
            let ext = load_dataset(paths, manifest.window, size)?;
            let nets: Vec<&Network> = models.iter().map(|m| &m.network).collect();
            Some(cross_dataset_eval(&nets, &ext)?)
        }
    };
    let output = EvalOutput {
        architecture: manifest.architecture.clone(),
        attention: manifest.attention.clone(),
        grid_point: tag,
        seed: manifest.seed,
        chunk,
        video,
        folds,
        chunk_mean,
        chunk_std,
        video_mean,
        video_std,
        external,
        metadata: RunMetadata::now(),
    };
    write_json(&out.join("report.json"), &output)?;
    if plots {
        let c: Vec<f64> = output.folds.iter().map(|f| f.chunk.accuracy).collect();
        let v: Vec<f64> = output.folds.iter().map(|f| f.video.accuracy).collect();
        accuracy_bars(&[&c, &v], &out.join("accuracy.png"))?;
        confusion_heatmap(&output.chunk.confusion, &out.join("confusion_chunk.png"))?;
        confusion_heatmap(&output.video.confusion, &out.join("confusion_video.png"))?;
    }
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparedRun {
    pub run: PathBuf,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: ComparedRun,
    pub b: ComparedRun,
    pub t_test: TTest,
    /// `"a>b"`, `"a<b"` or `"a=b"` on mean fold accuracy.
    pub direction: String,
}

pub fn compare_records(a: ComparedRun, b: ComparedRun) -> Result<Comparison> {
    let t = compare_models(&a.record.fold_accuracies, &b.record.fold_accuracies)?;
    let direction = match t.mean_a.partial_cmp(&t.mean_b) {
        Some(std::cmp::Ordering::Greater) => "a>b",
        Some(std::cmp::Ordering::Less) => "a<b",
        _ => "a=b",
    };
    Ok(Comparison {
        a,
        b,
        t_test: t,
        direction: direction.into(),
    })
}

pub fn compare_runs(a: &Path, ga: Option<&str>, b: &Path, gb: Option<&str>) -> Result<Comparison> {
    let load = |p: &Path, g: Option<&str>| -> Result<ComparedRun> {
        let m = RunManifest::load(p)?;
        Ok(ComparedRun {
            run: p.to_path_buf(),
            record: m.record(g)?.clone(),
        })
    };
    compare_records(load(a, ga)?, load(b, gb)?)
}

/// Reads predictions of one chunk for explanation.
pub fn find_chunk(preds: &[ChunkPrediction], video: &str, start: usize) -> Result<ChunkPrediction> {
    preds
        .iter()
        .find(|p| p.video_id == video && p.start_frame == start)
        .cloned()
        .ok_or_else(|| AppError::data(format!("no prediction for {video}@{start}")))
}
