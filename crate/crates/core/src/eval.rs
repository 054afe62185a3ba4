//! Chunk- and video-level accuracy, and evaluation of fold models on an
//! external dataset.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::ChunkDataset;
use crate::error::{Error, Result};
use crate::labels::{chunk_mood_label, MoodClass, NUM_CLASSES};
use crate::models::{argmax_class, Network};
use crate::stats::mean_std;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPrediction {
    pub video_id: String,
    pub start_frame: usize,
    pub predicted: MoodClass,
    /// Class order `(-1, 0, +1)`.
    pub probabilities: [f64; 3],
    pub truth: MoodClass,
}

impl ChunkPrediction {
    pub fn new(video_id: &str, start_frame: usize, probabilities: [f64; 3], truth: MoodClass) -> Result<Self> {
        let s: f64 = probabilities.iter().sum();
        if (s - 1.0).abs() > 1e-6 || probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation(format!(
                "prediction {video_id}@{start_frame}: probabilities {probabilities:?} are not a distribution"
            )));
        }
        Ok(ChunkPrediction {
            video_id: video_id.into(),
            start_frame,
            predicted: argmax_class(&probabilities),
            probabilities,
            truth,
        })
    }

    pub fn is_correct(&self) -> bool {
        self.predicted == self.truth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Chunk,
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub granularity: Granularity,
    pub accuracy: f64,
    /// `confusion[truth][predicted]`, class order `(-1, 0, +1)`.
    pub confusion: [[usize; 3]; 3],
    pub n_items: usize,
}

impl EvalReport {
    fn from_pairs(granularity: Granularity, pairs: impl Iterator<Item = (MoodClass, MoodClass)>) -> Result<Self> {
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        let mut n = 0;
        for (truth, pred) in pairs {
            confusion[truth.index()][pred.index()] += 1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Validation("cannot score an empty prediction list".into()));
        }
        let correct: usize = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
        Ok(EvalReport {
            granularity,
            accuracy: correct as f64 / n as f64,
            confusion,
            n_items: n,
        })
    }

    pub fn truth_counts(&self) -> [usize; 3] {
        core::array::from_fn(|i| self.confusion[i].iter().sum())
    }
}

pub fn chunk_accuracy(preds: &[ChunkPrediction]) -> Result<EvalReport> {
    EvalReport::from_pairs(Granularity::Chunk, preds.iter().map(|p| (p.truth, p.predicted)))
}

/// Majority vote over chunk predictions; ties go to the tied class with the
/// highest mean probability, then to the earlier class in `(-1, 0, +1)`.
pub fn video_vote(preds: &[&ChunkPrediction]) -> Result<MoodClass> {
    if preds.is_empty() {
        return Err(Error::Validation("video has no chunk predictions".into()));
    }
    // Canonical summation order keeps the float tie-break independent of input order.
    let mut sorted: Vec<&ChunkPrediction> = preds.to_vec();
    sorted.sort_by(|a, b| {
        a.start_frame.cmp(&b.start_frame).then_with(|| {
            let ka = a.probabilities.map(f64::to_bits);
            let kb = b.probabilities.map(f64::to_bits);
            ka.cmp(&kb)
        })
    });
    let mut votes = [0usize; 3];
    let mut prob = [0.0f64; 3];
    for p in sorted {
        votes[p.predicted.index()] += 1;
        for (acc, v) in prob.iter_mut().zip(p.probabilities) {
            *acc += v;
        }
    }
    let top = *votes.iter().max().unwrap();
    let mut best: Option<usize> = None;
    for c in 0..3 {
        if votes[c] != top {
            continue;
        }
        match best {
            Some(b) if prob[b] >= prob[c] => {}
            _ => best = Some(c),
        }
    }
    Ok(MoodClass::from_index(best.unwrap()).unwrap())
}

/// Groups predictions by video in id order.
pub fn group_by_video(preds: &[ChunkPrediction]) -> BTreeMap<&str, Vec<&ChunkPrediction>> {
    let mut map: BTreeMap<&str, Vec<&ChunkPrediction>> = BTreeMap::new();
    for p in preds {
        map.entry(p.video_id.as_str()).or_default().push(p);
    }
    map
}

/// Video-level label from chunk truths: the most frequent chunk label, ties
/// going to the label that occurs latest in the video.
pub fn video_truths(preds: &[ChunkPrediction]) -> BTreeMap<String, MoodClass> {
    group_by_video(preds)
        .into_iter()
        .map(|(vid, mut ps)| {
            ps.sort_by_key(|p| p.start_frame);
            let labels: Vec<MoodClass> = ps.iter().map(|p| p.truth).collect();
            (String::from(vid), chunk_mood_label(&labels).unwrap())
        })
        .collect()
}

pub fn video_accuracy(preds: &[ChunkPrediction], truths: &BTreeMap<String, MoodClass>) -> Result<EvalReport> {
    let mut pairs = Vec::new();
    for (vid, ps) in group_by_video(preds) {
        let truth = truths
            .get(vid)
            .ok_or_else(|| Error::Data(format!("no ground-truth mood for video {vid}")))?;
        pairs.push((*truth, video_vote(&ps)?));
    }
    EvalReport::from_pairs(Granularity::Video, pairs.into_iter())
}

/// Predicts every chunk in `indices` with `net`.
pub fn predict_chunks(net: &Network, data: &ChunkDataset, indices: &[usize], batch: usize) -> Result<Vec<ChunkPrediction>> {
    let mut out = Vec::with_capacity(indices.len());
    for part in indices.chunks(batch.max(1)) {
        let probs = net.predict_batch(&data.batch(part))?;
        for (&i, p) in part.iter().zip(probs) {
            let c = data.chunk(i);
            out.push(ChunkPrediction::new(&c.video_id, c.start_frame, p, c.mood_label)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetReport {
    pub chunk: Vec<EvalReport>,
    pub video: Vec<EvalReport>,
    pub chunk_mean: f64,
    pub chunk_std: f64,
    pub video_mean: f64,
    pub video_std: f64,
}

/// Scores each fold model on the whole external set and averages.
pub fn cross_dataset_eval(models: &[&Network], data: &ChunkDataset) -> Result<CrossDatasetReport> {
    if models.is_empty() {
        return Err(Error::Validation("no models to evaluate".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut chunk = Vec::new();
    let mut video = Vec::new();
    for net in models {
        let preds = predict_chunks(net, data, &all, 64)?;
        let truths = video_truths(&preds);
        chunk.push(chunk_accuracy(&preds)?);
        video.push(video_accuracy(&preds, &truths)?);
    }
    let (chunk_mean, chunk_std) = mean_std(&chunk.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    let (video_mean, video_std) = mean_std(&video.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    Ok(CrossDatasetReport {
        chunk,
        video,
        chunk_mean,
        chunk_std,
        video_mean,
        video_std,
    })
}
