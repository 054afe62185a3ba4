//! Annotation files, frame directories and synthetic dataset emission.
//!
//! A dataset directory looks like
//!
//! ```text
//! annotations.json
//! frames/<video_id>/00000.png
//! frames/<video_id>/00001.png
//! ...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb, RgbImage};
use moodshift_core::data::{FrameStore, ValenceTrack};
use moodshift_core::labels::LabeledChunk;
use moodshift_core::synth::{generate_synthetic, SyntheticDatasetSpec};
use moodshift_core::{MoodClass, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, IoContext, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const FRAMES_DIR: &str = "frames";
pub const SYNTH_SPEC_FILE: &str = "synthetic.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub videos: Vec<VideoAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub subject_id: String,
    pub frames: Vec<FrameAnnotation>,
    /// Dataset-specific mood category for the whole video, mapped through a
    /// user-supplied table at prepare time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mood_category: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub index: usize,
    pub valence: i32,
}

/// Parses and validates annotations. Frame indices must run `0..n` without gaps.
pub fn parse_annotations(text: &str) -> Result<AnnotationFile> {
    let file: AnnotationFile = serde_json::from_str(text)?;
    let mut seen = std::collections::BTreeSet::new();
    for v in &file.videos {
        if !seen.insert(v.video_id.as_str()) {
            return Err(AppError::data(format!("video {} is listed twice", v.video_id)));
        }
        let mut idx: Vec<usize> = v.frames.iter().map(|f| f.index).collect();
        idx.sort_unstable();
        for (expect, &got) in idx.iter().enumerate() {
            if got != expect {
                return Err(AppError::data(format!(
                    "video {}: frame indices must be 0..{} without gaps or repeats (problem at frame {expect})",
                    v.video_id,
                    idx.len()
                )));
            }
        }
    }
    Ok(file)
}

pub fn tracks_of(file: &AnnotationFile) -> Result<Vec<ValenceTrack>> {
    file.videos
        .iter()
        .map(|v| {
            let mut frames = v.frames.clone();
            frames.sort_by_key(|f| f.index);
            let valence = frames.iter().map(|f| f.valence).collect();
            Ok(ValenceTrack::new(&v.video_id, &v.subject_id, valence)?)
        })
        .collect()
}

/// Loads annotation JSON and returns one validated track per video.
pub fn load_annotations(path: &Path) -> Result<(AnnotationFile, Vec<ValenceTrack>)> {
    let text = fs::read_to_string(path).at(path)?;
    let file = parse_annotations(&text).map_err(|e| AppError::data(format!("{}: {}", path.display(), e.message)))?;
    let tracks = tracks_of(&file)?;
    Ok((file, tracks))
}

pub fn annotations_from_tracks(tracks: &[ValenceTrack]) -> AnnotationFile {
    AnnotationFile {
        videos: tracks
            .iter()
            .map(|t| VideoAnnotation {
                video_id: t.video_id().into(),
                subject_id: t.subject_id().into(),
                frames: t
                    .valence()
                    .iter()
                    .enumerate()
                    .map(|(index, &valence)| FrameAnnotation { index, valence })
                    .collect(),
                mood_category: None,
            })
            .collect(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).at(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| AppError::data(format!("{}: {e}", path.display())))
}

pub fn frame_path(frames_dir: &Path, video_id: &str, index: usize) -> PathBuf {
    frames_dir.join(video_id).join(format!("{index:05}.png"))
}

/// `(H, W, 3)` tensor in `[0, 1]` to an 8-bit image.
pub fn tensor_to_image(t: &Tensor) -> RgbImage {
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let o = (y as usize * w + x as usize) * 3;
        let px = |c: usize| (t.data()[o + c].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn image_to_tensor(img: &ImageBuffer<Rgb<f32>, Vec<f32>>) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f64::from(v).clamp(0.0, 1.0)).collect();
    Tensor::from_vec(&[h as usize, w as usize, 3], data).expect("rgb buffer matches its dimensions")
}

/// Decodes one frame as RGB in `[0, 1]`, resizing bilinearly to `size = (H, W)` if needed.
pub fn load_frame(path: &Path, size: (usize, usize)) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| AppError::data(format!("{}: cannot decode frame: {e}", path.display())))?
        .into_rgb32f();
    let (h, w) = size;
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        imageops::resize(&img, w as u32, h as u32, imageops::FilterType::Triangle)
    };
    Ok(image_to_tensor(&img))
}

/// Loads every annotated frame. Missing files are reported together per video.
pub fn load_frames(frames_dir: &Path, tracks: &[ValenceTrack], size: (usize, usize)) -> Result<FrameStore> {
    if !frames_dir.is_dir() {
        return Err(AppError::data(format!("frames directory {} does not exist", frames_dir.display())));
    }
    let mut store = FrameStore::new();
    for t in tracks {
        let missing: Vec<usize> = (0..t.len())
            .filter(|&i| !frame_path(frames_dir, t.video_id(), i).is_file())
            .collect();
        if !missing.is_empty() {
            return Err(AppError::data(format!(
                "video {}: missing frame files for indices {:?} under {}",
                t.video_id(),
                missing,
                frames_dir.join(t.video_id()).display()
            )));
        }
        let frames = (0..t.len())
            .map(|i| load_frame(&frame_path(frames_dir, t.video_id(), i), size))
            .collect::<Result<Vec<_>>>()?;
        store.insert(t.video_id(), frames);
    }
    Ok(store)
}

pub fn write_frames(frames_dir: &Path, store: &FrameStore) -> Result<()> {
    for vid in store.video_ids() {
        let dir = frames_dir.join(vid);
        fs::create_dir_all(&dir).at(&dir)?;
        for (i, f) in store.frames(vid).unwrap_or_default().iter().enumerate() {
            let p = frame_path(frames_dir, vid, i);
            tensor_to_image(f)
                .save(&p)
                .map_err(|e| AppError::io(&p, std::io::Error::other(e)))?;
        }
    }
    Ok(())
}

/// Generates a synthetic dataset and writes annotations, frames and the spec.
pub fn write_synthetic(out: &Path, spec: &SyntheticDatasetSpec) -> Result<Vec<ValenceTrack>> {
    let (tracks, frames) = generate_synthetic(spec)?;
    fs::create_dir_all(out).at(out)?;
    write_json(&out.join(ANNOTATIONS_FILE), &annotations_from_tracks(&tracks))?;
    write_json(&out.join(SYNTH_SPEC_FILE), spec)?;
    write_frames(&out.join(FRAMES_DIR), &frames)?;
    Ok(tracks)
}

/// Replaces chunk mood labels by the mapped per-video category.
pub fn apply_mood_mapping(
    chunks: &mut [LabeledChunk],
    annotations: &AnnotationFile,
    table: &BTreeMap<String, MoodClass>,
) -> Result<()> {
    let cats: BTreeMap<&str, Option<&String>> = annotations
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), v.mood_category.as_ref()))
        .collect();
    for c in chunks {
        let cat = cats
            .get(c.video_id.as_str())
            .copied()
            .flatten()
            .ok_or_else(|| AppError::data(format!("video {} has no mood_category", c.video_id)))?;
        c.mood_label = *table
            .get(cat)
            .ok_or_else(|| AppError::config(format!("mood category `{cat}` is not in the mapping table")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_errors_name_video_and_frame() {
        let bad = r#"{"videos":[{"video_id":"a","subject_id":"s","frames":[{"index":0,"valence":2},{"index":1,"valence":12}]}]}"#;
        let file = parse_annotations(bad).unwrap();
        let err = tracks_of(&file).unwrap_err();
        assert!(err.message.contains("video a") && err.message.contains("frame 1"), "{}", err.message);
        let gap = r#"{"videos":[{"video_id":"b","subject_id":"s","frames":[{"index":0,"valence":2},{"index":2,"valence":1}]}]}"#;
        let err = parse_annotations(gap).unwrap_err();
        assert!(err.message.contains("video b"));
    }

    #[test]
    fn frames_are_sorted_by_index() {
        let text = r#"{"videos":[{"video_id":"a","subject_id":"s","frames":[{"index":1,"valence":-3},{"index":0,"valence":4}]}]}"#;
        let t = tracks_of(&parse_annotations(text).unwrap()).unwrap();
        assert_eq!(t[0].valence(), &[4, -3]);
    }

    #[test]
    fn png_round_trip_is_lossless_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let t = Tensor::from_vec(&[4, 3, 3], data).unwrap();
        let p = dir.path().join("f.png");
        tensor_to_image(&t).save(&p).unwrap();
        let back = load_frame(&p, (4, 3)).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
        assert_eq!(load_frame(&p, (8, 6)).unwrap().shape(), &[8, 6, 3]);
    }

    #[test]
    fn mood_mapping_requires_known_categories() {
        let text = r#"{"videos":[{"video_id":"a","subject_id":"s","mood_category":"joy","frames":[{"index":0,"valence":0}]}]}"#;
        let ann = parse_annotations(text).unwrap();
        let mut chunks = vec![LabeledChunk {
            video_id: "a".into(),
            subject_id: "s".into(),
            start_frame: 0,
            mood_label: MoodClass::Neutral,
            delta_label: MoodClass::Neutral,
        }];
        let mut table = BTreeMap::new();
        assert!(apply_mood_mapping(&mut chunks, &ann, &table).is_err());
        table.insert("joy".to_string(), MoodClass::Positive);
        apply_mood_mapping(&mut chunks, &ann, &table).unwrap();
        assert_eq!(chunks[0].mood_label, MoodClass::Positive);
    }
}
