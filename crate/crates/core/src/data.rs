//! Valence tracks, frame clips and the in-memory chunk dataset.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labels::{LabeledChunk, VALENCE_MAX, VALENCE_MIN};
use crate::tensor::Tensor;

/// Default clip contract: 5 frames of 32x32 RGB.
pub const CLIP_SHAPE: [usize; 4] = [5, 32, 32, 3];

/// Per-frame integer valence for one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValenceTrack {
    video_id: String,
    subject_id: String,
    valence: Vec<i32>,
}

impl ValenceTrack {
    pub fn new(video_id: &str, subject_id: &str, valence: Vec<i32>) -> Result<Self> {
        if valence.is_empty() {
            return Err(Error::Validation(format!("video {video_id} has no frames")));
        }
        if let Some((frame, &value)) = valence
            .iter()
            .enumerate()
            .find(|(_, v)| !(VALENCE_MIN..=VALENCE_MAX).contains(*v))
        {
            return Err(Error::ValenceOutOfRange {
                video_id: video_id.into(),
                frame,
                value,
            });
        }
        Ok(ValenceTrack {
            video_id: video_id.into(),
            subject_id: subject_id.into(),
            valence,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn valence(&self) -> &[i32] {
        &self.valence
    }

    pub fn len(&self) -> usize {
        self.valence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valence.is_empty()
    }
}

/// A fixed-length window of frames, `(frames, height, width, channels)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pub video_id: String,
    pub start_frame: usize,
    pixels: Tensor,
}

impl FrameClip {
    pub fn new(video_id: &str, start_frame: usize, pixels: Tensor) -> Result<Self> {
        if pixels.shape().len() != 4 {
            return Err(Error::shape(&CLIP_SHAPE, pixels.shape()));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Validation(format!(
                "clip {video_id}@{start_frame}: pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(FrameClip {
            video_id: video_id.into(),
            start_frame,
            pixels,
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.pixels.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn expect_shape(&self, shape: [usize; 4]) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::shape(&shape, self.pixels.shape()));
        }
        Ok(())
    }

    /// Adds a leading batch axis.
    pub fn as_batch(&self) -> Tensor {
        let mut shape = alloc::vec![1];
        shape.extend_from_slice(self.pixels.shape());
        self.pixels.clone().reshape(&shape).unwrap()
    }
}

/// Frames of each video, keyed by video id. Each frame is `(height, width, channels)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameStore {
    videos: BTreeMap<String, Vec<Tensor>>,
}

impl FrameStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, video_id: &str, frames: Vec<Tensor>) {
        self.videos.insert(video_id.into(), frames);
    }

    pub fn frames(&self, video_id: &str) -> Option<&[Tensor]> {
        self.videos.get(video_id).map(Vec::as_slice)
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.videos.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// Labelled chunks paired with the frames they index.
#[derive(Debug, Clone)]
pub struct ChunkDataset {
    frames: FrameStore,
    chunks: Vec<LabeledChunk>,
    window: usize,
    frame_shape: [usize; 3],
}

impl ChunkDataset {
    pub fn new(frames: FrameStore, chunks: Vec<LabeledChunk>, window: usize) -> Result<Self> {
        let mut frame_shape: Option<[usize; 3]> = None;
        for c in &chunks {
            let f = frames
                .frames(&c.video_id)
                .ok_or_else(|| Error::Data(format!("no frames for video {}", c.video_id)))?;
            if c.start_frame + window > f.len() {
                return Err(Error::Data(format!(
                    "chunk {}@{} needs {} frames, video has {}",
                    c.video_id,
                    c.start_frame,
                    c.start_frame + window,
                    f.len()
                )));
            }
            for fr in &f[c.start_frame..c.start_frame + window] {
                let s = fr.shape();
                if s.len() != 3 {
                    return Err(Error::Data(format!("frame of video {} has rank {}", c.video_id, s.len())));
                }
                let shape = [s[0], s[1], s[2]];
                match frame_shape {
                    None => frame_shape = Some(shape),
                    Some(expected) if expected != shape => {
                        return Err(Error::shape(&expected, s));
                    }
                    _ => {}
                }
            }
        }
        Ok(ChunkDataset {
            frames,
            chunks,
            window,
            frame_shape: frame_shape.unwrap_or([CLIP_SHAPE[1], CLIP_SHAPE[2], CLIP_SHAPE[3]]),
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[LabeledChunk] {
        &self.chunks
    }

    pub fn chunk(&self, i: usize) -> &LabeledChunk {
        &self.chunks[i]
    }

    pub fn frame_store(&self) -> &FrameStore {
        &self.frames
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.window, self.frame_shape[0], self.frame_shape[1], self.frame_shape[2]]
    }

    pub fn clip(&self, i: usize) -> FrameClip {
        let c = &self.chunks[i];
        let per = self.frame_shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(per * self.window);
        let frames = self.frames.frames(&c.video_id).unwrap();
        for f in &frames[c.start_frame..c.start_frame + self.window] {
            data.extend_from_slice(f.data());
        }
        let pixels = Tensor::from_vec(&self.clip_shape(), data).unwrap();
        FrameClip {
            video_id: c.video_id.clone(),
            start_frame: c.start_frame,
            pixels,
        }
    }

    /// Stacks clips for `indices` into `(N, frames, H, W, C)`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let cs = self.clip_shape();
        let per = cs.iter().product::<usize>();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            let c = &self.chunks[i];
            let frames = self.frames.frames(&c.video_id).unwrap();
            for f in &frames[c.start_frame..c.start_frame + self.window] {
                data.extend_from_slice(f.data());
            }
        }
        Tensor::from_vec(&[indices.len(), cs[0], cs[1], cs[2], cs[3]], data).unwrap()
    }

    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.chunks.iter().map(|c| c.subject_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn indices_where(&self, mut keep: impl FnMut(&LabeledChunk) -> bool) -> Vec<usize> {
        (0..self.chunks.len()).filter(|&i| keep(&self.chunks[i])).collect()
    }
}
