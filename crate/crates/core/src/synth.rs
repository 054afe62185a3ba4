//! Seeded synthetic stand-in for per-frame valence video corpora.
//!
//! Valence follows a bounded integer random walk. Every frame shows a noisy
//! grey background with a square patch whose hue runs from blue (valence -10)
//! through green to red (valence +10) and whose horizontal position moves
//! with valence, so both the mood band and its change over a window are
//! visible to a classifier.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FrameStore, ValenceTrack};
use crate::error::{Error, Result};
use crate::labels::{VALENCE_MAX, VALENCE_MIN};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_subjects: usize,
    pub videos_per_subject: usize,
    pub frames_per_video: usize,
    pub valence_walk_step: u32,
    pub seed: u64,
    #[serde(default = "default_side")]
    pub frame_height: usize,
    #[serde(default = "default_side")]
    pub frame_width: usize,
    /// Half-width of the uniform per-pixel noise.
    #[serde(default = "default_noise")]
    pub pixel_noise: f64,
    /// Rotation of the valence-to-hue map in degrees, for shifted domains.
    #[serde(default)]
    pub hue_shift: f64,
}

fn default_side() -> usize {
    32
}

fn default_noise() -> f64 {
    0.05
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            num_subjects: 5,
            videos_per_subject: 4,
            frames_per_video: 30,
            valence_walk_step: 1,
            seed: 0,
            frame_height: default_side(),
            frame_width: default_side(),
            pixel_noise: default_noise(),
            hue_shift: 0.0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_subjects", self.num_subjects),
            ("videos_per_subject", self.videos_per_subject),
            ("frames_per_video", self.frames_per_video),
            ("valence_walk_step", self.valence_walk_step as usize),
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Validation(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=0.5).contains(&self.pixel_noise) {
            return Err(Error::Validation(format!(
                "pixel_noise must lie in [0, 0.5], got {}",
                self.pixel_noise
            )));
        }
        if !self.hue_shift.is_finite() {
            return Err(Error::Validation("hue_shift must be finite".into()));
        }
        Ok(())
    }

    pub fn num_videos(&self) -> usize {
        self.num_subjects * self.videos_per_subject
    }

    pub fn video_id(&self, index: usize) -> String {
        format!("vid{index:04}")
    }

    pub fn subject_id(&self, index: usize) -> String {
        format!("subj{:02}", index % self.num_subjects)
    }
}

fn hue_to_rgb(hue_deg: f64) -> [f64; 3] {
    let wrapped = libm::fmod(hue_deg, 360.0);
    let h = if wrapped < 0.0 { wrapped + 360.0 } else { wrapped };
    let h = h / 60.0;
    let x = 1.0 - libm::fabs(h % 2.0 - 1.0);
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Hue in degrees for a valence: 240 (blue) at -10, 0 (red) at +10.
pub fn valence_hue(valence: i32, shift: f64) -> f64 {
    240.0 * f64::from(VALENCE_MAX - valence) / 20.0 + shift
}

fn quantize(v: f64) -> f64 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

/// Renders one frame. Depends only on the spec, video id, frame index and
/// valence; values are multiples of 1/255 so 8-bit image storage is lossless.
pub fn render_frame(spec: &SyntheticDatasetSpec, video_id: &str, frame_index: usize, valence: i32) -> Tensor {
    let (h, w) = (spec.frame_height, spec.frame_width);
    let patch = (h.min(w) / 2).max(1);
    let span = (w - patch) as f64;
    let x0 = libm::round(f64::from(valence - VALENCE_MIN) / 20.0 * span) as usize;
    let y0 = (h - patch) / 2;
    let color = hue_to_rgb(valence_hue(valence, spec.hue_shift));
    let tag = seed::derive(seed::derive_str(spec.seed, video_id), frame_index as u64);
    let mut rng = seed::rng(tag);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let inside = y >= y0 && y < y0 + patch && x >= x0 && x < x0 + patch;
            for &c in &color {
                let base = if inside { c } else { 0.5 };
                let noise = (rng.random::<f64>() * 2.0 - 1.0) * spec.pixel_noise;
                data.push(quantize(base + noise));
            }
        }
    }
    Tensor::from_vec(&[h, w, 3], data).unwrap()
}

fn walk(spec: &SyntheticDatasetSpec, video_id: &str) -> Vec<i32> {
    let mut rng = seed::rng(seed::derive_str(spec.seed ^ 0x5741_4c4b, video_id));
    let step = spec.valence_walk_step as i32;
    let mut v = rng.random_range(VALENCE_MIN..=VALENCE_MAX);
    let mut out = Vec::with_capacity(spec.frames_per_video);
    for _ in 0..spec.frames_per_video {
        out.push(v);
        v = (v + rng.random_range(-step..=step)).clamp(VALENCE_MIN, VALENCE_MAX);
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<(Vec<ValenceTrack>, FrameStore)> {
    spec.validate()?;
    let mut tracks = Vec::with_capacity(spec.num_videos());
    let mut store = FrameStore::new();
    for i in 0..spec.num_videos() {
        let vid = spec.video_id(i);
        let valence = walk(spec, &vid);
        let frames = valence
            .iter()
            .enumerate()
            .map(|(f, &v)| render_frame(spec, &vid, f, v))
            .collect();
        store.insert(&vid, frames);
        tracks.push(ValenceTrack::new(&vid, &spec.subject_id(i), valence)?);
    }
    Ok((tracks, store))
}
