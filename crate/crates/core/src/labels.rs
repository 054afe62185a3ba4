//! Mood and emotion-change (delta) labels for overlapping frame windows.
//!
//! Per-frame valence in `[-10, 10]` is banded into a mood class: `(3, 10]` is
//! positive, `[-3, 3]` neutral and `[-10, -3)` negative. A window of `k`
//! frames takes the mode of its per-frame moods, and its delta label is the
//! sign of `v[t] - v[t - k + 1]` over the same window.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::ValenceTrack;
use crate::error::{Error, Result};

pub const VALENCE_MIN: i32 = -10;
pub const VALENCE_MAX: i32 = 10;
pub const NUM_CLASSES: usize = 3;

/// Three-way label in the fixed class order `(-1, 0, +1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum MoodClass {
    Negative,
    Neutral,
    Positive,
}

/// Delta labels share the `{-1, 0, +1}` encoding.
pub type DeltaClass = MoodClass;

impl MoodClass {
    pub const ALL: [MoodClass; 3] = [MoodClass::Negative, MoodClass::Neutral, MoodClass::Positive];

    /// Position in the fixed class order, used for logits and confusion rows.
    pub fn index(self) -> usize {
        match self {
            MoodClass::Negative => 0,
            MoodClass::Neutral => 1,
            MoodClass::Positive => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn value(self) -> i8 {
        self.index() as i8 - 1
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            -1 => Some(MoodClass::Negative),
            0 => Some(MoodClass::Neutral),
            1 => Some(MoodClass::Positive),
            _ => None,
        }
    }

    pub fn sign_of(x: i32) -> Self {
        match x.signum() {
            -1 => MoodClass::Negative,
            0 => MoodClass::Neutral,
            _ => MoodClass::Positive,
        }
    }

    pub fn negate(self) -> Self {
        match self {
            MoodClass::Negative => MoodClass::Positive,
            MoodClass::Neutral => MoodClass::Neutral,
            MoodClass::Positive => MoodClass::Negative,
        }
    }
}

impl From<MoodClass> for i8 {
    fn from(c: MoodClass) -> i8 {
        c.value()
    }
}

impl TryFrom<i8> for MoodClass {
    type Error = String;

    fn try_from(v: i8) -> core::result::Result<Self, String> {
        MoodClass::from_value(v).ok_or_else(|| format!("label {v} is not one of -1, 0, 1"))
    }
}

impl core::fmt::Display for MoodClass {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self.value() {
            0 => f.write_str("0"),
            v => write!(f, "{v:+}"),
        }
    }
}

impl core::str::FromStr for MoodClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "-1" | "negative" | "neg" => Ok(MoodClass::Negative),
            "0" | "+0" | "neutral" | "neu" => Ok(MoodClass::Neutral),
            "1" | "+1" | "positive" | "pos" => Ok(MoodClass::Positive),
            other => Err(Error::Validation(format!("unknown class `{other}`"))),
        }
    }
}

pub fn mood_of_valence(v: i32) -> Result<MoodClass> {
    if !(VALENCE_MIN..=VALENCE_MAX).contains(&v) {
        return Err(Error::Validation(format!("valence {v} outside [-10, 10]")));
    }
    Ok(if v > 3 {
        MoodClass::Positive
    } else if v < -3 {
        MoodClass::Negative
    } else {
        MoodClass::Neutral
    })
}

/// Mode of per-frame moods. Ties go to the tied label that occurs latest.
pub fn chunk_mood_label(per_frame: &[MoodClass]) -> Result<MoodClass> {
    if per_frame.is_empty() {
        return Err(Error::Validation("cannot take the mode of an empty window".into()));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for m in per_frame {
        counts[m.index()] += 1;
    }
    let best = *counts.iter().max().unwrap();
    let latest = per_frame
        .iter()
        .rev()
        .find(|m| counts[m.index()] == best)
        .unwrap();
    Ok(*latest)
}

/// Sign of `v[t] - v[t - k + 1]` with 0-based end index `t`.
pub fn delta_label(valences: &[i32], t: usize, k: usize) -> Result<DeltaClass> {
    if k < 2 {
        return Err(Error::Validation(format!("window must be at least 2 frames, got {k}")));
    }
    if t + 1 < k {
        return Err(Error::Validation(format!(
            "window of {k} frames ending at frame {t} starts before the track"
        )));
    }
    if t >= valences.len() {
        return Err(Error::Validation(format!(
            "end frame {t} beyond track of {} frames",
            valences.len()
        )));
    }
    for &v in &valences[t + 1 - k..=t] {
        mood_of_valence(v)?;
    }
    Ok(MoodClass::sign_of(valences[t] - valences[t + 1 - k]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub window_k: usize,
    pub stride: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        ChunkingConfig { window_k: 5, stride: 1 }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_k < 2 {
            return Err(Error::Validation(format!("window_k must be >= 2, got {}", self.window_k)));
        }
        if self.stride < 1 {
            return Err(Error::Validation("stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of windows over a track of `n` frames.
    pub fn count(&self, n: usize) -> usize {
        if n < self.window_k {
            0
        } else {
            (n - self.window_k) / self.stride + 1
        }
    }
}

/// One record of the labelled-chunk manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledChunk {
    pub video_id: String,
    pub subject_id: String,
    pub start_frame: usize,
    pub mood_label: MoodClass,
    pub delta_label: DeltaClass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkingOutcome {
    pub chunks: Vec<LabeledChunk>,
    /// Set when the track was too short to yield any window.
    pub diagnostic: Option<String>,
}

pub fn make_chunks(track: &ValenceTrack, config: &ChunkingConfig) -> Result<ChunkingOutcome> {
    config.validate()?;
    let v = track.valence();
    let k = config.window_k;
    if v.len() < k {
        return Ok(ChunkingOutcome {
            chunks: Vec::new(),
            diagnostic: Some(format!(
                "video {} has {} frames, fewer than the {k}-frame window; skipped",
                track.video_id(),
                v.len()
            )),
        });
    }
    let moods: Vec<MoodClass> = v.iter().map(|&x| mood_of_valence(x)).collect::<Result<_>>()?;
    let chunks = (0..config.count(v.len()))
        .map(|i| {
            let start = i * config.stride;
            Ok(LabeledChunk {
                video_id: track.video_id().into(),
                subject_id: track.subject_id().into(),
                start_frame: start,
                mood_label: chunk_mood_label(&moods[start..start + k])?,
                delta_label: delta_label(v, start + k - 1, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkingOutcome {
        chunks,
        diagnostic: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;
    use MoodClass::*;

    fn track(v: Vec<i32>) -> ValenceTrack {
        ValenceTrack::new("vid", "subj", v).unwrap()
    }

    /// Independent labeller: picks the label maximising (count, last index).
    fn oracle_mode(frames: &[MoodClass]) -> MoodClass {
        let mut best: Option<(usize, usize, MoodClass)> = None;
        for c in MoodClass::ALL {
            let count = frames.iter().filter(|&&f| f == c).count();
            if count == 0 {
                continue;
            }
            let last = frames.iter().rposition(|&f| f == c).unwrap();
            if best.is_none_or(|(bc, bl, _)| (count, last) > (bc, bl)) {
                best = Some((count, last, c));
            }
        }
        best.unwrap().2
    }

    fn oracle_chunks(v: &[i32], k: usize, stride: usize) -> Vec<(usize, MoodClass, MoodClass)> {
        let band = |x: i32| {
            if x >= 4 {
                Positive
            } else if x <= -4 {
                Negative
            } else {
                Neutral
            }
        };
        let mut out = Vec::new();
        let mut s = 0;
        while s + k <= v.len() {
            let w: Vec<MoodClass> = v[s..s + k].iter().map(|&x| band(x)).collect();
            let d = v[s + k - 1] - v[s];
            let delta = if d > 0 {
                Positive
            } else if d < 0 {
                Negative
            } else {
                Neutral
            };
            out.push((s, oracle_mode(&w), delta));
            s += stride;
        }
        out
    }

    #[test]
    fn banding_boundaries() {
        assert_eq!(mood_of_valence(5).unwrap(), Positive);
        assert_eq!(mood_of_valence(4).unwrap(), Positive);
        assert_eq!(mood_of_valence(10).unwrap(), Positive);
        assert_eq!(mood_of_valence(3).unwrap(), Neutral);
        assert_eq!(mood_of_valence(-3).unwrap(), Neutral);
        assert_eq!(mood_of_valence(0).unwrap(), Neutral);
        assert_eq!(mood_of_valence(-4).unwrap(), Negative);
        assert_eq!(mood_of_valence(-10).unwrap(), Negative);
        assert!(mood_of_valence(11).is_err());
        assert!(mood_of_valence(-11).is_err());
    }

    #[test]
    fn mode_examples() {
        assert_eq!(chunk_mood_label(&[Positive, Positive, Neutral, Neutral, Neutral]).unwrap(), Neutral);
        assert_eq!(chunk_mood_label(&[Positive; 5]).unwrap(), Positive);
        assert_eq!(
            chunk_mood_label(&[Positive, Positive, Neutral, Neutral, Negative]).unwrap(),
            Neutral
        );
        assert!(chunk_mood_label(&[]).is_err());
    }

    #[test]
    fn mode_matches_tie_enumerator_on_all_sequences() {
        let mut ties = 0;
        for code in 0..3usize.pow(5) {
            let mut c = code;
            let frames: Vec<MoodClass> = (0..5)
                .map(|_| {
                    let m = MoodClass::from_index(c % 3).unwrap();
                    c /= 3;
                    m
                })
                .collect();
            let mut counts = [0; 3];
            frames.iter().for_each(|f| counts[f.index()] += 1);
            if counts.iter().filter(|&&n| n == *counts.iter().max().unwrap()).count() > 1 {
                ties += 1;
            }
            assert_eq!(chunk_mood_label(&frames).unwrap(), oracle_mode(&frames), "{frames:?}");
        }
        assert!(ties > 0);
    }

    #[test]
    fn delta_examples() {
        let v = [-2, -3, -3, -4, -4];
        assert_eq!(delta_label(&v, 4, 5).unwrap(), Negative);
        assert_eq!(delta_label(&[2; 5], 4, 5).unwrap(), Neutral);
        assert_eq!(delta_label(&[-10, 0, 0, 0, 10], 4, 5).unwrap(), Positive);
        assert!(delta_label(&v, 3, 5).is_err());
        assert!(delta_label(&[0, 11, 0, 0, 0], 4, 5).is_err());
    }

    #[test]
    fn chunk_counts() {
        let cfg = ChunkingConfig::default();
        assert_eq!(make_chunks(&track(vec![0; 10]), &cfg).unwrap().chunks.len(), 6);
        assert_eq!(make_chunks(&track(vec![0; 145]), &cfg).unwrap().chunks.len(), 141);
        let strided = ChunkingConfig { window_k: 5, stride: 2 };
        assert_eq!(make_chunks(&track(vec![0; 10]), &strided).unwrap().chunks.len(), 3);
        let short = make_chunks(&track(vec![0; 4]), &cfg).unwrap();
        assert!(short.chunks.is_empty());
        assert!(short.diagnostic.unwrap().contains("vid"));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(ChunkingConfig { window_k: 1, stride: 1 }.validate().is_err());
        assert!(ChunkingConfig { window_k: 5, stride: 0 }.validate().is_err());
    }

    #[test]
    fn oracle_on_all_three_frame_windows() {
        // Every 3-frame valence sequence on a grid covering all bands and both boundaries.
        let grid = [-10, -5, -4, -3, -1, 0, 2, 3, 4, 7, 10];
        let cfg = ChunkingConfig { window_k: 3, stride: 1 };
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let v = vec![a, b, c];
                    let got = make_chunks(&track(v.clone()), &cfg).unwrap().chunks;
                    let want = oracle_chunks(&v, 3, 1);
                    assert_eq!(got.len(), 1);
                    assert_eq!((got[0].mood_label, got[0].delta_label), (want[0].1, want[0].2));
                }
            }
        }
    }

    #[test]
    fn class_encoding_round_trips() {
        for c in MoodClass::ALL {
            assert_eq!(MoodClass::from_value(c.value()), Some(c));
            assert_eq!(c.to_string().parse::<MoodClass>().unwrap(), c);
        }
        assert!(MoodClass::try_from(2i8).is_err());
    }

    fn valences(max_len: usize) -> impl Strategy<Value = Vec<i32>> {
        proptest::collection::vec(-10i32..=10, 5..max_len)
    }

    proptest! {
        #[test]
        fn matches_oracle(v in valences(40), stride in 1usize..4) {
            let cfg = ChunkingConfig { window_k: 5, stride };
            let got = make_chunks(&track(v.clone()), &cfg).unwrap().chunks;
            let want = oracle_chunks(&v, 5, stride);
            prop_assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                prop_assert_eq!((g.start_frame, g.mood_label, g.delta_label), *w);
            }
        }

        #[test]
        fn prefix_shifts_start_frames(v in valences(30), p in 1usize..10, fill in -10i32..=10) {
            let cfg = ChunkingConfig::default();
            let base = make_chunks(&track(v.clone()), &cfg).unwrap().chunks;
            let mut shifted_v = vec![fill; p];
            shifted_v.extend(&v);
            let shifted = make_chunks(&track(shifted_v), &cfg).unwrap().chunks;
            prop_assert_eq!(shifted.len(), base.len() + p);
            for b in &base {
                let s = shifted.iter().find(|c| c.start_frame == b.start_frame + p).unwrap();
                prop_assert_eq!((s.mood_label, s.delta_label), (b.mood_label, b.delta_label));
            }
        }

        #[test]
        fn uniform_band_windows_take_the_band(v in proptest::collection::vec(4i32..=10, 5..6)) {
            let c = &make_chunks(&track(v.clone()), &ChunkingConfig::default()).unwrap().chunks[0];
            prop_assert_eq!(c.mood_label, Positive);
            let neg: Vec<i32> = v.iter().map(|x| -x).collect();
            let c = &make_chunks(&track(neg), &ChunkingConfig::default()).unwrap().chunks[0];
            prop_assert_eq!(c.mood_label, Negative);
            let neu: Vec<i32> = v.iter().map(|x| x - 7).collect();
            let c = &make_chunks(&track(neu), &ChunkingConfig::default()).unwrap().chunks[0];
            prop_assert_eq!(c.mood_label, Neutral);
        }

        #[test]
        fn delta_is_antisymmetric(v in proptest::collection::vec(-10i32..=10, 2..12)) {
            let k = v.len();
            let mut r = v.clone();
            r.reverse();
            prop_assert_eq!(delta_label(&r, k - 1, k).unwrap(), delta_label(&v, k - 1, k).unwrap().negate());
        }
    }
}
