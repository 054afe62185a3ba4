//! JSON-lines files: the labelled-chunk manifest and prediction dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{AppError, IoContext, Result};

pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(&out).at(path)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AppError::data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use moodshift_core::labels::LabeledChunk;
    use moodshift_core::MoodClass;

    #[test]
    fn chunk_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let rows = vec![LabeledChunk {
            video_id: "v".into(),
            subject_id: "s".into(),
            start_frame: 3,
            mood_label: MoodClass::Negative,
            delta_label: MoodClass::Positive,
        }];
        write_jsonl(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"mood_label\":-1") && text.contains("\"delta_label\":1"), "{text}");
        assert_eq!(read_jsonl::<LabeledChunk>(&p).unwrap(), rows);
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "{}\n").unwrap();
        let err = read_jsonl::<LabeledChunk>(&p).unwrap_err();
        assert!(err.message.contains(":1:"));
    }
}
