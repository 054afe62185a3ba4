//! TOML pipeline configuration. Command-line flags override every field.
//!
//! ```toml
//! seed = 7
//! output_root = "runs"
//!
//! [dataset]
//! dir = "data/synth"          # implies annotations.json, frames/, chunks.jsonl
//!
//! [chunking]
//! window_k = 5
//! stride = 1
//!
//! [model]
//! architecture = "2cnn"
//! attention = "spatial"
//!
//! [grid]
//! preset = "single"
//! learning_rates = [1e-3]
//! batch_sizes = [64]
//!
//! [train]
//! epochs = 50
//! patience = 10
//! ```

use std::path::{Path, PathBuf};

use moodshift_core::labels::ChunkingConfig;
use moodshift_core::synth::SyntheticDatasetSpec;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub output_root: Option<PathBuf>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub dataset: DatasetSection,
    pub chunking: Option<ChunkingConfig>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub dir: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub frames: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Category -> mood value (-1, 0, 1) for datasets labelled per video.
    pub mood_map: Option<PathBuf>,
    pub synthetic: Option<SyntheticDatasetSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Option<String>,
    pub attention: Option<String>,
    pub literal_product: Option<bool>,
    pub site: Option<String>,
    pub lstm_hidden: Option<usize>,
    pub dense_units: Option<usize>,
    /// `[height, width]` every frame is resized to.
    pub frame_size: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// `full` (every grid point) or `single`.
    pub preset: Option<String>,
    pub learning_rates: Option<Vec<f64>>,
    pub batch_sizes: Option<Vec<usize>>,
    pub dropout_rates: Option<Vec<f64>>,
    pub temperatures: Option<Vec<f64>>,
    pub alphas: Option<Vec<f64>>,
    pub t_squared: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub folds: Option<usize>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AppError::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| AppError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_example() {
        let cfg = PipelineConfig::parse(
            r#"
            seed = 7
            [dataset]
            dir = "d"
            [model]
            architecture = "2cnn"
            attention = "spatial"
            [grid]
            preset = "single"
            learning_rates = [1e-3]
            [train]
            epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.model.architecture.as_deref(), Some("2cnn"));
        assert_eq!(cfg.train.epochs, Some(3));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = PipelineConfig::parse("sede = 1").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
