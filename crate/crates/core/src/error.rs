use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("video {video_id}: frame {frame} has valence {value} outside [-10, 10]")]
    ValenceOutOfRange {
        video_id: String,
        frame: usize,
        value: i32,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("construction error: {0}")]
    Construction(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("planning error: {0}")]
    Planning(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
