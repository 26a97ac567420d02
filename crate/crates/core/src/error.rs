use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown backbone provider `{0}`")]
    UnknownProvider(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate affine (|det| = {det:e})")]
    DegenerateAffine { det: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("every loss term was skipped at level {level}")]
    AllTermsSkipped { level: usize },

    #[error("non-finite loss at level {level}, epoch {epoch}")]
    NonFiniteLoss { level: usize, epoch: usize },

    #[error("class id {class_id} out of range for {classes} classes")]
    ClassOutOfRange { class_id: usize, classes: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing ground truth for query {0}")]
    MissingGroundTruth(usize),

    #[error("ingestion error in {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("episode {episode}: {source}")]
    Episode {
        episode: String,
        #[source]
        source: Box<Error>,
    },

    #[error("archive error: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Attaches an episode id to an error raised inside a pipeline stage.
    pub fn in_episode(self, episode: impl Into<String>) -> Self {
        Error::Episode {
            episode: episode.into(),
            source: Box::new(self),
        }
    }
}
