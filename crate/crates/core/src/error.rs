use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({x}, {y}) outside {lattice} bounds {width}x{height}")]
    OutOfBounds {
        lattice: &'static str,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("undefined Davies-Bouldin index: cluster {0} is empty")]
    UndefinedIndex(usize),

    #[error("no positives for concept {concept} / part {part}")]
    EmptyModel { concept: usize, part: usize },

    #[error("training data error for concept {concept} / part {part}: {msg}")]
    TrainingData {
        concept: usize,
        part: usize,
        msg: String,
    },

    #[error("average precision undefined without ground truth")]
    UndefinedAp,

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("occlusion infeasible after {attempts} attempts: {msg}")]
    OcclusionInfeasible { attempts: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model in {dir} is stale: config hash {found} != {expected}")]
    Stale {
        dir: PathBuf,
        found: String,
        expected: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Wraps `self` with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            Error::Argument(_) | Error::Config(_) | Error::Stale { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Json { .. } | Error::Format { .. } => true,
            _ => false,
        }
    }
}
