//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CasaError>;

#[derive(Debug, Error)]
pub enum CasaError {
    /// Shapes that must agree do not. `left`/`right` name both offenders.
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    DimensionMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes (sample {sample})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        sample: usize,
    },

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    /// A caller violated an operation contract (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("task policy error: {0}")]
    Policy(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {message}")]
    TrainingDiverged { step: u64, message: String },

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Pipeline failure wrapper naming the stage, task and seed it happened in.
    #[error("experiment failed in {stage} (task {task:?}, seed {seed:?}): {source}")]
    Experiment {
        stage: String,
        task: Option<usize>,
        seed: Option<u64>,
        #[source]
        source: Box<CasaError>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {message}")]
    Json { path: String, message: String },
}

impl CasaError {
    /// Wrap an error with experiment context (pipeline stage, task id, seed).
    pub fn in_experiment(
        self,
        stage: &str,
        task: Option<usize>,
        seed: Option<u64>,
    ) -> CasaError {
        CasaError::Experiment {
            stage: stage.to_string(),
            task,
            seed,
            source: Box::new(self),
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> CasaError {
        CasaError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn json(path: &std::path::Path, err: impl std::fmt::Display) -> CasaError {
        CasaError::Json {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
