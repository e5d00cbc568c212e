use std::io;

use thiserror::Error;

pub type Result<T, E = MpaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MpaError {
    #[error("vector has zero Euclidean norm")]
    ZeroNormVector,

    #[error("vector contains a non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("cannot build a prototype from an empty class")]
    EmptyClass,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("duplicate record key (class {class_id}, item {item_id}, view {view_id}, modality {modality})")]
    DuplicateRecord {
        class_id: u32,
        item_id: u32,
        view_id: u16,
        modality: u8,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("embedding provider violated its contract: {0}")]
    ProviderContractViolation(String),

    #[error("crop size {size} exceeds image bounds {width}x{height}")]
    CropTooLarge { size: u32, width: u32, height: u32 },

    #[error("class name is empty")]
    EmptyClassName,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("at least 2 classes are required, got {0}")]
    TooFewClasses(usize),

    #[error("label {label} outside [0, {n_classes})")]
    LabelRange { label: usize, n_classes: usize },

    #[error("non-finite loss during optimization at iteration {iteration}")]
    NumericalDivergence { iteration: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl MpaError {
    /// Stable machine-readable error class, used as the CLI error prefix.
    pub fn class(&self) -> &'static str {
        match self {
            MpaError::ZeroNormVector => "ZeroNormVector",
            MpaError::NonFinite { .. } => "NonFinite",
            MpaError::EmptyClass => "EmptyClass",
            MpaError::DimMismatch { .. } => "DimMismatch",
            MpaError::DuplicateRecord { .. } => "DuplicateRecord",
            MpaError::Format(_) => "FormatError",
            MpaError::Io(_) => "IoError",
            MpaError::ProviderUnavailable(_) => "ProviderUnavailable",
            MpaError::ProviderContractViolation(_) => "ProviderContractViolation",
            MpaError::CropTooLarge { .. } => "CropTooLarge",
            MpaError::EmptyClassName => "EmptyClassName",
            MpaError::EmptyInput(_) => "EmptyInput",
            MpaError::TooFewClasses(_) => "TooFewClasses",
            MpaError::LabelRange { .. } => "LabelRange",
            MpaError::NumericalDivergence { .. } => "NumericalDivergence",
            MpaError::InsufficientData(_) => "InsufficientData",
            MpaError::InvalidConfig(_) => "InvalidConfig",
        }
    }

    /// Process exit code: 2 usage, 3 data/format, 4 provider, 5 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            MpaError::InvalidConfig(_) | MpaError::EmptyClassName => 2,
            MpaError::ProviderUnavailable(_) | MpaError::ProviderContractViolation(_) => 4,
            MpaError::NumericalDivergence { .. }
            | MpaError::ZeroNormVector
            | MpaError::NonFinite { .. } => 5,
            _ => 3,
        }
    }
}
