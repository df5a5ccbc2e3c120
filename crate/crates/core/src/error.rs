//! Crate-wide error type.

use std::fmt;

/// Errors produced by tensor ops, the data pipeline, and training.
#[derive(Debug)]
pub enum Error {
    /// Elementwise or matrix op received incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Reduction axis out of range for the operand rank.
    BadAxis { axis: usize, rank: usize },
    /// Kernel does not fit the padded input.
    KernelTooLarge,
    /// `backward` called on a non-scalar value.
    NonScalarLoss { shape: Vec<usize> },
    /// Class label outside `[0, n_classes)`.
    LabelOutOfRange { label: usize, n_classes: usize },
    /// Optimizer saw a NaN/inf gradient for the named parameter.
    NonFiniteGrad { param: String },
    /// A loss component evaluated to NaN/inf.
    NonFiniteLoss { component: &'static str },
    /// Unknown network architecture name.
    UnknownArch(String),
    /// Sequence step count differs from what the network was built for.
    StepCountMismatch { expected: usize, got: usize },
    /// Conditional-expectation solve has no root for the requested ratio.
    Infeasible { min_ratio: f64 },
    /// Invalid mixup policy or schedule argument.
    BadPolicy(String),
    /// Mixed pair has different class labels.
    ClassMismatch { appearance: u32, event: u32 },
    /// Replacement point outside `{1..T+1}`.
    BadReplacementPoint { t_star: usize, t_len: usize },
    /// Sample file does not start with the expected magic bytes.
    BadMagic,
    /// Sample or checkpoint file has an unsupported format version.
    VersionMismatch { expected: u32, got: u32 },
    /// File payload shorter than the header promises.
    Truncated,
    /// Header dimensions overflow or disagree with the payload size.
    DimensionOverflow,
    /// Malformed field inside an otherwise well-formed container.
    BadField(&'static str),
    /// Event coordinates outside the target frame.
    EventOutOfBounds { x: u16, y: u16, w: u16, h: u16 },
    /// Event timestamps not sorted ascending.
    UnsortedEvents,
    /// A class is present in only one modality.
    UnpairedClass { class: u32 },
    /// Empty or degenerate input where data is required.
    EmptyInput(&'static str),
    /// Configuration file or value rejected.
    Config(String),
    /// Training aborted mid-run; carries the epoch/batch where it happened.
    Abort {
        epoch: usize,
        batch: usize,
        source: Box<Error>,
    },
    /// Checkpoint does not match the requested network or data.
    CheckpointMismatch(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::BadAxis { axis, rank } => write!(f, "axis {axis} out of range for rank {rank}"),
            Error::KernelTooLarge => write!(f, "kernel larger than padded input"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::LabelOutOfRange { label, n_classes } => {
                write!(f, "label {label} out of range for {n_classes} classes")
            }
            Error::NonFiniteGrad { param } => write!(f, "non-finite gradient for parameter {param}"),
            Error::NonFiniteLoss { component } => write!(f, "non-finite loss component {component}"),
            Error::UnknownArch(name) => write!(f, "unknown architecture {name:?}"),
            Error::StepCountMismatch { expected, got } => {
                write!(f, "sequence has {got} steps, network expects {expected}")
            }
            Error::Infeasible { min_ratio } => write!(f, "infeasible: min ratio {min_ratio}"),
            Error::BadPolicy(msg) => write!(f, "bad mixup policy: {msg}"),
            Error::ClassMismatch { appearance, event } => {
                write!(f, "class mismatch: appearance {appearance} vs event {event}")
            }
            Error::BadReplacementPoint { t_star, t_len } => {
                write!(f, "replacement point {t_star} outside 1..={}", t_len + 1)
            }
            Error::BadMagic => write!(f, "bad magic bytes"),
            Error::VersionMismatch { expected, got } => {
                write!(f, "format version {got}, expected {expected}")
            }
            Error::Truncated => write!(f, "truncated payload"),
            Error::DimensionOverflow => write!(f, "header dimensions overflow payload"),
            Error::BadField(what) => write!(f, "malformed field: {what}"),
            Error::EventOutOfBounds { x, y, w, h } => {
                write!(f, "event at ({x},{y}) outside {w}x{h} frame")
            }
            Error::UnsortedEvents => write!(f, "event timestamps not sorted ascending"),
            Error::UnpairedClass { class } => {
                write!(f, "class {class} present in only one modality")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Abort { epoch, batch, source } => {
                write!(f, "epoch {epoch} batch {batch}: {source}")
            }
            Error::CheckpointMismatch(msg) => write!(f, "checkpoint mismatch: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Abort { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
