use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::OpKind;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("tensor of shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op:?}: shape mismatch {shapes:?} ({detail})")]
    ShapeMismatch {
        op: OpKind,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("parameter `{0}` is not present in the store")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, graph declares {declared:?}")]
    ParamShape {
        name: String,
        declared: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op:?} produced a non-finite value")]
    NonFinite { op: OpKind },
    #[error("probability row {row} sums to {sum}")]
    ProbabilityRow { row: usize, sum: f64 },
    #[error("label {value} at index {index} is not a class index")]
    InvalidLabel { index: usize, value: f64 },
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("gradient for `{param}` has shape {grad:?}, parameter has {param_shape:?}")]
    GradientShape {
        param: String,
        grad: Vec<usize>,
        param_shape: Vec<usize>,
    },
    #[error("gradient refers to unknown parameter `{0}`")]
    UnknownParam(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a KTNSR checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("invalid manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor `{name}`: {detail}")]
    Layout { name: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum CodingError {
    #[error("slice is empty")]
    EmptySlice,
    #[error("slice buffer of {len} values does not match {width}x{height}")]
    NotTwoD {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("image set is empty")]
    EmptySet,
    #[error("channel {channel} is constant; standard deviation is zero")]
    ConstantChannel { channel: usize },
    #[error("image has {found} channels, stats have {expected}")]
    ChannelCount { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic: expected KVOL0001")]
    BadMagic,
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("extent mismatch: sidecar dims {dims:?} describe {expected} voxels, payload holds {found}")]
    ExtentMismatch {
        dims: [usize; 3],
        expected: usize,
        found: usize,
    },
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("sidecar json: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("clinical csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("feature row {row} has {found} values, expected {expected}")]
    FeatureWidth {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite feature at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("every feature has zero variance")]
    NoUsableFeature,
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("both classes must be present")]
    SingleClass,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("sample has zero variance")]
    ZeroVariance,
    #[error("paired differences are constant; t statistic undefined")]
    ConstantDifferences,
    #[error("{0}")]
    InvalidPlan(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("{what} = {value} is outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("sweep step {0} must lie in (0, 1]")]
    BadStep(f64),
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: StatsError },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("training set contains a single class")]
    SingleClass,
    #[error("train and validation sets share subject {0}")]
    Overlap(String),
    #[error("feature width {found} does not match head input {expected}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("invalid stream config: {0}")]
    Config(String),
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config: {0}")]
    Config(String),
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<Error> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
