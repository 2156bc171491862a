use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("file truncated: needed {needed} bytes, {available} available")]
    TruncatedFile { needed: usize, available: usize },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("product of dims {0:?} exceeds addressable size")]
    DimOverflow(Vec<u64>),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("scatterer at ({x_m:.4e}, {z_m:.4e}) m echoes at sample {sample:.1}, past the last sample {last}")]
    OutOfField { x_m: f64, z_m: f64, sample: f64, last: usize },

    #[error("apodization weights sum to zero")]
    ZeroWeightSum,
    #[error("covariance not positive definite at pixel ({row}, {col})")]
    SingularCovariance { row: usize, col: usize },
    #[error("images do not share a pixel grid")]
    GridMismatch,
    #[error("empty image list")]
    EmptyList,
    #[error("image is zero everywhere")]
    AllZeroImage,

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("prune ratio {0} outside [0, 1)")]
    RatioOutOfRange(f64),
    #[error("mask does not match weights: {0}")]
    MaskMismatch(String),

    #[error("calibration needs at least one sample input")]
    EmptyCalibration,
    #[error("quantization plan has no scale for `{0}`")]
    MissingScale(String),

    #[error("layer needs {needed} bytes of BRAM, budget is {budget}")]
    BramOverflow { needed: u64, budget: u64 },

    #[error("profile has no positive peak")]
    NoPeak,
    #[error("no half-maximum crossing on the {0} side of the peak")]
    NoCrossing(&'static str),
    #[error("region `{0}` contains no pixels")]
    EmptyRegion(String),
    #[error("mean intensity of region `{0}` is zero")]
    ZeroMean(String),
    #[error("both regions have zero variance")]
    ZeroVariance,
    #[error("depth {0} m outside the pixel grid")]
    DepthOutOfRange(f64),
}
