use thiserror::Error;

/// Crate-wide error type. Variant names are stable identifiers: the CLI
/// prints them verbatim so scripts can match on construction failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("OnHyperplane: point lies within {tol} of the hyperplane (value {value})")]
    OnHyperplane { value: f64, tol: f64 },

    #[error("ZeroNormal: hyperplane normal has no component larger than {0}")]
    ZeroNormal(f64),

    #[error("DegenerateData: calibration point {index} lies on the separating hyperplane")]
    DegenerateData { index: usize },

    #[error("SingularBundle: |det| = {det:.3e} is below the nonsingularity floor {floor:.3e}")]
    SingularBundle { det: f64, floor: f64 },

    #[error("DimensionMismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("ParseError: {context}: {message}")]
    ParseError { context: String, message: String },

    #[error("InvariantViolation: {0}")]
    InvariantViolation(String),

    #[error("NotThreeLayer: network has {0} layers, need exactly one hidden layer plus output")]
    NotThreeLayer(usize),

    #[error("CalibrationOnSplit: point {index} lies on the split of node {node}")]
    CalibrationOnSplit { index: usize, node: usize },

    #[error("LabelMismatch: point {index} routes to label {routed} but is labeled {given}")]
    LabelMismatch { index: usize, routed: u8, given: u8 },

    #[error("BundleFailure: {0}")]
    BundleFailure(String),

    #[error("InconsistentDims: {0}")]
    InconsistentDims(String),

    #[error("AmbiguousForest: {claims} trees claim the point")]
    AmbiguousForest { claims: usize },

    #[error("ParamsTooLoose: {0}")]
    ParamsTooLoose(String),

    #[error("PlateauGainFailure: {0}")]
    PlateauGainFailure(String),

    #[error("OverlappingCells: cells {a} and {b} have overlapping interiors")]
    OverlappingCells { a: usize, b: usize },

    #[error("EmptyDomain: no sample points fall inside the function domain")]
    EmptyDomain,

    #[error("UnsupportedActivation: {0}")]
    UnsupportedActivation(String),

    #[error("DomainMismatch: {0}")]
    DomainMismatch(String),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn name(&self) -> &'static str {
        match self {
            Error::OnHyperplane { .. } => "OnHyperplane",
            Error::ZeroNormal(_) => "ZeroNormal",
            Error::DegenerateData { .. } => "DegenerateData",
            Error::SingularBundle { .. } => "SingularBundle",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ParseError { .. } => "ParseError",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::NotThreeLayer(_) => "NotThreeLayer",
            Error::CalibrationOnSplit { .. } => "CalibrationOnSplit",
            Error::LabelMismatch { .. } => "LabelMismatch",
            Error::BundleFailure(_) => "BundleFailure",
            Error::InconsistentDims(_) => "InconsistentDims",
            Error::AmbiguousForest { .. } => "AmbiguousForest",
            Error::ParamsTooLoose(_) => "ParamsTooLoose",
            Error::PlateauGainFailure(_) => "PlateauGainFailure",
            Error::OverlappingCells { .. } => "OverlappingCells",
            Error::EmptyDomain => "EmptyDomain",
            Error::UnsupportedActivation(_) => "UnsupportedActivation",
            Error::DomainMismatch(_) => "DomainMismatch",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
