//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input file or payload could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Parsed data violates a structural invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A category outside the five observable labels was supplied.
    #[error("invalid category: {0}")]
    InvalidCategory(String),

    /// A record references an item id not present in the governing bank.
    #[error("unknown item id {0}")]
    UnknownItem(u32),

    /// Two records target the same (respondent, item) cell.
    #[error("duplicate cell for respondent {respondent} item {item_id}")]
    DuplicateCell { respondent: String, item_id: u32 },

    /// No records were found in the input.
    #[error("no response records in input")]
    EmptyData,

    /// A rate key has no informative cells.
    #[error("group {0} has no non-missing cells")]
    EmptyGroup(String),

    /// The classifier endpoint did not answer within the retry budget.
    #[error("endpoint {url} unreachable after {attempts} attempt(s): {last_error}")]
    EndpointUnreachable {
        url: String,
        attempts: u32,
        last_error: String,
    },

    /// The classifier reply was not one of the five labels.
    #[error("unparseable classifier label: {0:?}")]
    UnparseableLabel(String),

    /// Raw text was empty after trimming.
    #[error("empty text")]
    EmptyText,

    /// Every row of a mapping batch failed.
    #[error("all {0} rows of the batch failed")]
    BatchFailed(usize),

    /// A response pattern carries no informative cells.
    #[error("all cells missing")]
    AllMissing,

    /// Quadrature grid specification rejected.
    #[error("invalid grid spec: {0}")]
    InvalidGridSpec(String),

    /// Too little data to calibrate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Every submitted item has zero response variance.
    #[error("all items have zero response variance")]
    DegenerateMatrix,

    /// Fit statistic undefined (fewer than 3 cells).
    #[error("fit statistic undefined: fewer than 3 cells")]
    UndefinedFit,

    /// Scores from different calibrations cannot be compared.
    #[error("scale mismatch: {expected} vs {found}")]
    ScaleMismatch { expected: String, found: String },

    /// DIF needs at least two groups with enough informative respondents.
    #[error("insufficient group data: {0}")]
    InsufficientGroupData(String),

    /// Simulation specification rejected.
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse(_) => "parse",
            Error::Validation(_) => "validation",
            Error::InvalidCategory(_) => "invalid_category",
            Error::UnknownItem(_) => "unknown_item",
            Error::DuplicateCell { .. } => "duplicate_cell",
            Error::EmptyData => "empty_data",
            Error::EmptyGroup(_) => "empty_group",
            Error::EndpointUnreachable { .. } => "endpoint_unreachable",
            Error::UnparseableLabel(_) => "unparseable_label",
            Error::EmptyText => "empty_text",
            Error::BatchFailed(_) => "batch_failed",
            Error::AllMissing => "all_missing",
            Error::InvalidGridSpec(_) => "invalid_grid_spec",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateMatrix => "degenerate_matrix",
            Error::UndefinedFit => "undefined_fit",
            Error::ScaleMismatch { .. } => "scale_mismatch",
            Error::InsufficientGroupData(_) => "insufficient_group_data",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Io(_) => "io",
        }
    }
}
