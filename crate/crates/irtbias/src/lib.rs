//! Two-stage item response theory (IRT) analysis of survey-style LLM output.
//!
//! Stage 1 fits a two-parameter logistic model to response avoidance (did
//! the respondent take a position at all?); stage 2 fits a generalized
//! partial credit model to directionally coded agreement on the items that
//! were answered. Both stages share one EM calibration engine, one scoring
//! module, and one deterministic report format.
//!
//! Start with [`pipeline::run_two_stage_matrix`] for the whole flow, or
//! compose the layers directly: [`bank`] → [`responses`] → [`calibrate`] →
//! [`score`]. [`simulate`] generates synthetic matrices with known ground
//! truth for validation.

pub mod bank;
pub mod calibrate;
pub mod error;
pub mod mapper;
pub mod model;
pub mod pipeline;
pub mod responses;
pub mod score;
pub mod simulate;

pub use bank::{Item, ItemBank, ResponseCategory, Subscale};
pub use calibrate::{CalibrationConfig, CalibrationInput, CalibrationResult, FittedItem};
pub use error::{Error, Result};
pub use mapper::{MappedResponse, MapperConfig, MapperMode, RawCompletion};
pub use model::{GpcmParams, ItemParams, ModelKind, QuadratureGrid, TwoPlParams};
pub use pipeline::{BiasReport, GroupSummary, ItemReportRow, ReportScore, StageSection};
pub use responses::{
    BinaryMatrix, GroupBy, OrdinalMatrix, Respondent, ResponseMatrix, ResponseRecord,
};
pub use score::{AbilityEstimate, DifReport, ScoringMethod};
pub use simulate::{GroundTruth, GroupSpec, ItemGenSpec, RecoveryReport, SimSpec, StageRecovery};
