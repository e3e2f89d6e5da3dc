//! Two-stage orchestration: ingest → avoidance fit → directional fit → report.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::ItemBank;
use crate::calibrate::{
    calibrate_binary, calibrate_ordinal, CalibrationConfig, CalibrationInput, CalibrationResult,
};
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::responses::{parse_response_csv, parse_response_jsonl, GroupBy, ResponseMatrix};
use crate::score::{score_matrix, AbilityEstimate, DifReport, ScoringMethod};

/// Items with |location| above this are flagged as the sensitive subset.
pub const DEFAULT_SENSITIVITY_THRESHOLD: f64 = 4.0;

/// One respondent's score as it appears in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportScore {
    pub respondent_id: String,
    pub group: String,
    pub theta: f64,
    pub se: f64,
    pub method: ScoringMethod,
    pub at_bound: bool,
    pub n_informative: usize,
    pub scale_id: String,
    /// True when the estimate comes from the prior alone (no observed cells).
    pub prior_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub mean_theta: f64,
    pub sd_theta: f64,
    /// Informative (non-prior-only) respondents behind the summary.
    pub n: usize,
}

/// One fitted stage: calibration, per-respondent scores, per-group summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSection {
    pub calibration: CalibrationResult,
    pub scores: Vec<ReportScore>,
    pub group_summaries: Vec<GroupSummary>,
}

/// Group-mean θ minus reference-group mean θ, per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDeviation {
    pub group: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub input_sha256: String,
    pub bank_version: String,
    pub bank_sha256: String,
    pub config: CalibrationConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_group: Option<String>,
}

/// Full output of a two-stage run. Stages that could not be fitted carry a
/// skip reason instead of a section; the rest of the report still stands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub provenance: Provenance,
    /// Avoidance rate per group.
    pub pna_rates: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1: Option<StageSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_skipped: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2: Option<StageSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_skipped: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deviations: Option<Vec<GroupDeviation>>,
}

impl BiasReport {
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    pub fn from_json(json: &str) -> Result<BiasReport> {
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("report json: {e}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run the full two-stage analysis on a response file (CSV or JSONL).
pub fn run_two_stage(
    responses: &Path,
    bank: Arc<ItemBank>,
    cfg: &CalibrationConfig,
    reference_group: Option<&str>,
) -> Result<BiasReport> {
    let bytes = std::fs::read(responses)?;
    let ext = responses.extension().and_then(|e| e.to_str()).unwrap_or("");
    let records = if matches!(ext, "jsonl" | "ndjson") {
        parse_response_jsonl(&bytes[..])?
    } else {
        parse_response_csv(&bytes[..])?
    };
    let matrix = ResponseMatrix::from_records(records, bank)?;
    run_two_stage_matrix(&matrix, cfg, reference_group, &sha256_hex(&bytes))
}

/// Stage-fitting failures that mark a stage skipped rather than aborting.
fn skip_reason(e: Error) -> Result<String> {
    match e {
        Error::InsufficientData(_) | Error::DegenerateMatrix | Error::EmptyData => {
            Ok(e.to_string())
        }
        other => Err(other),
    }
}

/// Run the two-stage analysis on an already-ingested matrix.
///
/// `input_digest` is recorded as provenance (the file hash when coming from
/// [`run_two_stage`], a caller-chosen tag otherwise).
pub fn run_two_stage_matrix(
    matrix: &ResponseMatrix,
    cfg: &CalibrationConfig,
    reference_group: Option<&str>,
    input_digest: &str,
) -> Result<BiasReport> {
    cfg.validate()?;
    if let Some(reference) = reference_group {
        if !matrix.respondents().iter().any(|r| r.group == reference) {
            return Err(Error::Validation(format!(
                "reference group {reference:?} not present in the data"
            )));
        }
    }

    let pna_rates = matrix.pna_rates(GroupBy::Group)?;

    let bin = matrix.binarize_pna();
    let mut cfg1 = cfg.clone();
    cfg1.model = ModelKind::TwoPl;
    let (stage1, stage1_skipped) = match calibrate_binary(&bin, &cfg1) {
        Ok(fit) => {
            let scores = score_matrix(&fit, CalibrationInput::Binary(&bin), ScoringMethod::Eap)?;
            (Some(build_section(fit, &scores, matrix)), None)
        }
        Err(e) => (None, Some(skip_reason(e)?)),
    };

    let ord = matrix.filter_answered();
    let mut cfg2 = cfg.clone();
    cfg2.model = ModelKind::Gpcm;
    let (stage2, stage2_skipped) = match calibrate_ordinal(&ord, &cfg2) {
        Ok(fit) => {
            let scores = score_matrix(&fit, CalibrationInput::Ordinal(&ord), ScoringMethod::Eap)?;
            (Some(build_section(fit, &scores, matrix)), None)
        }
        Err(e) => (None, Some(skip_reason(e)?)),
    };

    let deviations = reference_group
        .map(|reference| group_deviations(stage1.as_ref(), stage2.as_ref(), reference));

    let bank_json = matrix.bank().to_json();
    Ok(BiasReport {
        provenance: Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            input_sha256: input_digest.to_string(),
            bank_version: matrix.bank().version().to_string(),
            bank_sha256: sha256_hex(bank_json.as_bytes()),
            config: cfg.clone(),
            reference_group: reference_group.map(str::to_string),
        },
        pna_rates,
        stage1,
        stage1_skipped,
        stage2,
        stage2_skipped,
        deviations,
    })
}

fn build_section(
    calibration: CalibrationResult,
    estimates: &[AbilityEstimate],
    matrix: &ResponseMatrix,
) -> StageSection {
    let scores: Vec<ReportScore> = estimates
        .iter()
        .zip(matrix.respondents())
        .map(|(est, resp)| ReportScore {
            respondent_id: est.respondent_id.clone(),
            group: resp.group.clone(),
            theta: est.theta,
            se: est.se,
            method: est.method,
            at_bound: est.at_bound,
            n_informative: est.n_informative,
            scale_id: est.scale_id.clone(),
            prior_only: est.n_informative == 0,
        })
        .collect();

    let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for score in &scores {
        if !score.prior_only {
            by_group.entry(&score.group).or_default().push(score.theta);
        }
    }
    let group_summaries = by_group
        .into_iter()
        .map(|(group, thetas)| {
            let n = thetas.len();
            let mean = thetas.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                thetas.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            GroupSummary {
                group: group.to_string(),
                mean_theta: mean,
                sd_theta: var.sqrt(),
                n,
            }
        })
        .collect();

    StageSection {
        calibration,
        scores,
        group_summaries,
    }
}

fn group_deviations(
    stage1: Option<&StageSection>,
    stage2: Option<&StageSection>,
    reference: &str,
) -> Vec<GroupDeviation> {
    let mean_of = |section: Option<&StageSection>, group: &str| -> Option<f64> {
        section?
            .group_summaries
            .iter()
            .find(|s| s.group == group)
            .map(|s| s.mean_theta)
    };
    let ref1 = mean_of(stage1, reference);
    let ref2 = mean_of(stage2, reference);

    let mut groups: Vec<&str> = Vec::new();
    for section in [stage1, stage2].into_iter().flatten() {
        for summary in &section.group_summaries {
            if !groups.contains(&summary.group.as_str()) {
                groups.push(&summary.group);
            }
        }
    }
    groups.sort_unstable();

    groups
        .into_iter()
        .map(|group| GroupDeviation {
            group: group.to_string(),
            stage1: match (mean_of(stage1, group), ref1) {
                (Some(m), Some(r)) => Some(m - r),
                _ => None,
            },
            stage2: match (mean_of(stage2, group), ref2) {
                (Some(m), Some(r)) => Some(m - r),
                _ => None,
            },
        })
        .collect()
}

/// One row of the ranked item table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReportRow {
    pub item_id: u32,
    pub alpha: f64,
    pub location: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se_location: Option<f64>,
    /// |location| exceeds the sensitivity threshold.
    pub sensitive: bool,
}

/// Items ranked by |α| descending (ties by id); `sensitive` flags
/// |location| > `threshold`.
pub fn item_report(result: &CalibrationResult, threshold: f64) -> Vec<ItemReportRow> {
    let mut rows: Vec<ItemReportRow> = result
        .items
        .iter()
        .map(|item| {
            let finite = |s: Option<&f64>| s.copied().filter(|v| v.is_finite());
            let se_location = match item.params {
                crate::model::ItemParams::TwoPl(_) => finite(item.se.get(1)),
                crate::model::ItemParams::Gpcm(_) => None,
            };
            ItemReportRow {
                item_id: item.item_id,
                alpha: item.params.alpha(),
                location: item.params.location(),
                se_alpha: finite(item.se.first()),
                se_location,
                sensitive: item.params.location().abs() > threshold,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.alpha
            .abs()
            .partial_cmp(&a.alpha.abs())
            .unwrap()
            .then(a.item_id.cmp(&b.item_id))
    });
    rows
}

#[derive(Serialize)]
struct ScoreCsvRow<'a> {
    respondent_id: &'a str,
    group: &'a str,
    stage: &'a str,
    theta: f64,
    se: f64,
    method: &'a str,
    at_bound: bool,
    n_informative: usize,
    scale_id: &'a str,
}

/// Flat scores CSV covering whichever stages are present.
pub fn write_scores_csv<W: std::io::Write>(report: &BiasReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (stage, section) in [("stage1", &report.stage1), ("stage2", &report.stage2)] {
        if let Some(section) = section {
            for s in &section.scores {
                w.serialize(ScoreCsvRow {
                    respondent_id: &s.respondent_id,
                    group: &s.group,
                    stage,
                    theta: s.theta,
                    se: s.se,
                    method: match s.method {
                        ScoringMethod::Mle => "mle",
                        ScoringMethod::Eap => "eap",
                    },
                    at_bound: s.at_bound,
                    n_informative: s.n_informative,
                    scale_id: &s.scale_id,
                })
                .map_err(|e| Error::Parse(format!("scores csv: {e}")))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Ranked item table as CSV; absent standard errors serialize as empty cells.
pub fn write_item_report_csv<W: std::io::Write>(rows: &[ItemReportRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record([
        "item_id",
        "alpha",
        "location",
        "se_alpha",
        "se_location",
        "sensitive",
    ])
    .map_err(|e| Error::Parse(format!("item csv: {e}")))?;
    for row in rows {
        w.write_record([
            row.item_id.to_string(),
            row.alpha.to_string(),
            row.location.to_string(),
            fmt(row.se_alpha),
            fmt(row.se_location),
            row.sensitive.to_string(),
        ])
        .map_err(|e| Error::Parse(format!("item csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// DIF results as CSV (`item_id,lr,df,p`).
pub fn write_dif_csv<W: std::io::Write>(reports: &[DifReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["item_id", "lr", "df", "p"])
        .map_err(|e| Error::Parse(format!("dif csv: {e}")))?;
    for r in reports {
        w.write_record([
            r.item_id.to_string(),
            r.lr_statistic.to_string(),
            r.df.to_string(),
            r.p_value.to_string(),
        ])
        .map_err(|e| Error::Parse(format!("dif csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub group: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// Per-group θ histogram over fixed bins spanning [−bound, bound];
/// out-of-range values clamp into the edge bins. Prior-only scores excluded.
pub fn theta_histogram(section: &StageSection, bound: f64, bin_width: f64) -> Vec<HistogramRow> {
    let n_bins = ((2.0 * bound) / bin_width).round() as usize;
    let mut groups: Vec<&str> = section
        .scores
        .iter()
        .filter(|s| !s.prior_only)
        .map(|s| s.group.as_str())
        .collect();
    groups.sort_unstable();
    groups.dedup();

    let mut rows = Vec::with_capacity(groups.len() * n_bins);
    for group in groups {
        let mut counts = vec![0usize; n_bins];
        for s in section
            .scores
            .iter()
            .filter(|s| !s.prior_only && s.group == group)
        {
            let idx = (((s.theta + bound) / bin_width).floor() as isize)
                .clamp(0, n_bins as isize - 1) as usize;
            counts[idx] += 1;
        }
        for (i, count) in counts.into_iter().enumerate() {
            rows.push(HistogramRow {
                group: group.to_string(),
                bin_lo: -bound + i as f64 * bin_width,
                bin_hi: -bound + (i + 1) as f64 * bin_width,
                count,
            });
        }
    }
    rows
}

/// Histogram rows as CSV.
pub fn write_histogram_csv<W: std::io::Write>(rows: &[HistogramRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Parse(format!("histogram csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
