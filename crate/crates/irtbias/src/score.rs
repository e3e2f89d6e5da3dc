//! Respondent scoring on a fitted scale and differential item functioning.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::calibrate::{
    calibrate, calibrate_with_starts, CalibrationConfig, CalibrationInput, CalibrationResult,
};
use crate::error::{Error, Result};
use crate::model::{ItemParams, QuadratureGrid};
use crate::responses::{BinaryMatrix, OrdinalMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoringMethod {
    #[serde(rename = "mle")]
    Mle,
    #[serde(rename = "eap")]
    Eap,
}

impl std::fmt::Display for ScoringMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoringMethod::Mle => f.write_str("mle"),
            ScoringMethod::Eap => f.write_str("eap"),
        }
    }
}

/// One respondent's estimated trait score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbilityEstimate {
    pub respondent_id: String,
    pub theta: f64,
    pub se: f64,
    pub method: ScoringMethod,
    pub at_bound: bool,
    /// Non-MISSING cells behind the estimate.
    pub n_informative: usize,
    /// Tag of the calibration this score lives on.
    pub scale_id: String,
}

/// Likelihood-ratio DIF result for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct DifReport {
    pub item_id: u32,
    pub lr_statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Per-group parameters of the tested item from the unconstrained fit.
    pub group_params: BTreeMap<String, ItemParams>,
}

fn row_loglik(items: &[ItemParams], pattern: &[Option<u8>], theta: f64) -> f64 {
    let mut sum = 0.0;
    for (params, cell) in items.iter().zip(pattern) {
        if let Some(k) = *cell {
            let probs = params.probs(theta);
            sum += probs[k as usize].max(crate::model::PROB_FLOOR).ln();
        }
    }
    sum
}

/// First derivative and observed information of the row log-likelihood.
fn row_score_info(items: &[ItemParams], pattern: &[Option<u8>], theta: f64) -> (f64, f64) {
    let mut d1 = 0.0;
    let mut info = 0.0;
    for (params, cell) in items.iter().zip(pattern) {
        if let Some(k) = *cell {
            let probs = params.probs(theta);
            let alpha = params.alpha();
            let mean: f64 = probs.iter().enumerate().map(|(c, p)| c as f64 * p).sum();
            let second: f64 = probs
                .iter()
                .enumerate()
                .map(|(c, p)| (c * c) as f64 * p)
                .sum();
            let var = (second - mean * mean).max(0.0);
            d1 += alpha * (k as f64 - mean);
            info += alpha * alpha * var;
        }
    }
    (d1, info)
}

/// Estimate θ for one aligned response pattern.
///
/// MLE: golden-section search on `[-bound, bound]` refined by Newton steps
/// (tolerance 1e-6), with `at_bound` flagged within 1e-3 of either bound and
/// `se` from observed information. EAP: posterior mean and sd over the grid
/// under the N(0,1) prior. All-MISSING patterns return the prior-only EAP
/// (θ=0, se=1) regardless of the requested method.
pub fn estimate_theta(
    respondent_id: &str,
    pattern: &[Option<u8>],
    items: &[ItemParams],
    method: ScoringMethod,
    grid: &QuadratureGrid,
    scale_id: &str,
) -> AbilityEstimate {
    debug_assert_eq!(pattern.len(), items.len());
    let n_informative = pattern.iter().flatten().count();
    if n_informative == 0 {
        return AbilityEstimate {
            respondent_id: respondent_id.to_string(),
            theta: 0.0,
            se: 1.0,
            method: ScoringMethod::Eap,
            at_bound: false,
            n_informative: 0,
            scale_id: scale_id.to_string(),
        };
    }

    let bound = grid.bound();
    let (theta, se, at_bound) = match method {
        ScoringMethod::Mle => {
            let f = |theta: f64| row_loglik(items, pattern, theta);
            // golden-section bracket, then Newton polish
            let invphi = (5.0f64.sqrt() - 1.0) / 2.0;
            let (mut a, mut b) = (-bound, bound);
            let mut c = b - invphi * (b - a);
            let mut d = a + invphi * (b - a);
            let (mut fc, mut fd) = (f(c), f(d));
            while b - a > 1e-4 {
                if fc >= fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - invphi * (b - a);
                    fc = f(c);
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + invphi * (b - a);
                    fd = f(d);
                }
            }
            let mut theta = 0.5 * (a + b);
            for _ in 0..20 {
                let (d1, info) = row_score_info(items, pattern, theta);
                if info <= 0.0 {
                    break;
                }
                let step = (d1 / info).clamp(-0.5, 0.5);
                theta = (theta + step).clamp(-bound, bound);
                if step.abs() < 1e-6 {
                    break;
                }
            }
            let (_, info) = row_score_info(items, pattern, theta);
            let se = if info > 0.0 {
                1.0 / info.sqrt()
            } else {
                f64::INFINITY
            };
            (theta, se, theta.abs() >= bound - 1e-3)
        }
        ScoringMethod::Eap => {
            let lls: Vec<f64> = grid
                .nodes()
                .iter()
                .map(|&t| row_loglik(items, pattern, t))
                .collect();
            let max = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut post: Vec<f64> = lls
                .iter()
                .zip(grid.weights())
                .map(|(ll, w)| w * (ll - max).exp())
                .collect();
            let total: f64 = post.iter().sum();
            for p in &mut post {
                *p /= total;
            }
            let mean: f64 = post.iter().zip(grid.nodes()).map(|(p, t)| p * t).sum();
            let var: f64 = post
                .iter()
                .zip(grid.nodes())
                .map(|(p, t)| p * (t - mean) * (t - mean))
                .sum();
            (mean, var.sqrt(), false)
        }
    };

    AbilityEstimate {
        respondent_id: respondent_id.to_string(),
        theta,
        se,
        method,
        at_bound,
        n_informative,
        scale_id: scale_id.to_string(),
    }
}

/// Score every respondent of a matrix against a fitted calibration.
///
/// Patterns are aligned to the fitted items; dropped items are skipped and
/// ordinal codes pass through each item's collapse map.
pub fn score_matrix(
    result: &CalibrationResult,
    input: CalibrationInput,
    method: ScoringMethod,
) -> Result<Vec<AbilityEstimate>> {
    let grid = result.config.grid()?;
    let items: Vec<ItemParams> = result.items.iter().map(|i| i.params.clone()).collect();

    // per fitted item: source column and observed-code remap
    let (ids, n_resp): (&[u32], usize) = match input {
        CalibrationInput::Binary(m) => (&m.item_ids, m.respondents.len()),
        CalibrationInput::Ordinal(m) => (&m.item_ids, m.respondents.len()),
    };
    let mut columns = Vec::with_capacity(result.items.len());
    for item in &result.items {
        let col = ids
            .iter()
            .position(|&id| id == item.item_id)
            .ok_or_else(|| Error::Validation(format!("item {} not in matrix", item.item_id)))?;
        let remap: Option<[Option<u8>; 4]> = item.collapse_map.as_ref().map(|codes| {
            let mut remap = [None; 4];
            for (fitted, &code) in codes.iter().enumerate() {
                remap[code as usize] = Some(fitted as u8);
            }
            remap
        });
        columns.push((col, remap));
    }

    let rows: Vec<Vec<Option<u8>>> = (0..n_resp)
        .map(|r| {
            columns
                .iter()
                .map(|(col, remap)| {
                    let code = match input {
                        CalibrationInput::Binary(m) => m.cell(r, *col).map(u8::from),
                        CalibrationInput::Ordinal(m) => m.cell(r, *col),
                    };
                    match (code, remap) {
                        (Some(c), Some(map)) => map[c as usize],
                        (code, _) => code,
                    }
                })
                .collect()
        })
        .collect();

    let respondents: Vec<String> = match input {
        CalibrationInput::Binary(m) => m.respondents.iter().map(|r| r.id.clone()).collect(),
        CalibrationInput::Ordinal(m) => m.respondents.iter().map(|r| r.id.clone()).collect(),
    };

    Ok(rows
        .par_iter()
        .zip(&respondents)
        .map(|(pattern, id)| estimate_theta(id, pattern, &items, method, &grid, &result.scale_id))
        .collect())
}

/// Signed and absolute deviation between two scores on the same scale.
pub fn compare_scores(new: &AbilityEstimate, reference: &AbilityEstimate) -> Result<(f64, f64)> {
    if new.scale_id != reference.scale_id {
        return Err(Error::ScaleMismatch {
            expected: reference.scale_id.clone(),
            found: new.scale_id.clone(),
        });
    }
    let delta = new.theta - reference.theta;
    Ok((delta, delta.abs()))
}

/// Anchor-all-other-items likelihood-ratio DIF test for one item.
///
/// The constrained model shares the item across groups; the unconstrained
/// model splits it into per-group virtual columns (warm-started from the
/// constrained fit). `df` is the number of free parameters added.
pub fn dif_test(
    input: CalibrationInput,
    item_id: u32,
    cfg: &CalibrationConfig,
) -> Result<DifReport> {
    let (groups, col) = dif_precheck(input, item_id)?;

    let constrained = calibrate(input, cfg)?;
    let constrained_item = constrained
        .items
        .iter()
        .find(|i| i.item_id == item_id)
        .ok_or_else(|| {
            Error::InsufficientGroupData(format!("item {item_id} was dropped in the pooled fit"))
        })?;

    let max_id = match input {
        CalibrationInput::Binary(m) => m.item_ids.iter().max().copied().unwrap_or(0),
        CalibrationInput::Ordinal(m) => m.item_ids.iter().max().copied().unwrap_or(0),
    };
    let virtual_ids: BTreeMap<String, u32> = groups
        .iter()
        .enumerate()
        .map(|(g, label)| (label.clone(), max_id + 1 + g as u32))
        .collect();

    let mut starts = constrained.params_by_id();
    starts.remove(&item_id);
    for id in virtual_ids.values() {
        starts.insert(*id, constrained_item.params.clone());
    }

    let report = |unconstrained: CalibrationResult| -> Result<DifReport> {
        let free = |p: &ItemParams| p.to_vec().len();
        let mut group_params = BTreeMap::new();
        let mut added = 0usize;
        for (label, id) in &virtual_ids {
            if let Some(item) = unconstrained.items.iter().find(|i| i.item_id == *id) {
                added += free(&item.params);
                group_params.insert(label.clone(), item.params.clone());
            }
        }
        let df = added.saturating_sub(free(&constrained_item.params));
        if df == 0 {
            return Err(Error::InsufficientGroupData(
                "group split adds no free parameters".into(),
            ));
        }
        let lr = (2.0 * (unconstrained.marginal_loglik - constrained.marginal_loglik)).max(0.0);
        let chi = ChiSquared::new(df as f64).expect("df >= 1");
        let p_value = chi.sf(lr).clamp(0.0, 1.0);
        Ok(DifReport {
            item_id,
            lr_statistic: lr,
            df,
            p_value,
            group_params,
        })
    };

    match input {
        CalibrationInput::Binary(m) => {
            let split = split_binary(m, col, &virtual_ids)?;
            report(calibrate_with_starts(
                CalibrationInput::Binary(&split),
                cfg,
                &starts,
            )?)
        }
        CalibrationInput::Ordinal(m) => {
            let split = split_ordinal(m, col, &virtual_ids)?;
            report(calibrate_with_starts(
                CalibrationInput::Ordinal(&split),
                cfg,
                &starts,
            )?)
        }
    }
}

/// Check group sizes on the tested item; returns sorted group labels and the
/// tested column index.
fn dif_precheck(input: CalibrationInput, item_id: u32) -> Result<(Vec<String>, usize)> {
    let (respondents, ids) = match input {
        CalibrationInput::Binary(m) => (&m.respondents, &m.item_ids),
        CalibrationInput::Ordinal(m) => (&m.respondents, &m.item_ids),
    };
    let col = ids
        .iter()
        .position(|&id| id == item_id)
        .ok_or(Error::UnknownItem(item_id))?;

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (row, resp) in respondents.iter().enumerate() {
        let observed = match input {
            CalibrationInput::Binary(m) => m.cell(row, col).is_some(),
            CalibrationInput::Ordinal(m) => m.cell(row, col).is_some(),
        };
        if observed {
            *counts.entry(resp.group.as_str()).or_default() += 1;
        }
    }
    let groups: Vec<String> = counts
        .iter()
        .filter(|(_, &n)| n >= 10)
        .map(|(g, _)| g.to_string())
        .collect();
    if groups.len() < 2 {
        return Err(Error::InsufficientGroupData(format!(
            "need >= 2 groups with >= 10 observed responses on item {item_id}, found {}",
            groups.len()
        )));
    }
    Ok((groups, col))
}

fn split_binary(
    m: &BinaryMatrix,
    col: usize,
    virtual_ids: &BTreeMap<String, u32>,
) -> Result<BinaryMatrix> {
    let n = m.n_items();
    let mut item_ids: Vec<u32> = m
        .item_ids
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != col)
        .map(|(_, &id)| id)
        .collect();
    item_ids.extend(virtual_ids.values());
    let mut cells = Vec::with_capacity(m.respondents.len() * item_ids.len());
    for (row, resp) in m.respondents.iter().enumerate() {
        for c in 0..n {
            if c != col {
                cells.push(m.cell(row, c));
            }
        }
        for label in virtual_ids.keys() {
            cells.push(if &resp.group == label {
                m.cell(row, col)
            } else {
                None
            });
        }
    }
    BinaryMatrix::from_parts(m.respondents.clone(), item_ids, cells)
}

fn split_ordinal(
    m: &OrdinalMatrix,
    col: usize,
    virtual_ids: &BTreeMap<String, u32>,
) -> Result<OrdinalMatrix> {
    let n = m.n_items();
    let mut item_ids: Vec<u32> = m
        .item_ids
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != col)
        .map(|(_, &id)| id)
        .collect();
    item_ids.extend(virtual_ids.values());
    let mut cells = Vec::with_capacity(m.respondents.len() * item_ids.len());
    for (row, resp) in m.respondents.iter().enumerate() {
        for c in 0..n {
            if c != col {
                cells.push(m.cell(row, c));
            }
        }
        for label in virtual_ids.keys() {
            cells.push(if &resp.group == label {
                m.cell(row, col)
            } else {
                None
            });
        }
    }
    OrdinalMatrix::from_parts(m.respondents.clone(), item_ids, cells)
}
