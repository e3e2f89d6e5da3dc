//! Marginal maximum likelihood item calibration via the Bock–Aitkin EM
//! algorithm, for both the binary avoidance stage and the ordinal bias stage.
//!
//! The E-step computes each respondent's posterior over a fixed quadrature
//! grid under a N(0,1) latent prior; the M-step updates every item
//! independently by Newton–Raphson with step-halving on the expected
//! complete-data log-likelihood. Per-respondent contributions are reduced in
//! a canonical order (sorted by respondent id), so results are bit-identical
//! across thread counts and row permutations.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    invert, item_expected_loglik, item_grad_hessian, make_grid, solve_linear, GpcmParams,
    ItemParams, ModelKind, QuadratureGrid, TwoPlParams,
};
use crate::responses::{BinaryMatrix, OrdinalMatrix, Respondent};

/// EM settings. `seed` is echoed for provenance; the default starting values
/// are deterministic and never consume randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub model: ModelKind,
    pub n_quadpoints: usize,
    pub bound: f64,
    pub max_em_cycles: usize,
    pub param_tol: f64,
    pub loglik_tol: f64,
    pub alpha_min: f64,
    pub allow_negative_discrimination: bool,
    pub seed: u64,
}

impl CalibrationConfig {
    pub fn new(model: ModelKind) -> Self {
        CalibrationConfig {
            model,
            n_quadpoints: 61,
            bound: 6.0,
            max_em_cycles: 500,
            param_tol: 1e-4,
            loglik_tol: 1e-6,
            alpha_min: 0.01,
            allow_negative_discrimination: false,
            seed: 0,
        }
    }

    pub fn grid(&self) -> Result<QuadratureGrid> {
        make_grid(self.n_quadpoints, self.bound)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_em_cycles == 0 {
            return Err(Error::Validation("max_em_cycles must be >= 1".into()));
        }
        if !(self.param_tol > 0.0 && self.loglik_tol > 0.0 && self.alpha_min > 0.0) {
            return Err(Error::Validation(
                "tolerances and alpha_min must be positive".into(),
            ));
        }
        self.grid().map(|_| ())
    }
}

/// One fitted item.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedItem {
    pub item_id: u32,
    pub params: ItemParams,
    /// Standard error per free parameter (alpha first); NaN when unstable.
    pub se: Vec<f64>,
    /// True when the information matrix was singular or non-positive.
    pub se_unstable: bool,
    /// Observed ordinal codes in fitted-category order, when categories were
    /// collapsed (GPCM only); `None` means identity.
    pub collapse_map: Option<Vec<u8>>,
}

/// An item excluded before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedItem {
    pub item_id: u32,
    pub reason: String,
}

/// Output of [`calibrate`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub model: ModelKind,
    pub config: CalibrationConfig,
    pub items: Vec<FittedItem>,
    pub dropped: Vec<DroppedItem>,
    pub marginal_loglik: f64,
    pub em_cycles: usize,
    pub converged: bool,
    pub fit_r2: f64,
    /// Marginal log-likelihood per EM cycle, ending at the final parameters.
    pub loglik_trace: Vec<f64>,
    /// Content hash of (model, fitted parameters); scores carry this tag so
    /// cross-scale comparisons can be rejected.
    pub scale_id: String,
}

/// Either stage's matrix, borrowed for calibration.
#[derive(Clone, Copy)]
pub enum CalibrationInput<'a> {
    Binary(&'a BinaryMatrix),
    Ordinal(&'a OrdinalMatrix),
}

impl<'a> From<&'a BinaryMatrix> for CalibrationInput<'a> {
    fn from(m: &'a BinaryMatrix) -> Self {
        CalibrationInput::Binary(m)
    }
}

impl<'a> From<&'a OrdinalMatrix> for CalibrationInput<'a> {
    fn from(m: &'a OrdinalMatrix) -> Self {
        CalibrationInput::Ordinal(m)
    }
}

/// Sparse, collapsed view of a matrix ready for EM.
struct Prepared {
    item_ids: Vec<u32>,
    n_cats: Vec<usize>,
    collapse: Vec<Option<Vec<u8>>>,
    dropped: Vec<DroppedItem>,
    /// Observed cells per respondent: (retained column, collapsed category).
    rows: Vec<Vec<(u32, u8)>>,
    respondents: Vec<Respondent>,
    /// Accumulation order: row indices sorted by respondent id.
    row_order: Vec<usize>,
}

fn prepare(input: CalibrationInput, model: ModelKind) -> Result<Prepared> {
    let (respondents, n_items) = match input {
        CalibrationInput::Binary(m) => {
            if model != ModelKind::TwoPl {
                return Err(Error::Validation(
                    "binary matrices calibrate under the 2pl model".into(),
                ));
            }
            (m.respondents.clone(), m.n_items())
        }
        CalibrationInput::Ordinal(m) => {
            if model != ModelKind::Gpcm {
                return Err(Error::Validation(
                    "ordinal matrices calibrate under the gpcm model".into(),
                ));
            }
            (m.respondents.clone(), m.n_items())
        }
    };
    let n_resp = respondents.len();

    // per original column: observed codes as u8 (binary: 0/1)
    let observed = |row: usize, col: usize| -> Option<u8> {
        match input {
            CalibrationInput::Binary(m) => m.cell(row, col).map(u8::from),
            CalibrationInput::Ordinal(m) => m.cell(row, col),
        }
    };
    let orig_item_id = |col: usize| -> u32 {
        match input {
            CalibrationInput::Binary(m) => m.item_ids[col],
            CalibrationInput::Ordinal(m) => m.item_ids[col],
        }
    };

    let mut item_ids = Vec::new();
    let mut n_cats = Vec::new();
    let mut collapse = Vec::new();
    let mut dropped = Vec::new();
    // per original column: retained index and code remap
    let mut col_map: Vec<Option<(u32, [u8; 4])>> = Vec::with_capacity(n_items);

    for col in 0..n_items {
        let mut seen = [false; 4];
        let mut any = false;
        for row in 0..n_resp {
            if let Some(code) = observed(row, col) {
                seen[code as usize] = true;
                any = true;
            }
        }
        let id = orig_item_id(col);
        if !any {
            dropped.push(DroppedItem {
                item_id: id,
                reason: "no observed responses".into(),
            });
            col_map.push(None);
            continue;
        }
        let codes: Vec<u8> = (0u8..4).filter(|&c| seen[c as usize]).collect();
        if codes.len() < 2 {
            dropped.push(DroppedItem {
                item_id: id,
                reason: "zero response variance".into(),
            });
            col_map.push(None);
            continue;
        }
        let mut remap = [0u8; 4];
        for (fitted, &code) in codes.iter().enumerate() {
            remap[code as usize] = fitted as u8;
        }
        let identity = match model {
            ModelKind::TwoPl => true,
            ModelKind::Gpcm => codes == [0, 1, 2, 3],
        };
        col_map.push(Some((item_ids.len() as u32, remap)));
        item_ids.push(id);
        n_cats.push(codes.len());
        collapse.push(if identity { None } else { Some(codes) });
    }

    if item_ids.is_empty() {
        return Err(Error::DegenerateMatrix);
    }
    if item_ids.len() < 2 {
        return Err(Error::InsufficientData(
            "at least 2 items with response variance required".into(),
        ));
    }

    let mut rows = Vec::with_capacity(n_resp);
    for row in 0..n_resp {
        let mut cells = Vec::new();
        for (col, mapping) in col_map.iter().enumerate() {
            if let (Some((retained, remap)), Some(code)) = (mapping, observed(row, col)) {
                cells.push((*retained, remap[code as usize]));
            }
        }
        rows.push(cells);
    }

    let informative = rows.iter().filter(|r| !r.is_empty()).count();
    if informative < 10 {
        return Err(Error::InsufficientData(format!(
            "at least 10 respondents with observed cells required, got {informative}"
        )));
    }

    let mut row_order: Vec<usize> = (0..n_resp).collect();
    row_order.sort_by(|&a, &b| respondents[a].id.cmp(&respondents[b].id));

    Ok(Prepared {
        item_ids,
        n_cats,
        collapse,
        dropped,
        rows,
        respondents,
        row_order,
    })
}

/// Deterministic starting values from observed category proportions.
fn starting_values(prep: &Prepared, model: ModelKind) -> Vec<ItemParams> {
    let n = prep.item_ids.len();
    let mut counts: Vec<[f64; 4]> = vec![[0.0; 4]; n];
    for row in &prep.rows {
        for &(col, cat) in row {
            counts[col as usize][cat as usize] += 1.0;
        }
    }
    let clamp = |x: f64| x.clamp(-3.0, 3.0);
    (0..n)
        .map(|i| {
            let k = prep.n_cats[i];
            let total: f64 = counts[i][..k].iter().sum();
            match model {
                ModelKind::TwoPl => {
                    let p = counts[i][1] / total;
                    ItemParams::TwoPl(TwoPlParams {
                        alpha: 1.0,
                        beta: clamp(-(p / (1.0 - p)).ln()),
                    })
                }
                ModelKind::Gpcm => {
                    let m = k - 1;
                    // center steps on the mean inverse-logistic of the
                    // cumulative proportions, spaced evenly in [-1, 1]
                    let mut center = 0.0;
                    for j in 1..k {
                        let tail: f64 = counts[i][j..k].iter().sum::<f64>() / total;
                        let tail = tail.clamp(1e-3, 1.0 - 1e-3);
                        center += clamp(-(tail / (1.0 - tail)).ln());
                    }
                    center /= m as f64;
                    let steps = (0..m)
                        .map(|j| {
                            let offset = if m == 1 {
                                0.0
                            } else {
                                -1.0 + 2.0 * j as f64 / (m - 1) as f64
                            };
                            center + offset
                        })
                        .collect();
                    ItemParams::Gpcm(GpcmParams { alpha: 1.0, steps })
                }
            }
        })
        .collect()
}

fn project(params: ItemParams, cfg: &CalibrationConfig) -> ItemParams {
    let mut v = params.to_vec();
    if !cfg.allow_negative_discrimination && v[0] < cfg.alpha_min {
        v[0] = cfg.alpha_min;
    }
    for x in v.iter_mut().skip(1) {
        *x = x.clamp(-30.0, 30.0);
    }
    params.from_vec(&v)
}

/// Per-item log category-probability tables: `tables[i][q * K + k]`.
fn log_prob_tables(params: &[ItemParams], nodes: &[f64]) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|p| {
            let k = p.n_categories();
            let mut table = Vec::with_capacity(nodes.len() * k);
            for &theta in nodes {
                for prob in p.probs(theta) {
                    table.push(prob.max(crate::model::PROB_FLOOR).ln());
                }
            }
            table
        })
        .collect()
}

/// One E-step: marginal log-likelihood plus expected per-item counts
/// (`counts[i][q][k]`), reduced in canonical row order.
fn e_step(
    prep: &Prepared,
    tables: &[Vec<f64>],
    n_cats: &[usize],
    grid: &QuadratureGrid,
    want_counts: bool,
) -> (f64, Vec<Vec<Vec<f64>>>) {
    let q = grid.len();
    let log_w: Vec<f64> = grid.weights().iter().map(|w| w.ln()).collect();

    let posteriors: Vec<Option<(f64, Vec<f64>)>> = prep
        .rows
        .par_iter()
        .map(|cells| {
            if cells.is_empty() {
                return None;
            }
            let mut log_post = log_w.clone();
            for &(col, cat) in cells {
                let table = &tables[col as usize];
                let k = n_cats[col as usize];
                for (node, lp) in log_post.iter_mut().enumerate() {
                    *lp += table[node * k + cat as usize];
                }
            }
            let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for lp in log_post.iter_mut() {
                *lp = (*lp - max).exp();
                total += *lp;
            }
            let marginal = max + total.ln();
            for lp in log_post.iter_mut() {
                *lp /= total;
            }
            Some((marginal, log_post))
        })
        .collect();

    let mut loglik = 0.0;
    let mut counts: Vec<Vec<Vec<f64>>> = if want_counts {
        n_cats.iter().map(|&k| vec![vec![0.0; k]; q]).collect()
    } else {
        Vec::new()
    };
    for &row in &prep.row_order {
        let Some((marginal, pi)) = &posteriors[row] else {
            continue;
        };
        loglik += marginal;
        if want_counts {
            for &(col, cat) in &prep.rows[row] {
                let item = &mut counts[col as usize];
                for (node, w) in pi.iter().enumerate() {
                    item[node][cat as usize] += w;
                }
            }
        }
    }
    (loglik, counts)
}

/// Newton–Raphson with step-halving on one item's expected log-likelihood.
/// Only accepts improving steps, so the enclosing EM is monotone.
fn m_step_item(
    params: &ItemParams,
    nodes: &[f64],
    counts: &[Vec<f64>],
    cfg: &CalibrationConfig,
) -> ItemParams {
    let mut current = project(params.clone(), cfg);
    let mut objective = item_expected_loglik(&current, nodes, counts);
    for _ in 0..50 {
        let (grad, hess) = item_grad_hessian(&current, nodes, counts);
        let grad_norm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if grad_norm < 1e-9 {
            break;
        }
        let neg_grad: Vec<f64> = grad.iter().map(|g| -g).collect();
        let Ok(delta) = solve_linear(&hess, &neg_grad) else {
            break;
        };
        let base = current.to_vec();
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let candidate_vec: Vec<f64> = base
                .iter()
                .zip(&delta)
                .map(|(p, d)| p + scale * d)
                .collect();
            let candidate = project(current.from_vec(&candidate_vec), cfg);
            let value = item_expected_loglik(&candidate, nodes, counts);
            if value > objective {
                current = candidate;
                objective = value;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    current
}

fn content_hash(model: ModelKind, item_ids: &[u32], items: &[ItemParams]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model.to_string().as_bytes());
    for (id, params) in item_ids.iter().zip(items) {
        hasher.update(id.to_le_bytes());
        for v in params.to_vec() {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Fit item parameters by MML-EM with default starts.
pub fn calibrate(input: CalibrationInput, cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    calibrate_with_starts(input, cfg, &BTreeMap::new())
}

pub fn calibrate_binary(m: &BinaryMatrix, cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    calibrate(CalibrationInput::Binary(m), cfg)
}

pub fn calibrate_ordinal(m: &OrdinalMatrix, cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    calibrate(CalibrationInput::Ordinal(m), cfg)
}

/// Fit with warm starts for selected item ids (used by DIF refits). Starts
/// whose category count does not match the prepared column are ignored.
pub fn calibrate_with_starts(
    input: CalibrationInput,
    cfg: &CalibrationConfig,
    starts: &BTreeMap<u32, ItemParams>,
) -> Result<CalibrationResult> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let prep = prepare(input, cfg.model)?;

    let mut params = starting_values(&prep, cfg.model);
    for (i, &id) in prep.item_ids.iter().enumerate() {
        if let Some(start) = starts.get(&id) {
            if start.n_categories() == prep.n_cats[i] {
                params[i] = project(start.clone(), cfg);
            }
        }
    }

    let nodes = grid.nodes().to_vec();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut em_cycles = 0;
    let mut prev_ll = f64::NEG_INFINITY;

    for cycle in 1..=cfg.max_em_cycles {
        let tables = log_prob_tables(&params, &nodes);
        let (ll, counts) = e_step(&prep, &tables, &prep.n_cats, &grid, true);
        trace.push(ll);
        em_cycles = cycle;

        let updated: Vec<ItemParams> = params
            .par_iter()
            .enumerate()
            .map(|(i, p)| m_step_item(p, &nodes, &counts[i], cfg))
            .collect();

        let param_change = params
            .iter()
            .zip(&updated)
            .flat_map(|(a, b)| {
                a.to_vec()
                    .into_iter()
                    .zip(b.to_vec())
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0f64, f64::max);
        params = updated;

        let ll_change = (ll - prev_ll).abs() / prev_ll.abs().max(1.0);
        prev_ll = ll;
        if param_change <= cfg.param_tol || (cycle > 1 && ll_change <= cfg.loglik_tol) {
            converged = true;
            break;
        }
    }

    // final pass at the fitted parameters: reported log-likelihood, posterior
    // counts for standard errors
    let tables = log_prob_tables(&params, &nodes);
    let (final_ll, counts) = e_step(&prep, &tables, &prep.n_cats, &grid, true);
    trace.push(final_ll);

    let mut items = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let (_, hess) = item_grad_hessian(p, &nodes, &counts[i]);
        let info: Vec<Vec<f64>> = hess
            .iter()
            .map(|row| row.iter().map(|v| -v).collect())
            .collect();
        let (se, unstable) = match invert(&info) {
            Ok(inv) => {
                let diag: Vec<f64> = (0..inv.len()).map(|j| inv[j][j]).collect();
                if diag.iter().all(|&d| d > 0.0 && d.is_finite()) {
                    (diag.iter().map(|d| d.sqrt()).collect(), false)
                } else {
                    (vec![f64::NAN; diag.len()], true)
                }
            }
            Err(_) => (vec![f64::NAN; p.to_vec().len()], true),
        };
        items.push(FittedItem {
            item_id: prep.item_ids[i],
            params: p.clone(),
            se,
            se_unstable: unstable,
            collapse_map: prep.collapse[i].clone(),
        });
    }

    let scale_id = content_hash(cfg.model, &prep.item_ids, &params);
    let mut result = CalibrationResult {
        model: cfg.model,
        config: cfg.clone(),
        items,
        dropped: prep.dropped.clone(),
        marginal_loglik: final_ll,
        em_cycles,
        converged,
        fit_r2: 0.0,
        loglik_trace: trace,
        scale_id,
    };
    result.fit_r2 = match fit_statistic_prepared(&result, &prep, &grid) {
        Ok(r2) => r2,
        Err(Error::UndefinedFit) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(result)
}

/// Evaluate the marginal log-likelihood of arbitrary parameters on a matrix,
/// without fitting. Parameters are matched to items by id; every retained
/// column must be covered.
pub fn evaluate_marginal_loglik(
    input: CalibrationInput,
    cfg: &CalibrationConfig,
    params_by_id: &BTreeMap<u32, ItemParams>,
) -> Result<f64> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let prep = prepare(input, cfg.model)?;
    let params: Vec<ItemParams> =
        prep.item_ids
            .iter()
            .map(|id| {
                params_by_id.get(id).cloned().ok_or_else(|| {
                    Error::Validation(format!("no parameters supplied for item {id}"))
                })
            })
            .collect::<Result<_>>()?;
    let tables = log_prob_tables(&params, grid.nodes());
    let (ll, _) = e_step(&prep, &tables, &prep.n_cats, &grid, false);
    Ok(ll)
}

/// Squared Pearson correlation between observed and posterior-predicted
/// category proportions, pooled over (item × group) cells.
///
/// The reference category is omitted per cell (it is determined by the
/// rest); degenerate variance returns 0 by convention.
pub fn fit_statistic(result: &CalibrationResult, input: CalibrationInput) -> Result<f64> {
    let grid = result.config.grid()?;
    let prep = prepare(input, result.model)?;
    let fitted_ids: Vec<u32> = result.items.iter().map(|i| i.item_id).collect();
    if prep.item_ids != fitted_ids {
        return Err(Error::Validation(
            "matrix does not match the calibrated item set".into(),
        ));
    }
    fit_statistic_prepared(result, &prep, &grid)
}

fn fit_statistic_prepared(
    result: &CalibrationResult,
    prep: &Prepared,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let params: Vec<ItemParams> = result.items.iter().map(|i| i.params.clone()).collect();
    let tables = log_prob_tables(&params, grid.nodes());
    let q = grid.len();
    let log_w: Vec<f64> = grid.weights().iter().map(|w| w.ln()).collect();

    // per-item predictive probabilities per node, linear domain
    let pred_tables: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            let mut t = Vec::with_capacity(q * p.n_categories());
            for &theta in grid.nodes() {
                t.extend(p.probs(theta));
            }
            t
        })
        .collect();

    // group index per respondent row
    let mut group_names: Vec<&str> = prep.respondents.iter().map(|r| r.group.as_str()).collect();
    group_names.sort_unstable();
    group_names.dedup();
    let group_of = |row: usize| -> usize {
        group_names
            .binary_search(&prep.respondents[row].group.as_str())
            .expect("group present")
    };

    let n_items = prep.item_ids.len();
    let n_groups = group_names.len();
    // per (item, group): count per category, predicted mass per category
    let mut obs = vec![vec![0.0f64; 4]; n_items * n_groups];
    let mut pred = vec![vec![0.0f64; 4]; n_items * n_groups];
    let mut cell_n = vec![0.0f64; n_items * n_groups];

    for &row in &prep.row_order {
        let cells = &prep.rows[row];
        if cells.is_empty() {
            continue;
        }
        let mut log_post: Vec<f64> = log_w.clone();
        for &(col, cat) in cells {
            let table = &tables[col as usize];
            let k = prep.n_cats[col as usize];
            for (node, lp) in log_post.iter_mut().enumerate() {
                *lp += table[node * k + cat as usize];
            }
        }
        let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for lp in log_post.iter_mut() {
            *lp = (*lp - max).exp();
            total += *lp;
        }
        for lp in log_post.iter_mut() {
            *lp /= total;
        }

        let g = group_of(row);
        for &(col, cat) in cells {
            let idx = col as usize * n_groups + g;
            let k = prep.n_cats[col as usize];
            obs[idx][cat as usize] += 1.0;
            cell_n[idx] += 1.0;
            let table = &pred_tables[col as usize];
            for (node, w) in log_post.iter().enumerate() {
                for c in 0..k {
                    pred[idx][c] += w * table[node * k + c];
                }
            }
        }
    }

    let occupied = cell_n.iter().filter(|&&n| n > 0.0).count();
    if occupied < 3 {
        return Err(Error::UndefinedFit);
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for item in 0..n_items {
        let k = prep.n_cats[item];
        for g in 0..n_groups {
            let idx = item * n_groups + g;
            if cell_n[idx] == 0.0 {
                continue;
            }
            for c in 1..k {
                xs.push(obs[idx][c] / cell_n[idx]);
                ys.push(pred[idx][c] / cell_n[idx]);
            }
        }
    }
    Ok(squared_pearson(&xs, &ys))
}

/// Squared Pearson correlation; 0 when either side has no variance.
fn squared_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 1e-14 || syy <= 1e-14 {
        return 0.0;
    }
    ((sxy * sxy) / (sxx * syy)).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// JSON interchange

#[derive(Serialize, Deserialize)]
struct ItemDto {
    item_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    steps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    location: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    se: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dropped: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    collapse_map: Option<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct ResultDto {
    model: ModelKind,
    config: CalibrationConfig,
    items: Vec<ItemDto>,
    marginal_loglik: f64,
    fit_r2: f64,
    converged: bool,
    em_cycles: usize,
}

impl CalibrationResult {
    /// Fitted parameters keyed by item id.
    pub fn params_by_id(&self) -> BTreeMap<u32, ItemParams> {
        self.items
            .iter()
            .map(|i| (i.item_id, i.params.clone()))
            .collect()
    }

    fn to_dto(&self) -> ResultDto {
        let mut items: Vec<ItemDto> = self
            .items
            .iter()
            .map(|item| {
                let (alpha, beta, steps, location) = match &item.params {
                    ItemParams::TwoPl(p) => (p.alpha, Some(p.beta), None, p.beta),
                    ItemParams::Gpcm(p) => (p.alpha, None, Some(p.steps.clone()), p.location()),
                };
                ItemDto {
                    item_id: item.item_id,
                    alpha: Some(alpha),
                    beta,
                    steps,
                    location: Some(location),
                    se: Some(
                        item.se
                            .iter()
                            .map(|s| s.is_finite().then_some(*s))
                            .collect(),
                    ),
                    dropped: None,
                    collapse_map: item.collapse_map.clone(),
                }
            })
            .collect();
        for d in &self.dropped {
            items.push(ItemDto {
                item_id: d.item_id,
                alpha: None,
                beta: None,
                steps: None,
                location: None,
                se: None,
                dropped: Some(d.reason.clone()),
                collapse_map: None,
            });
        }
        items.sort_by_key(|i| i.item_id);
        ResultDto {
            model: self.model,
            config: self.config.clone(),
            items,
            marginal_loglik: self.marginal_loglik,
            fit_r2: self.fit_r2,
            converged: self.converged,
            em_cycles: self.em_cycles,
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(&self.to_dto()).expect("result serializes");
        out.push('\n');
        out
    }

    pub fn from_json(json: &str) -> Result<CalibrationResult> {
        let dto: ResultDto = serde_json::from_str(json)
            .map_err(|e| Error::Parse(format!("calibration json: {e}")))?;
        Self::from_dto(dto)
    }

    fn from_dto(dto: ResultDto) -> Result<CalibrationResult> {
        let mut items = Vec::new();
        let mut dropped = Vec::new();
        for item in dto.items {
            if let Some(reason) = item.dropped {
                dropped.push(DroppedItem {
                    item_id: item.item_id,
                    reason,
                });
                continue;
            }
            let alpha = item
                .alpha
                .ok_or_else(|| Error::Parse(format!("item {} missing alpha", item.item_id)))?;
            let params = match dto.model {
                ModelKind::TwoPl => ItemParams::TwoPl(TwoPlParams {
                    alpha,
                    beta: item.beta.ok_or_else(|| {
                        Error::Parse(format!("item {} missing beta", item.item_id))
                    })?,
                }),
                ModelKind::Gpcm => ItemParams::Gpcm(GpcmParams {
                    alpha,
                    steps: item.steps.ok_or_else(|| {
                        Error::Parse(format!("item {} missing steps", item.item_id))
                    })?,
                }),
            };
            let se: Vec<f64> = item
                .se
                .unwrap_or_default()
                .into_iter()
                .map(|s| s.unwrap_or(f64::NAN))
                .collect();
            let se_unstable = se.is_empty() || se.iter().any(|s| !s.is_finite());
            items.push(FittedItem {
                item_id: item.item_id,
                params,
                se,
                se_unstable,
                collapse_map: item.collapse_map,
            });
        }
        let item_ids: Vec<u32> = items.iter().map(|i| i.item_id).collect();
        let params: Vec<ItemParams> = items.iter().map(|i| i.params.clone()).collect();
        let scale_id = content_hash(dto.model, &item_ids, &params);
        Ok(CalibrationResult {
            model: dto.model,
            config: dto.config,
            items,
            dropped,
            marginal_loglik: dto.marginal_loglik,
            em_cycles: dto.em_cycles,
            converged: dto.converged,
            fit_r2: dto.fit_r2,
            loglik_trace: Vec::new(),
            scale_id,
        })
    }
}

impl Serialize for CalibrationResult {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        self.to_dto().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CalibrationResult {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let dto = ResultDto::deserialize(deserializer)?;
        CalibrationResult::from_dto(dto).map_err(serde::de::Error::custom)
    }
}
