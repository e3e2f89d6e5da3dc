//! Synthetic two-stage response generation from known ground truth.
//!
//! Every random draw comes from its own counter-derived ChaCha8 stream keyed
//! by (purpose, respondent, item), so generation is reproducible cell-by-cell
//! and independent of iteration or thread order.

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bank::{ItemBank, ResponseCategory, Subscale};
use crate::error::{Error, Result};
use crate::model::{p_2pl, p_gpcm, GpcmParams, TwoPlParams};
use crate::responses::{ResponseMatrix, ResponseRecord};

/// One simulated population of respondents sharing persona means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    /// Mean avoidance trait (stage 1).
    pub theta_pna: f64,
    /// Mean directional trait (stage 2).
    pub theta_bias: f64,
    /// Within-group spread of both traits; 0 = fixed persona.
    #[serde(default)]
    pub theta_sd: f64,
}

/// Ranges for the randomly drawn ground-truth item parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemGenSpec {
    pub alpha_range: [f64; 2],
    pub beta_range: [f64; 2],
    /// GPCM steps sit at location ± this spread.
    pub step_spread: f64,
}

/// Full description of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n_items: u16,
    pub n_respondents_per_group: u32,
    pub groups: Vec<GroupSpec>,
    pub item_gen: ItemGenSpec,
    /// Fraction of items generated as reverse-coded.
    #[serde(default)]
    pub recode_fraction: f64,
    pub seed: u64,
}

/// Generating parameters and traits behind a simulated matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pna_items: Vec<TwoPlParams>,
    pub bias_items: Vec<GpcmParams>,
    /// Per respondent, in matrix row order.
    pub theta_pna: Vec<f64>,
    pub theta_bias: Vec<f64>,
    pub recode_flags: Vec<bool>,
}

/// Respondent ids in generation order. The respondent/cell stream index of an
/// id is its position here; matrix rows are sorted by id instead.
pub fn generation_order(spec: &SimSpec) -> Vec<String> {
    spec.groups
        .iter()
        .flat_map(|g| {
            (0..spec.n_respondents_per_group).map(move |i| format!("{}_{:05}", g.label, i))
        })
        .collect()
}

const STREAM_ITEM: u8 = 1;
const STREAM_RESPONDENT: u8 = 2;
const STREAM_CELL: u8 = 3;

fn stream_id(kind: u8, a: u32, b: u16) -> u64 {
    ((kind as u64) << 48) | ((a as u64) << 16) | b as u64
}

fn rng_for(seed: u64, kind: u8, a: u32, b: u16) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(kind, a, b));
    rng
}

fn validate(spec: &SimSpec) -> Result<()> {
    let fail = |msg: String| Err(Error::InvalidSpec(msg));
    if spec.n_items < 2 {
        return fail(format!("n_items must be >= 2, got {}", spec.n_items));
    }
    if spec.groups.is_empty() {
        return fail("at least one group required".into());
    }
    if spec.n_respondents_per_group == 0 {
        return fail("n_respondents_per_group must be >= 1".into());
    }
    let mut labels = std::collections::BTreeSet::new();
    for g in &spec.groups {
        if g.label.trim().is_empty() {
            return fail("group label must be non-empty".into());
        }
        if !labels.insert(g.label.as_str()) {
            return fail(format!("duplicate group label {}", g.label));
        }
        if !(g.theta_pna.is_finite() && g.theta_bias.is_finite()) {
            return fail(format!("non-finite trait mean in group {}", g.label));
        }
        if !(g.theta_sd.is_finite() && g.theta_sd >= 0.0) {
            return fail(format!("theta_sd must be >= 0 in group {}", g.label));
        }
    }
    let [alo, ahi] = spec.item_gen.alpha_range;
    let [blo, bhi] = spec.item_gen.beta_range;
    if !(alo.is_finite() && ahi.is_finite() && alo > 0.0 && alo <= ahi) {
        return fail(format!(
            "alpha_range must satisfy 0 < lo <= hi, got [{alo}, {ahi}]"
        ));
    }
    if !(blo.is_finite() && bhi.is_finite() && blo <= bhi) {
        return fail(format!(
            "beta_range must satisfy lo <= hi, got [{blo}, {bhi}]"
        ));
    }
    if !(spec.item_gen.step_spread.is_finite() && spec.item_gen.step_spread > 0.0) {
        return fail("step_spread must be > 0".into());
    }
    if !(0.0..=1.0).contains(&spec.recode_fraction) {
        return fail(format!(
            "recode_fraction must lie in [0,1], got {}",
            spec.recode_fraction
        ));
    }
    Ok(())
}

/// Build a synthetic bank whose recode list matches the generated flags.
fn synthetic_bank(spec: &SimSpec, recode_flags: &[bool]) -> ItemBank {
    let items: Vec<serde_json::Value> = (1..=spec.n_items as u32)
        .map(|id| {
            serde_json::json!({
                "id": id,
                "text": format!("Synthetic item {id}"),
                "subscale": if id % 2 == 0 { Subscale::Economic } else { Subscale::Social },
                "tags": ["synthetic"],
            })
        })
        .collect();
    let recode_ids: Vec<u32> = recode_flags
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| f.then_some(i as u32 + 1))
        .collect();
    let json = serde_json::json!({
        "version": format!("sim-seed-{}", spec.seed),
        "items": items,
        "recode_ids": recode_ids,
    });
    ItemBank::from_json(&json.to_string()).expect("synthetic bank is valid")
}

/// Generate a response matrix and its ground truth. Deterministic in `seed`.
pub fn simulate(spec: &SimSpec) -> Result<(ResponseMatrix, GroundTruth)> {
    validate(spec)?;

    let n_items = spec.n_items as usize;
    let [alo, ahi] = spec.item_gen.alpha_range;
    let [blo, bhi] = spec.item_gen.beta_range;
    let spread = spec.item_gen.step_spread;

    let mut pna_items = Vec::with_capacity(n_items);
    let mut bias_items = Vec::with_capacity(n_items);
    let mut recode_flags = Vec::with_capacity(n_items);
    for i in 0..spec.n_items {
        let mut rng = rng_for(spec.seed, STREAM_ITEM, i as u32, 0);
        pna_items.push(TwoPlParams {
            alpha: rng.random_range(alo..=ahi),
            beta: rng.random_range(blo..=bhi),
        });
        let alpha = rng.random_range(alo..=ahi);
        let location = rng.random_range(blo..=bhi);
        bias_items.push(GpcmParams {
            alpha,
            steps: vec![location - spread, location, location + spread],
        });
        recode_flags.push(rng.random_range(0.0..1.0) < spec.recode_fraction);
    }

    let bank = Arc::new(synthetic_bank(spec, &recode_flags));

    let mut traits = std::collections::BTreeMap::new();
    let mut records = Vec::new();
    let mut respondent_index: u32 = 0;
    for group in &spec.groups {
        for i in 0..spec.n_respondents_per_group {
            let mut rng = rng_for(spec.seed, STREAM_RESPONDENT, respondent_index, 0);
            let pna_dist = Normal::new(group.theta_pna, group.theta_sd)
                .map_err(|e| Error::InvalidSpec(e.to_string()))?;
            let bias_dist = Normal::new(group.theta_bias, group.theta_sd)
                .map_err(|e| Error::InvalidSpec(e.to_string()))?;
            let t_pna = pna_dist.sample(&mut rng);
            let t_bias = bias_dist.sample(&mut rng);

            let respondent_id = format!("{}_{:05}", group.label, i);
            traits.insert(respondent_id.clone(), (t_pna, t_bias));
            for (col, (pna_p, bias_p)) in pna_items.iter().zip(&bias_items).enumerate() {
                let mut cell_rng = rng_for(spec.seed, STREAM_CELL, respondent_index, col as u16);
                let category = draw_cell(
                    &mut cell_rng,
                    pna_p,
                    bias_p,
                    t_pna,
                    t_bias,
                    recode_flags[col],
                );
                records.push(ResponseRecord {
                    respondent_id: respondent_id.clone(),
                    group: group.label.clone(),
                    item_id: col as u32 + 1,
                    category,
                    raw_text: None,
                });
            }
            respondent_index += 1;
        }
    }

    let matrix = ResponseMatrix::from_records(records, bank)?;
    let (theta_pna, theta_bias) = matrix.respondents().iter().map(|r| traits[&r.id]).unzip();
    let truth = GroundTruth {
        pna_items,
        bias_items,
        theta_pna,
        theta_bias,
        recode_flags,
    };
    Ok((matrix, truth))
}

/// Draw one cell: Bernoulli refusal first, then a GPCM category on the bias
/// scale, emitted in raw (pre-recode) orientation.
fn draw_cell(
    rng: &mut ChaCha8Rng,
    pna: &TwoPlParams,
    bias: &GpcmParams,
    theta_pna: f64,
    theta_bias: f64,
    reverse_coded: bool,
) -> ResponseCategory {
    let u1: f64 = rng.random_range(0.0..1.0);
    if u1 < p_2pl(pna, theta_pna) {
        return ResponseCategory::Pna;
    }
    let probs = p_gpcm(bias, theta_bias);
    let u2: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    let mut code = probs.len() as u8 - 1;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u2 < acc {
            code = k as u8;
            break;
        }
    }
    let raw = if reverse_coded { 3 - code } else { code };
    ResponseCategory::from_ordinal(raw).expect("code in range")
}

/// How well one calibrated stage recovered its generating values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecovery {
    pub rmse_alpha: f64,
    /// RMSE of β (stage 1) or mean step location (stage 2).
    pub rmse_location: f64,
    /// Pearson r between EAP θ̂ and true θ over informative respondents;
    /// 0 when undefined.
    pub theta_correlation: f64,
    /// Items entering the RMSEs (dropped or category-collapsed items do not).
    pub n_items_compared: usize,
    pub converged: bool,
}

/// End-to-end recovery summary for a simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub seed: u64,
    pub n_respondents: usize,
    pub n_items: usize,
    pub stage1: StageRecovery,
    pub stage2: StageRecovery,
}

/// Simulate, calibrate both stages with `cfg`'s settings (model forced per
/// stage), score, and compare against ground truth. Calibration errors from
/// either stage propagate.
pub fn recovery_report(
    spec: &SimSpec,
    cfg: &crate::calibrate::CalibrationConfig,
) -> Result<RecoveryReport> {
    use crate::calibrate::{calibrate_binary, calibrate_ordinal, CalibrationInput};
    use crate::model::ModelKind;
    use crate::score::{score_matrix, ScoringMethod};

    let (matrix, truth) = simulate(spec)?;

    let bin = matrix.binarize_pna();
    let mut cfg1 = cfg.clone();
    cfg1.model = ModelKind::TwoPl;
    let fit1 = calibrate_binary(&bin, &cfg1)?;
    let scores1 = score_matrix(&fit1, CalibrationInput::Binary(&bin), ScoringMethod::Eap)?;
    let truth1: Vec<(f64, f64)> = truth.pna_items.iter().map(|p| (p.alpha, p.beta)).collect();
    let stage1 = stage_summary(&fit1, &truth1, &scores1, &truth.theta_pna);

    let ord = matrix.filter_answered();
    let mut cfg2 = cfg.clone();
    cfg2.model = ModelKind::Gpcm;
    let fit2 = calibrate_ordinal(&ord, &cfg2)?;
    let scores2 = score_matrix(&fit2, CalibrationInput::Ordinal(&ord), ScoringMethod::Eap)?;
    let truth2: Vec<(f64, f64)> = truth
        .bias_items
        .iter()
        .map(|p| (p.alpha, p.location()))
        .collect();
    let stage2 = stage_summary(&fit2, &truth2, &scores2, &truth.theta_bias);

    Ok(RecoveryReport {
        seed: spec.seed,
        n_respondents: matrix.n_respondents(),
        n_items: matrix.n_items(),
        stage1,
        stage2,
    })
}

fn stage_summary(
    fit: &crate::calibrate::CalibrationResult,
    truth: &[(f64, f64)],
    scores: &[crate::score::AbilityEstimate],
    theta_true: &[f64],
) -> StageRecovery {
    let mut sq_alpha = 0.0;
    let mut sq_loc = 0.0;
    let mut n = 0usize;
    for item in &fit.items {
        if item.collapse_map.is_some() {
            continue;
        }
        let (true_alpha, true_loc) = truth[(item.item_id - 1) as usize];
        sq_alpha += (item.params.alpha() - true_alpha).powi(2);
        sq_loc += (item.params.location() - true_loc).powi(2);
        n += 1;
    }
    let rmse = |sq: f64| {
        if n > 0 {
            (sq / n as f64).sqrt()
        } else {
            f64::NAN
        }
    };

    let pairs: Vec<(f64, f64)> = scores
        .iter()
        .zip(theta_true)
        .filter(|(s, _)| s.n_informative > 0)
        .map(|(s, &t)| (s.theta, t))
        .collect();

    StageRecovery {
        rmse_alpha: rmse(sq_alpha),
        rmse_location: rmse(sq_loc),
        theta_correlation: pearson(&pairs),
        n_items_compared: n,
        converged: fit.converged,
    }
}

fn pearson(pairs: &[(f64, f64)]) -> f64 {
    if pairs.len() < 2 {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::responses::GroupBy;

    fn base_spec() -> SimSpec {
        SimSpec {
            n_items: 20,
            n_respondents_per_group: 50,
            groups: vec![GroupSpec {
                label: "base".into(),
                theta_pna: 0.0,
                theta_bias: 0.0,
                theta_sd: 1.0,
            }],
            item_gen: ItemGenSpec {
                alpha_range: [0.8, 2.0],
                beta_range: [-2.0, 2.0],
                step_spread: 1.0,
            },
            recode_fraction: 0.5,
            seed: 42,
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = base_spec();
        s.n_items = 1;
        assert!(matches!(simulate(&s), Err(Error::InvalidSpec(_))));

        let mut s = base_spec();
        s.groups.clear();
        assert!(simulate(&s).is_err());

        let mut s = base_spec();
        s.item_gen.alpha_range = [0.0, 1.0];
        assert!(simulate(&s).is_err());

        let mut s = base_spec();
        s.recode_fraction = 1.5;
        assert!(simulate(&s).is_err());
    }

    #[test]
    fn saturated_avoidance_gives_pna_rate_near_one() {
        let mut s = base_spec();
        s.groups = vec![GroupSpec {
            label: "avoider".into(),
            theta_pna: 6.0,
            theta_bias: 0.0,
            theta_sd: 0.0,
        }];
        s.item_gen.beta_range = [-6.0, -6.0];
        let (matrix, _) = simulate(&s).unwrap();
        let rate = matrix.pna_rates(GroupBy::Group).unwrap()[0].1;
        assert!(rate > 0.99, "rate {rate}");
    }

    #[test]
    fn same_seed_reproduces_matrix_exactly() {
        let s = base_spec();
        let (m1, t1) = simulate(&s).unwrap();
        let (m2, t2) = simulate(&s).unwrap();
        assert_eq!(t1, t2);
        for row in 0..m1.n_respondents() {
            assert_eq!(m1.row(row), m2.row(row));
        }

        let mut other = s.clone();
        other.seed = 43;
        let (m3, _) = simulate(&other).unwrap();
        let differs = (0..m1.n_respondents()).any(|r| m1.row(r) != m3.row(r));
        assert!(differs, "different seeds should differ somewhere");
    }

    #[test]
    fn persona_means_increase_left_to_right() {
        let mut s = base_spec();
        s.n_items = 105;
        s.n_respondents_per_group = 600;
        s.groups = vec![
            GroupSpec {
                label: "left".into(),
                theta_pna: -4.0,
                theta_bias: -2.0,
                theta_sd: 0.3,
            },
            GroupSpec {
                label: "base".into(),
                theta_pna: -4.0,
                theta_bias: 0.0,
                theta_sd: 0.3,
            },
            GroupSpec {
                label: "right".into(),
                theta_pna: -4.0,
                theta_bias: 2.0,
                theta_sd: 0.3,
            },
        ];
        let (matrix, _) = simulate(&s).unwrap();
        let ord = matrix.filter_answered();
        let mut means = std::collections::BTreeMap::new();
        for (row, resp) in ord.respondents.iter().enumerate() {
            let entry = means.entry(resp.group.clone()).or_insert((0.0, 0u64));
            for code in ord.row(row).iter().flatten() {
                entry.0 += *code as f64;
                entry.1 += 1;
            }
        }
        let mean = |g: &str| {
            let (sum, n) = means[g];
            sum / n as f64
        };
        assert!(
            mean("left") < mean("base"),
            "{} vs {}",
            mean("left"),
            mean("base")
        );
        assert!(
            mean("base") < mean("right"),
            "{} vs {}",
            mean("base"),
            mean("right")
        );
    }

    #[test]
    fn pna_indicator_matches_bernoulli_rate() {
        // fixed persona and degenerate item ranges make every cell share one p
        let s = SimSpec {
            n_items: 100,
            n_respondents_per_group: 1000,
            groups: vec![GroupSpec {
                label: "g".into(),
                theta_pna: 0.5,
                theta_bias: 0.0,
                theta_sd: 0.0,
            }],
            item_gen: ItemGenSpec {
                alpha_range: [1.5, 1.5],
                beta_range: [0.0, 0.0],
                step_spread: 1.0,
            },
            recode_fraction: 0.0,
            seed: 7,
        };
        let (matrix, truth) = simulate(&s).unwrap();
        let p = p_2pl(&truth.pna_items[0], 0.5);
        let n = (matrix.n_respondents() * matrix.n_items()) as f64;
        let pna_count = (0..matrix.n_respondents())
            .flat_map(|r| matrix.row(r))
            .filter(|&&c| c == ResponseCategory::Pna)
            .count() as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!(n >= 1e5);
        assert!(
            (pna_count / n - p).abs() < 3.0 * sigma,
            "empirical {} vs p {p}",
            pna_count / n
        );
    }

    #[test]
    fn answered_categories_match_gpcm_frequencies() {
        let s = SimSpec {
            n_items: 100,
            n_respondents_per_group: 1000,
            groups: vec![GroupSpec {
                label: "g".into(),
                theta_pna: -2.0,
                theta_bias: 0.7,
                theta_sd: 0.0,
            }],
            item_gen: ItemGenSpec {
                alpha_range: [1.2, 1.2],
                beta_range: [0.3, 0.3],
                step_spread: 1.0,
            },
            recode_fraction: 0.0,
            seed: 11,
        };
        let (matrix, truth) = simulate(&s).unwrap();
        let probs = p_gpcm(&truth.bias_items[0], 0.7);
        let ord = matrix.filter_answered();
        let mut counts = [0u64; 4];
        let mut total = 0u64;
        for row in 0..ord.respondents.len() {
            for code in ord.row(row).iter().flatten() {
                counts[*code as usize] += 1;
                total += 1;
            }
        }
        assert!(total > 50_000);
        for (k, &p) in probs.iter().enumerate() {
            let freq = counts[k] as f64 / total as f64;
            let sigma = (p * (1.0 - p) / total as f64).sqrt();
            assert!(
                (freq - p).abs() < 3.0 * sigma,
                "category {k}: {freq} vs {p}"
            );
        }
    }

    #[test]
    fn recode_round_trip_recovers_generated_codes() {
        let s = base_spec();
        let (matrix, truth) = simulate(&s).unwrap();
        let ord = matrix.filter_answered();
        let order = generation_order(&s);
        // replay the generator streams and compare drawn codes cell by cell
        for row in 0..matrix.n_respondents() {
            let id = &matrix.respondents()[row].id;
            let stream = order.iter().position(|o| o == id).unwrap() as u32;
            for col in 0..matrix.n_items() {
                let mut rng = rng_for(s.seed, STREAM_CELL, stream, col as u16);
                let u1: f64 = rng.random_range(0.0..1.0);
                if u1 < p_2pl(&truth.pna_items[col], truth.theta_pna[row]) {
                    assert_eq!(matrix.cell(row, col as u32 + 1), ResponseCategory::Pna);
                    continue;
                }
                let probs = p_gpcm(&truth.bias_items[col], truth.theta_bias[row]);
                let u2: f64 = rng.random_range(0.0..1.0);
                let mut acc = 0.0;
                let mut drawn = probs.len() as u8 - 1;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u2 < acc {
                        drawn = k as u8;
                        break;
                    }
                }
                assert_eq!(ord.cell(row, col), Some(drawn), "row {row} col {col}");
            }
        }
    }

    #[test]
    fn recode_flags_follow_fraction() {
        let mut s = base_spec();
        s.recode_fraction = 0.0;
        let (_, truth) = simulate(&s).unwrap();
        assert!(truth.recode_flags.iter().all(|&f| !f));
        s.recode_fraction = 1.0;
        let (matrix, truth) = simulate(&s).unwrap();
        assert!(truth.recode_flags.iter().all(|&f| f));
        assert_eq!(matrix.bank().recode_ids().len(), matrix.n_items());
    }

    #[test]
    fn truth_thetas_follow_matrix_row_order() {
        // generation order (z then a) differs from sorted row order (a then z)
        let s = SimSpec {
            n_items: 3,
            n_respondents_per_group: 5,
            groups: vec![
                GroupSpec {
                    label: "z".into(),
                    theta_pna: 0.0,
                    theta_bias: 3.0,
                    theta_sd: 0.0,
                },
                GroupSpec {
                    label: "a".into(),
                    theta_pna: 0.0,
                    theta_bias: -3.0,
                    theta_sd: 0.0,
                },
            ],
            item_gen: ItemGenSpec {
                alpha_range: [1.0, 1.5],
                beta_range: [-1.0, 1.0],
                step_spread: 1.0,
            },
            recode_fraction: 0.0,
            seed: 9,
        };
        let (matrix, truth) = simulate(&s).unwrap();
        for (row, resp) in matrix.respondents().iter().enumerate() {
            let expected = if resp.group == "z" { 3.0 } else { -3.0 };
            assert_eq!(truth.theta_bias[row], expected, "row {row} ({})", resp.id);
        }
    }

    #[test]
    fn recovery_report_covers_both_stages() {
        let s = SimSpec {
            n_items: 20,
            n_respondents_per_group: 600,
            groups: vec![GroupSpec {
                label: "pop".into(),
                theta_pna: 0.0,
                theta_bias: 0.0,
                theta_sd: 1.0,
            }],
            item_gen: ItemGenSpec {
                alpha_range: [0.8, 2.0],
                beta_range: [-2.0, 2.0],
                step_spread: 1.0,
            },
            recode_fraction: 0.3,
            seed: 11,
        };
        let cfg = crate::calibrate::CalibrationConfig::new(crate::model::ModelKind::TwoPl);
        let report = recovery_report(&s, &cfg).unwrap();
        assert_eq!(report.n_respondents, 600);
        assert_eq!(report.n_items, 20);
        assert!(report.stage1.converged && report.stage2.converged);
        assert!(
            report.stage1.theta_correlation >= 0.85,
            "stage1 r {}",
            report.stage1.theta_correlation
        );
        assert!(
            report.stage2.rmse_location <= 0.25,
            "stage2 location rmse {}",
            report.stage2.rmse_location
        );
        assert!(report.stage1.rmse_alpha.is_finite() && report.stage2.rmse_alpha.is_finite());
        // machine-readable round trip
        let json = serde_json::to_string(&report).unwrap();
        let back: RecoveryReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn degenerate_spec_propagates_insufficient_data() {
        let s = SimSpec {
            n_items: 2,
            n_respondents_per_group: 10,
            groups: vec![GroupSpec {
                label: "tiny".into(),
                theta_pna: 1.5,
                theta_bias: 0.0,
                theta_sd: 0.5,
            }],
            item_gen: ItemGenSpec {
                alpha_range: [1.5, 2.5],
                beta_range: [-0.5, 0.5],
                step_spread: 1.0,
            },
            recode_fraction: 0.0,
            seed: 11,
        };
        let cfg = crate::calibrate::CalibrationConfig::new(crate::model::ModelKind::TwoPl);
        assert!(matches!(
            recovery_report(&s, &cfg),
            Err(Error::InsufficientData(_))
        ));
    }
}
