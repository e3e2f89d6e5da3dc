//! Pure IRT kernels: 2PL and GPCM category probabilities, row log-likelihoods,
//! analytic M-step derivatives, and the latent-trait quadrature grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Which response model a calibration fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "2pl")]
    TwoPl,
    #[serde(rename = "gpcm")]
    Gpcm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::TwoPl => f.write_str("2pl"),
            ModelKind::Gpcm => f.write_str("gpcm"),
        }
    }
}

/// Binary-model item parameters: discrimination and difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPlParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Partial-credit item parameters: discrimination and K−1 step thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpcmParams {
    pub alpha: f64,
    pub steps: Vec<f64>,
}

impl GpcmParams {
    /// Number of response categories (steps + 1).
    pub fn n_categories(&self) -> usize {
        self.steps.len() + 1
    }

    /// Item location: the mean of the step thresholds.
    pub fn location(&self) -> f64 {
        self.steps.iter().sum::<f64>() / self.steps.len() as f64
    }
}

/// Item parameters for either stage, as stored in calibration results.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemParams {
    TwoPl(TwoPlParams),
    Gpcm(GpcmParams),
}

impl ItemParams {
    pub fn alpha(&self) -> f64 {
        match self {
            ItemParams::TwoPl(p) => p.alpha,
            ItemParams::Gpcm(p) => p.alpha,
        }
    }

    /// Difficulty for 2PL, mean step threshold for GPCM.
    pub fn location(&self) -> f64 {
        match self {
            ItemParams::TwoPl(p) => p.beta,
            ItemParams::Gpcm(p) => p.location(),
        }
    }

    /// Number of observable categories under these parameters.
    pub fn n_categories(&self) -> usize {
        match self {
            ItemParams::TwoPl(_) => 2,
            ItemParams::Gpcm(p) => p.n_categories(),
        }
    }

    /// Free parameters as a flat vector: alpha first, then thresholds.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            ItemParams::TwoPl(p) => vec![p.alpha, p.beta],
            ItemParams::Gpcm(p) => {
                let mut v = Vec::with_capacity(1 + p.steps.len());
                v.push(p.alpha);
                v.extend_from_slice(&p.steps);
                v
            }
        }
    }

    /// Inverse of [`to_vec`](Self::to_vec), keeping the model shape of `self`.
    pub fn from_vec(&self, v: &[f64]) -> ItemParams {
        match self {
            ItemParams::TwoPl(_) => ItemParams::TwoPl(TwoPlParams {
                alpha: v[0],
                beta: v[1],
            }),
            ItemParams::Gpcm(_) => ItemParams::Gpcm(GpcmParams {
                alpha: v[0],
                steps: v[1..].to_vec(),
            }),
        }
    }

    /// Category probabilities at `theta` (length 2 for 2PL).
    pub fn probs(&self, theta: f64) -> Vec<f64> {
        match self {
            ItemParams::TwoPl(p) => {
                let one = p_2pl(p, theta);
                vec![1.0 - one, one]
            }
            ItemParams::Gpcm(p) => p_gpcm(p, theta),
        }
    }
}

/// Rectangular quadrature over the latent scale with standard-normal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    bound: f64,
}

impl QuadratureGrid {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Build a grid of `q` equally spaced nodes on `[-bound, bound]` with
/// normalized standard-normal density weights. `q` must be odd (so 0 is a
/// node) and at least 3.
pub fn make_grid(q: usize, bound: f64) -> Result<QuadratureGrid> {
    if q < 3 || q.is_multiple_of(2) {
        return Err(Error::InvalidGridSpec(format!(
            "quadrature point count must be odd and >= 3, got {q}"
        )));
    }
    if !(bound.is_finite() && bound > 0.0) {
        return Err(Error::InvalidGridSpec(format!(
            "grid bound must be positive and finite, got {bound}"
        )));
    }
    let step = 2.0 * bound / (q - 1) as f64;
    let nodes: Vec<f64> = (0..q).map(|i| -bound + i as f64 * step).collect();
    let mut weights: Vec<f64> = nodes.iter().map(|&x| (-0.5 * x * x).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(QuadratureGrid {
        nodes,
        weights,
        bound,
    })
}

/// Standard logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(logistic(x))`, stable for large negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Probability of the "1" response (PNA) under the 2PL.
pub fn p_2pl(params: &TwoPlParams, theta: f64) -> f64 {
    logistic(params.alpha * (theta - params.beta))
}

/// GPCM category probabilities at `theta`, length `steps + 1`.
///
/// Category k has exponent Σ_{j≤k} α(θ−β_j) (empty sum for k = 0); the
/// softmax subtracts the max exponent before exponentiating.
pub fn p_gpcm(params: &GpcmParams, theta: f64) -> Vec<f64> {
    let k = params.n_categories();
    let mut exponents = Vec::with_capacity(k);
    let mut t = 0.0;
    exponents.push(t);
    for &step in &params.steps {
        t += params.alpha * (theta - step);
        exponents.push(t);
    }
    let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = exponents.iter().map(|&e| (e - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

/// Row log-likelihood under the 2PL. `pattern[i]` is `Some(true)` for a 1
/// (PNA), `Some(false)` for a 0, `None` for MISSING (skipped).
pub fn loglik_2pl(items: &[TwoPlParams], pattern: &[Option<bool>], theta: f64) -> Result<f64> {
    debug_assert_eq!(items.len(), pattern.len());
    let mut sum = 0.0;
    let mut informative = 0usize;
    for (params, cell) in items.iter().zip(pattern) {
        if let Some(x) = *cell {
            let p = p_2pl(params, theta);
            let pr = if x { p } else { 1.0 - p };
            sum += pr.max(PROB_FLOOR).ln();
            informative += 1;
        }
    }
    if informative == 0 {
        return Err(Error::AllMissing);
    }
    Ok(sum)
}

/// Row log-likelihood under the GPCM. `pattern[i]` is the observed category
/// index, `None` for MISSING (skipped).
pub fn loglik_gpcm(items: &[GpcmParams], pattern: &[Option<u8>], theta: f64) -> Result<f64> {
    debug_assert_eq!(items.len(), pattern.len());
    let mut sum = 0.0;
    let mut informative = 0usize;
    for (params, cell) in items.iter().zip(pattern) {
        if let Some(k) = *cell {
            let probs = p_gpcm(params, theta);
            sum += probs[k as usize].max(PROB_FLOOR).ln();
            informative += 1;
        }
    }
    if informative == 0 {
        return Err(Error::AllMissing);
    }
    Ok(sum)
}

/// Expected complete-data log-likelihood for one item given per-node expected
/// category counts (`counts[q][k]`). The M-step objective.
pub fn item_expected_loglik(params: &ItemParams, nodes: &[f64], counts: &[Vec<f64>]) -> f64 {
    debug_assert_eq!(nodes.len(), counts.len());
    let mut sum = 0.0;
    for (&theta, row) in nodes.iter().zip(counts) {
        let probs = params.probs(theta);
        debug_assert_eq!(probs.len(), row.len());
        for (&r, &p) in row.iter().zip(&probs) {
            if r > 0.0 {
                sum += r * p.max(PROB_FLOOR).ln();
            }
        }
    }
    sum
}

/// Analytic gradient and Hessian of [`item_expected_loglik`] with respect to
/// the item's flat parameter vector (alpha, then thresholds).
///
/// `counts[q][k]` is the expected count of category `k` at node `q`; the
/// Hessian is symmetric and the gradient is zero when all counts are zero.
pub fn item_grad_hessian(
    params: &ItemParams,
    nodes: &[f64],
    counts: &[Vec<f64>],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    match params {
        ItemParams::TwoPl(p) => grad_hessian_2pl(p, nodes, counts),
        ItemParams::Gpcm(p) => grad_hessian_gpcm(p, nodes, counts),
    }
}

fn grad_hessian_2pl(
    params: &TwoPlParams,
    nodes: &[f64],
    counts: &[Vec<f64>],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (alpha, beta) = (params.alpha, params.beta);
    let (mut g_a, mut g_b) = (0.0, 0.0);
    let (mut h_aa, mut h_ab, mut h_bb) = (0.0, 0.0, 0.0);
    for (&theta, row) in nodes.iter().zip(counts) {
        let n = row[0] + row[1];
        let s = row[1];
        let d = theta - beta;
        let p = logistic(alpha * d);
        let w = p * (1.0 - p);
        let e = s - n * p;
        g_a += e * d;
        g_b -= alpha * e;
        h_aa -= n * w * d * d;
        h_ab += alpha * n * w * d - e;
        h_bb -= alpha * alpha * n * w;
    }
    (vec![g_a, g_b], vec![vec![h_aa, h_ab], vec![h_ab, h_bb]])
}

fn grad_hessian_gpcm(
    params: &GpcmParams,
    nodes: &[f64],
    counts: &[Vec<f64>],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let alpha = params.alpha;
    let m = params.steps.len();
    let k = m + 1;
    // cumulative thresholds B_k = Σ_{j<=k} β_j
    let mut b_cum = vec![0.0; k];
    for j in 1..k {
        b_cum[j] = b_cum[j - 1] + params.steps[j - 1];
    }

    let mut grad = vec![0.0; 1 + m];
    let mut hess = vec![vec![0.0; 1 + m]; 1 + m];

    for (&theta, row) in nodes.iter().zip(counts) {
        let n: f64 = row.iter().sum();
        let probs = p_gpcm(params, theta);
        // u_k = kθ − B_k, so the category-k exponent is α·u_k
        let u: Vec<f64> = (0..k).map(|c| c as f64 * theta - b_cum[c]).collect();

        let e_u: f64 = (0..k).map(|c| probs[c] * u[c]).sum();
        let e_u2: f64 = (0..k).map(|c| probs[c] * u[c] * u[c]).sum();
        let var_u = e_u2 - e_u * e_u;

        // upper tails from category j: counts, probabilities, and E[u·1{cat≥j}]
        let mut r_tail = vec![0.0; k + 1];
        let mut p_tail = vec![0.0; k + 1];
        let mut pu_tail = vec![0.0; k + 1];
        for c in (0..k).rev() {
            r_tail[c] = r_tail[c + 1] + row[c];
            p_tail[c] = p_tail[c + 1] + probs[c];
            pu_tail[c] = pu_tail[c + 1] + probs[c] * u[c];
        }

        grad[0] += (0..k).map(|c| (row[c] - n * probs[c]) * u[c]).sum::<f64>();
        for j in 1..=m {
            grad[j] -= alpha * (r_tail[j] - n * p_tail[j]);
        }

        hess[0][0] -= n * var_u;
        for j in 1..=m {
            let cov = pu_tail[j] - e_u * p_tail[j];
            let h = -r_tail[j] + n * p_tail[j] + alpha * n * cov;
            hess[0][j] += h;
            hess[j][0] += h;
            for l in 1..=m {
                hess[j][l] -= alpha * alpha * n * (p_tail[j.max(l)] - p_tail[j] * p_tail[l]);
            }
        }
    }
    (grad, hess)
}

/// Solve the symmetric system `a x = b` by Gaussian elimination with partial
/// pivoting. Errors on (numerically) singular systems.
#[allow(clippy::needless_range_loop)]
pub(crate) fn solve_linear(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut x = b.to_vec();
    let scale = m
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1.0);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[pivot_row][col].abs() < 1e-12 * scale {
            return Err(Error::DegenerateMatrix);
        }
        m.swap(col, pivot_row);
        x.swap(col, pivot_row);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for c in col..n {
                m[row][c] -= f * m[col][c];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        for row in 0..col {
            let f = m[row][col] / m[col][col];
            x[row] -= f * x[col];
        }
        x[col] /= m[col][col];
    }
    Ok(x)
}

/// Invert a small symmetric matrix, for standard-error extraction.
pub(crate) fn invert(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(solve_linear(a, &e)?);
    }
    // cols[j] is the j-th column of the inverse
    Ok((0..n)
        .map(|i| (0..n).map(|j| cols[j][i]).collect())
        .collect())
}
