//! Linear diagnostic probe: L2-regularized logistic regression, pair-grouped
//! k-fold cross-validation, and the confidence and selection scores.
//!
//! The fitted objective is
//!
//! ```text
//! f(w, b) = sum_i [ log(1 + exp(z_i)) - y_i z_i ] + (lambda / 2) |w|^2,   z_i = w . x_i + b
//! ```
//!
//! with the bias left unpenalized and `x_i` standardized per dimension using
//! statistics of the training rows only. It is minimized with L-BFGS and a
//! backtracking line search, which makes every fit deterministic and
//! independent of the seed.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::FoldAssignment;
use crate::pooling::Condition;
use crate::{Error, Result};

/// Dimensions whose training-set standard deviation falls below this keep a
/// unit scale.
pub const MIN_FEATURE_SCALE: f64 = 1e-12;

const LBFGS_MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub l2_strength: f64,
    pub max_iterations: usize,
    /// Stop once the max-norm of the objective gradient, divided by the
    /// number of training rows, falls below this.
    pub convergence_tol: f64,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_strength: 1.0,
            max_iterations: 500,
            convergence_tol: 1e-6,
            standardize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Compact, stable description recorded in every result row.
    pub fn fingerprint(&self) -> String {
        format!(
            "l2={};iter={};tol={:e};std={};seed={}",
            self.l2_strength, self.max_iterations, self.convergence_tol, self.standardize, self.seed
        )
    }

    pub(crate) fn check(&self) -> Result<()> {
        if !(self.l2_strength >= 0.0 && self.l2_strength.is_finite()) {
            return Err(Error::Config(format!("l2_strength {} must be finite and >= 0", self.l2_strength)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("convergence_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    /// False when `max_iterations` ran out (or the line search stalled)
    /// before the gradient tolerance was met.
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the objective gradient per training row at the returned
    /// parameters.
    pub gradient_max_norm: f64,
    /// Objective value at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Decision value `w . x~ + b` for one raw feature row.
    pub fn decision(&self, row: impl IntoIterator<Item = f64>) -> f64 {
        let mut z = self.bias;
        for (j, v) in row.into_iter().enumerate() {
            z += self.weights[j] * ((v - self.feature_means[j]) / self.feature_scales[j]);
        }
        z
    }
}

/// Class probabilities, one `[P(z=0), P(z=1)]` row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    rows: Vec<[f64; 2]>,
}

impl PredictionMatrix {
    /// Builds from `P(z=1)` values; the complement fills column 0.
    pub fn from_positive(p1: impl IntoIterator<Item = f64>) -> Result<Self> {
        let rows: Vec<[f64; 2]> = p1.into_iter().map(|p| [1.0 - p, p]).collect();
        if rows.iter().any(|r| !(r[1] > 0.0 && r[1] < 1.0)) {
            return Err(Error::Input("probabilities must lie strictly inside (0, 1)".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[[f64; 2]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row-wise argmax; an exact tie goes to class 0.
    pub fn hard_labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| u8::from(r[1] > r[0])).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standardization statistics from the rows of `x`.
fn feature_stats(x: &DMatrix<f64>, standardize: bool) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    if !standardize {
        return (vec![0.0; d], vec![1.0; d]);
    }
    let mut means = vec![0.0; d];
    let mut scales = vec![0.0; d];
    for j in 0..d {
        let col = x.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        means[j] = mean;
        scales[j] = if sd.is_finite() && sd >= MIN_FEATURE_SCALE { sd } else { 1.0 };
    }
    (means, scales)
}

/// Row-major standardized design matrix.
fn design(x: &DMatrix<f64>, means: &[f64], scales: &[f64]) -> Vec<f64> {
    let (n, d) = x.shape();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            out.push((x[(i, j)] - means[j]) / scales[j]);
        }
    }
    out
}

struct Objective<'a> {
    rows: &'a [f64],
    labels: &'a [f64],
    dim: usize,
    lambda: f64,
}

impl Objective<'_> {
    /// Objective value; fills `grad` (length dim + 1, bias last).
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim;
        let (w, b) = (&theta[..d], theta[d]);
        grad.fill(0.0);
        let mut f = 0.0;
        for (row, &y) in self.rows.chunks_exact(d.max(1)).zip(self.labels) {
            let row = &row[..d];
            let z = dot(row, w) + b;
            f += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for (g, &v) in grad[..d].iter_mut().zip(row) {
                *g += r * v;
            }
            grad[d] += r;
        }
        for j in 0..d {
            f += 0.5 * self.lambda * w[j] * w[j];
            grad[j] += self.lambda * w[j];
        }
        f
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &[u8]) -> Result<()> {
    let n = x.nrows();
    if n != y.len() {
        return Err(Error::Input(format!("{n} feature rows but {} labels", y.len())));
    }
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 samples, got {n}")));
    }
    if x.ncols() == 0 {
        return Err(Error::Input("feature dimension is zero".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("features contain non-finite values".into()));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    let ones = y.iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == n {
        return Err(Error::DegenerateData(format!("all {n} labels are {}", y[0])));
    }
    Ok(())
}

/// Fits the probe on `x` (n x d) and binary labels `y`.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[u8], cfg: &TrainConfig) -> Result<ProbeModel> {
    cfg.check()?;
    check_inputs(x, y)?;
    let d = x.ncols();
    let (means, scales) = feature_stats(x, cfg.standardize);
    let rows = design(x, &means, &scales);
    let labels: Vec<f64> = y.iter().map(|&l| f64::from(l)).collect();
    let obj = Objective {
        rows: &rows,
        labels: &labels,
        dim: d,
        lambda: cfg.l2_strength,
    };

    let p = d + 1;
    let mut theta = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut f = obj.eval(&theta, &mut grad);
    let mut trace = vec![f];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(LBFGS_MEMORY);
    let n_rows = x.nrows() as f64;
    let mut converged = max_abs(&grad) / n_rows <= cfg.convergence_tol;
    let mut iterations = 0;

    let mut trial = vec![0.0; p];
    let mut trial_grad = vec![0.0; p];
    while !converged && iterations < cfg.max_iterations {
        // Two-loop recursion for the search direction.
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, yv, rho) in memory.iter().rev() {
            let a = rho * dot(s, &dir);
            for (dk, yk) in dir.iter_mut().zip(yv) {
                *dk -= a * yk;
            }
            alphas.push(a);
        }
        match memory.back() {
            Some((s, yv, _)) => {
                let gamma = dot(s, yv) / dot(yv, yv);
                dir.iter_mut().for_each(|v| *v *= gamma);
            }
            None => {
                let norm = dot(&grad, &grad).sqrt();
                dir.iter_mut().for_each(|v| *v /= norm.max(1.0));
            }
        }
        for ((s, yv, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
            let bcoef = rho * dot(yv, &dir);
            for (dk, sk) in dir.iter_mut().zip(s) {
                *dk += (a - bcoef) * sk;
            }
        }
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            memory.clear();
            let norm = dot(&grad, &grad).sqrt();
            dir = grad.iter().map(|g| -g / norm.max(1.0)).collect();
            slope = dot(&grad, &dir);
        }

        let gmax = max_abs(&grad);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for k in 0..p {
                trial[k] = theta[k] + step * dir[k];
            }
            let f_trial = obj.eval(&trial, &mut trial_grad);
            let armijo = f_trial <= f + ARMIJO_C1 * step * slope;
            // Near the optimum the sufficient-decrease test drowns in rounding
            // error; a non-increasing objective with a smaller gradient is
            // still progress.
            let flat_progress = f_trial <= f && max_abs(&trial_grad) < gmax;
            if f_trial.is_finite() && (armijo || flat_progress) {
                accepted = Some(f_trial);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            break;
        };

        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() && sy > 0.0 {
            if memory.len() == LBFGS_MEMORY {
                memory.pop_front();
            }
            memory.push_back((s, yv, 1.0 / sy));
        }
        std::mem::swap(&mut theta, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        f = f_new;
        trace.push(f);
        iterations += 1;
        converged = max_abs(&grad) / n_rows <= cfg.convergence_tol;
    }

    let gradient_max_norm = max_abs(&grad) / n_rows;
    if !converged {
        log::warn!(
            "logistic probe stopped after {iterations} iterations with gradient max-norm {gradient_max_norm:e}"
        );
    }
    let bias = theta.pop().expect("bias slot");
    Ok(ProbeModel {
        weights: theta,
        bias,
        feature_means: means,
        feature_scales: scales,
        converged,
        iterations,
        gradient_max_norm,
        objective_trace: trace,
    })
}

/// `P(z=1) = sigmoid(w . x~ + b)` for every row of `x`.
pub fn predict_proba(m: &ProbeModel, x: &DMatrix<f64>) -> Result<PredictionMatrix> {
    if x.ncols() != m.dim() {
        return Err(Error::Input(format!("model expects {} features, got {}", m.dim(), x.ncols())));
    }
    let rows = (0..x.nrows())
        .map(|i| {
            let p = sigmoid(m.decision(x.row(i).iter().copied())).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            [1.0 - p, p]
        })
        .collect();
    Ok(PredictionMatrix { rows })
}

/// Mean of `max_j P[i][j]` over correctly classified samples. `None` when
/// no sample is correct.
pub fn confidence_score(p: &PredictionMatrix, y_true: &[u8], y_pred: &[u8]) -> Result<Option<f64>> {
    if p.len() != y_true.len() || p.len() != y_pred.len() {
        return Err(Error::Input(format!(
            "{} prediction rows, {} true labels, {} predicted labels",
            p.len(),
            y_true.len(),
            y_pred.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ((row, &t), &pred) in p.rows.iter().zip(y_true).zip(y_pred) {
        if t == pred {
            sum += row[0].max(row[1]);
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Trained accuracy scaled by how far the untrained baseline sits from
/// chance: `acc_trained * (1 + (0.5 - acc_untrained) / 0.5)`.
///
/// The formula is evaluated exactly on the shortest decimal forms of the two
/// inputs (the numbers written to result tables) and rounded once, so
/// `selection_score(0.8, 0.6)` is `0.64` rather than `0.6400000000000001`.
/// Inputs whose digits do not fit fall back to binary arithmetic.
pub fn selection_score(acc_trained: f64, acc_untrained: f64) -> f64 {
    decimal_selection(acc_trained, acc_untrained)
        .unwrap_or_else(|| acc_trained * (1.0 + (0.5 - acc_untrained) / 0.5))
}

/// `x` as `mantissa * 10^exponent`, from its shortest round-trip form.
fn shortest_decimal(x: f64) -> Option<(i128, i32)> {
    if !x.is_finite() {
        return None;
    }
    let text = format!("{x:e}");
    let (mantissa, exponent) = text.split_once('e')?;
    let exponent: i32 = exponent.parse().ok()?;
    let (negative, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => (true, m),
        None => (false, mantissa),
    };
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits: i128 = format!("{int}{frac}").parse().ok()?;
    Some((if negative { -digits } else { digits }, exponent - frac.len() as i32))
}

fn rescale(m: i128, from: i32, to: i32) -> Option<i128> {
    m.checked_mul(10i128.checked_pow(u32::try_from(from - to).ok()?)?)
}

/// `2 * a * (1 - u)`, which equals the selection formula, in exact decimal.
fn decimal_selection(acc_trained: f64, acc_untrained: f64) -> Option<f64> {
    let (ma, ea) = shortest_decimal(acc_trained)?;
    let (mu, eu) = shortest_decimal(acc_untrained)?;
    let e = eu.min(0);
    let one_minus_u = rescale(1, 0, e)?.checked_sub(rescale(mu, eu, e)?)?;
    let product = ma.checked_mul(one_minus_u)?.checked_mul(2)?;
    format!("{product}e{}", ea + e).parse().ok()
}

/// Outcome of one held-out fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_test: usize,
    pub accuracy: Option<f64>,
    /// Present when the fold trained successfully.
    pub model: Option<ProbeModel>,
    pub error: Option<String>,
}

/// Cross-validation summary prior to tagging with task/layer/condition.
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub accuracy_mean: f64,
    pub accuracy_stderr: f64,
    pub pooled_accuracy: f64,
    pub confidence: Option<f64>,
    pub n_samples: usize,
    pub failed_folds: usize,
    pub converged: bool,
    pub folds: Vec<FoldOutcome>,
}

fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

/// k-fold cross-validation with folds fixed by pair. `pair_ids[i]` names the
/// pair that sample `i` belongs to; training statistics and weights never see
/// test rows.
pub fn cross_validate(
    x: &DMatrix<f64>,
    y: &[u8],
    pair_ids: &[&str],
    folds: &FoldAssignment,
    cfg: &TrainConfig,
) -> Result<CrossValidation> {
    let n = x.nrows();
    if y.len() != n || pair_ids.len() != n {
        return Err(Error::Input(format!(
            "{n} feature rows, {} labels, {} pair ids",
            y.len(),
            pair_ids.len()
        )));
    }
    let k = folds.k();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, id) in pair_ids.iter().enumerate() {
        let f = folds
            .fold_of(id)
            .ok_or_else(|| Error::Fold(format!("pair `{id}` has no fold")))?;
        members[f].push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::Fold(format!("fold {empty} is empty")));
    }

    let mut outcomes = Vec::with_capacity(k);
    let mut test_p1 = Vec::new();
    let mut test_true = Vec::new();
    for (fold, test_idx) in members.iter().enumerate() {
        let mut held_out = vec![false; n];
        test_idx.iter().for_each(|&i| held_out[i] = true);
        let train_idx: Vec<usize> = (0..n).filter(|&i| !held_out[i]).collect();
        let x_train = select_rows(x, &train_idx);
        let y_train: Vec<u8> = train_idx.iter().map(|&i| y[i]).collect();
        match fit_logistic(&x_train, &y_train, cfg) {
            Ok(model) => {
                let x_test = select_rows(x, test_idx);
                let probs = predict_proba(&model, &x_test)?;
                let pred = probs.hard_labels();
                let correct = test_idx.iter().zip(&pred).filter(|(&i, &p)| y[i] == p).count();
                test_p1.extend(probs.rows().iter().map(|r| r[1]));
                test_true.extend(test_idx.iter().map(|&i| y[i]));
                outcomes.push(FoldOutcome {
                    fold,
                    n_test: test_idx.len(),
                    accuracy: Some(correct as f64 / test_idx.len() as f64),
                    model: Some(model),
                    error: None,
                });
            }
            Err(e @ (Error::DegenerateData(_) | Error::Input(_))) => {
                log::warn!("fold {fold} skipped: {e}");
                outcomes.push(FoldOutcome {
                    fold,
                    n_test: test_idx.len(),
                    accuracy: None,
                    model: None,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        }
    }

    let accs: Vec<f64> = outcomes.iter().filter_map(|o| o.accuracy).collect();
    if accs.is_empty() {
        return Err(Error::DegenerateData("every training fold was degenerate".into()));
    }
    let m = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / m;
    let stderr = if accs.len() > 1 {
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    } else {
        0.0
    };
    let pooled = PredictionMatrix::from_positive(test_p1)?;
    let pred = pooled.hard_labels();
    let pooled_accuracy = pred.iter().zip(&test_true).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64;
    let confidence = confidence_score(&pooled, &test_true, &pred)?;
    let converged = outcomes.iter().filter_map(|o| o.model.as_ref()).all(|m| m.converged);

    Ok(CrossValidation {
        accuracy_mean: mean,
        accuracy_stderr: stderr,
        pooled_accuracy,
        confidence,
        n_samples: n,
        failed_folds: outcomes.len() - accs.len(),
        converged,
        folds: outcomes,
    })
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub model: String,
    pub task: String,
    pub level: String,
    pub layer: usize,
    pub condition: Condition,
    pub accuracy: f64,
    pub stderr: f64,
    pub pooled_accuracy: f64,
    pub confidence: Option<f64>,
    pub n_samples: usize,
    pub n_folds: usize,
    pub failed_folds: usize,
    pub converged: bool,
    pub config: String,
}

impl ProbeResult {
    pub fn from_cv(
        cv: &CrossValidation,
        model: &str,
        task: &str,
        level: &str,
        layer: usize,
        condition: Condition,
        cfg: &TrainConfig,
    ) -> Self {
        Self {
            model: model.to_string(),
            task: task.to_string(),
            level: level.to_string(),
            layer,
            condition,
            accuracy: cv.accuracy_mean,
            stderr: cv.accuracy_stderr,
            pooled_accuracy: cv.pooled_accuracy,
            confidence: cv.confidence,
            n_samples: cv.n_samples,
            n_folds: cv.folds.len(),
            failed_folds: cv.failed_folds,
            converged: cv.converged,
            config: cfg.fingerprint(),
        }
    }

    pub fn key(&self) -> (String, usize, Condition) {
        (self.task.clone(), self.layer, self.condition)
    }
}

/// Trained vs untrained accuracy for one cell, with its selection score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub task: String,
    pub level: String,
    pub layer: usize,
    pub condition: Condition,
    pub acc_trained: f64,
    pub acc_untrained: f64,
    pub selection: f64,
}

impl ScoreReport {
    pub fn new(trained: &ProbeResult, untrained: &ProbeResult) -> Self {
        Self {
            task: trained.task.clone(),
            level: trained.level.clone(),
            layer: trained.layer,
            condition: trained.condition,
            acc_trained: trained.accuracy,
            acc_untrained: untrained.accuracy,
            selection: selection_score(trained.accuracy, untrained.accuracy),
        }
    }
}

/// Joins two result tables on (task, layer, condition). Cells present in only
/// one table are skipped. Output follows the order of `trained`.
pub fn join_scores(trained: &[ProbeResult], untrained: &[ProbeResult]) -> Vec<ScoreReport> {
    let lookup: std::collections::HashMap<_, _> = untrained.iter().map(|r| (r.key(), r)).collect();
    trained
        .iter()
        .filter_map(|t| lookup.get(&t.key()).map(|u| ScoreReport::new(t, u)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::assign_folds_for;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn separable_1d_boundary_at_zero() {
        let x = matrix(&[&[-1.0], &[1.0]]);
        let cfg = TrainConfig {
            l2_strength: 1e-3,
            standardize: false,
            ..TrainConfig::default()
        };
        let m = fit_logistic(&x, &[0, 1], &cfg).unwrap();
        assert!(m.converged);
        assert!(m.bias.abs() < 1e-6);
        let probe = matrix(&[&[-0.3], &[-1e-3], &[1e-3], &[2.0]]);
        assert_eq!(predict_proba(&m, &probe).unwrap().hard_labels(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = matrix(&[&[1.0], &[2.0], &[3.0]]);
        assert!(matches!(
            fit_logistic(&x, &[1, 1, 1], &TrainConfig::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let x = matrix(&[&[1.0], &[f64::NAN]]);
        assert!(matches!(fit_logistic(&x, &[0, 1], &TrainConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(40, 5, |_, _| rng.random::<f64>());
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let cfg = TrainConfig {
            max_iterations: 1,
            ..TrainConfig::default()
        };
        let m = fit_logistic(&x, &y, &cfg).unwrap();
        assert!(!m.converged);
        assert_eq!(m.iterations, 1);
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = ProbeModel {
            weights: vec![0.0, 0.0],
            bias: 0.0,
            feature_means: vec![0.0; 2],
            feature_scales: vec![1.0; 2],
            converged: true,
            iterations: 0,
            gradient_max_norm: 0.0,
            objective_trace: vec![],
        };
        let x = matrix(&[&[3.0, -1.0], &[100.0, 7.0]]);
        let p = predict_proba(&m, &x).unwrap();
        assert!(p.rows().iter().all(|r| *r == [0.5, 0.5]));
        assert_eq!(p.hard_labels(), vec![0, 0]);
        assert!(matches!(predict_proba(&m, &matrix(&[&[1.0]])), Err(Error::Input(_))));
    }

    #[test]
    fn probability_increases_with_decision_value() {
        let m = ProbeModel {
            weights: vec![1.0],
            bias: 0.0,
            feature_means: vec![0.0],
            feature_scales: vec![1.0],
            converged: true,
            iterations: 0,
            gradient_max_norm: 0.0,
            objective_trace: vec![],
        };
        let x = DMatrix::from_fn(60, 1, |i, _| i as f64 - 20.0);
        let p = predict_proba(&m, &x).unwrap();
        let p1: Vec<f64> = p.rows().iter().map(|r| r[1]).collect();
        assert!(p1.windows(2).all(|w| w[0] <= w[1]));
        assert!(p.rows().iter().all(|r| (r[0] + r[1] - 1.0).abs() < 1e-9 && r[1] > 0.0 && r[1] < 1.0));
    }

    #[test]
    fn confidence_examples() {
        let p = PredictionMatrix::from_positive([0.9, 0.3]).unwrap();
        assert_eq!(confidence_score(&p, &[1, 0], &p.hard_labels()).unwrap(), Some(0.8));
        assert_eq!(confidence_score(&p, &[0, 1], &p.hard_labels()).unwrap(), None);
        let p = PredictionMatrix::from_positive([0.9, 0.99]).unwrap();
        assert_eq!(confidence_score(&p, &[1, 0], &[1, 1]).unwrap(), Some(0.9));
        assert!(confidence_score(&p, &[1], &[1, 1]).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(selection_score(0.9, 0.5), 0.9);
        assert_eq!(selection_score(0.8, 0.4), 0.96);
        assert_eq!(selection_score(0.8, 0.6), 0.64);
        assert_eq!(selection_score(0.0, 0.3), 0.0);
        assert_eq!(selection_score(0.7, 1.0), 0.0);
        assert_eq!(selection_score(0.6, 0.0), 1.2);
    }

    #[test]
    fn selection_matches_binary_formula_closely() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let (a, u): (f64, f64) = (rng.random(), rng.random());
            let binary = a * (1.0 + (0.5 - u) / 0.5);
            assert!((selection_score(a, u) - binary).abs() <= 4.0 * f64::EPSILON);
        }
        assert_eq!(selection_score(1e-300, 0.25), 1e-300 * 1.5);
    }

    #[test]
    fn cross_validate_separable() {
        let mut pair_ids = Vec::new();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for p in 0..20 {
            for label in [1u8, 0] {
                pair_ids.push(format!("p{p}"));
                rows.push([f64::from(label), f64::from(label)]);
                y.push(label);
            }
        }
        let x = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
        let ids: Vec<&str> = pair_ids.iter().map(String::as_str).collect();
        let unique: Vec<&str> = ids.iter().copied().step_by(2).collect();
        let folds = assign_folds_for(&unique, "t", 5, 1).unwrap();
        let cv = cross_validate(&x, &y, &ids, &folds, &TrainConfig::default()).unwrap();
        assert_eq!(cv.accuracy_mean, 1.0);
        assert_eq!(cv.accuracy_stderr, 0.0);
        assert_eq!(cv.failed_folds, 0);
        assert!(cv.confidence.unwrap() > 0.5);
    }

    #[test]
    fn cross_validate_missing_fold_entry() {
        let x = matrix(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let folds = assign_folds_for(&["a", "b"], "t", 2, 0).unwrap();
        let err = cross_validate(&x, &[1, 0, 1, 0], &["a", "a", "b", "c"], &folds, &TrainConfig::default());
        assert!(matches!(err, Err(Error::Fold(_))));
    }

    #[test]
    fn degenerate_fold_is_flagged() {
        // Pair "b" is all-positive, so the fold that trains on it alone sees one class.
        let x = matrix(&[&[0.0], &[1.0], &[2.0], &[3.0], &[4.0], &[5.0]]);
        let y = [1, 0, 1, 1, 1, 0];
        let ids = ["a", "a", "b", "b", "c", "c"];
        let folds = assign_folds_for(&["a", "b", "c"], "t", 3, 0).unwrap();
        let cv = cross_validate(&x, &y, &ids, &folds, &TrainConfig::default()).unwrap();
        assert_eq!(cv.failed_folds, 0);
        let y = [1, 1, 1, 1, 0, 0];
        let cv = cross_validate(&x, &y, &ids, &folds, &TrainConfig::default()).unwrap();
        assert_eq!(cv.failed_folds, 1);
        assert_eq!(cv.folds.iter().filter(|f| f.error.is_some()).count(), 1);
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(TrainConfig::default().fingerprint(), "l2=1;iter=500;tol=1e-6;std=true;seed=0");
    }

    #[test]
    fn scores_join_on_cells() {
        let cv = CrossValidation {
            accuracy_mean: 0.8,
            accuracy_stderr: 0.0,
            pooled_accuracy: 0.8,
            confidence: None,
            n_samples: 10,
            failed_folds: 0,
            converged: true,
            folds: vec![],
        };
        let cfg = TrainConfig::default();
        let t = ProbeResult::from_cv(&cv, "m", "a", "syntax", 0, Condition::Mean, &cfg);
        let mut u = t.clone();
        u.accuracy = 0.4;
        let mut other = t.clone();
        other.layer = 3;
        let s = join_scores(&[t, other], &[u]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].selection, 0.96);
    }
}
