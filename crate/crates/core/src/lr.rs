//! Plaintext logistic-regression math shared by both parties, plus the
//! centralized baseline used as a correctness oracle.
//!
//! Conventions follow the federated split: a *partial score* is
//! `Θ^party · x_i` over one party's columns, the full linear predictor is the
//! sum of both parties' partials, the residual is `y_i - ŷ_i`, and the
//! gradient is `-(1/n) Σ residual_i · x_i`, so updates subtract `η · grad`.

use std::ops::Range;

use thiserror::Error;

use crate::data::FeatureMatrix;

#[derive(Debug, Error)]
pub enum LrError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row ranges differ: {0:?} vs {1:?}")]
    RangeMismatch(Range<usize>, Range<usize>),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("labels must contain both classes")]
    SingleClass,
    #[error("label {0} is not 0/1")]
    BadLabel(u8),
}

/// One party's weight vector (`Θ^A` or `Θ^B`).
#[derive(Clone, Debug, PartialEq)]
pub struct PartyModel {
    pub weights: Vec<f64>,
    pub learning_rate: f64,
    pub iteration: u64,
}

impl PartyModel {
    pub fn zeros(n_features: usize, learning_rate: f64) -> Self {
        PartyModel {
            weights: vec![0.0; n_features],
            learning_rate,
            iteration: 0,
        }
    }
}

/// Partial scores for a contiguous row shard.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    pub partial_scores: Vec<f64>,
    pub row_range: Range<usize>,
}

/// Residuals `y_i - ŷ_i` for a row shard; every entry is in (-1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBatch {
    pub residuals: Vec<f64>,
    pub row_range: Range<usize>,
}

/// Numerically stable logistic function; saturates instead of overflowing.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `Θ^party · x_i` for every row in `row_range` of the party's shard.
pub fn partial_scores(
    model: &PartyModel,
    features: &FeatureMatrix,
    row_range: Range<usize>,
) -> Result<PredictionBatch, LrError> {
    if model.weights.len() != features.cols() {
        return Err(LrError::DimensionMismatch(format!(
            "model has {} weights, shard has {} features",
            model.weights.len(),
            features.cols()
        )));
    }
    if row_range.end > features.rows() || row_range.start > row_range.end {
        return Err(LrError::DimensionMismatch(format!(
            "row range {row_range:?} outside 0..{}",
            features.rows()
        )));
    }
    let mut partial_scores = Vec::with_capacity(row_range.len());
    for i in row_range.clone() {
        partial_scores.push(features.dot_row(i, &model.weights));
    }
    Ok(PredictionBatch {
        partial_scores,
        row_range,
    })
}

/// Elementwise sum of the two parties' partial scores (the full predictor).
pub fn combine_scores(a: &PredictionBatch, b: &PredictionBatch) -> Result<Vec<f64>, LrError> {
    if a.row_range != b.row_range {
        return Err(LrError::RangeMismatch(
            a.row_range.clone(),
            b.row_range.clone(),
        ));
    }
    Ok(a.partial_scores
        .iter()
        .zip(&b.partial_scores)
        .map(|(x, y)| x + y)
        .collect())
}

const PROB_CLAMP: f64 = 1e-12;

/// Residuals `y - sigmoid(score)` and the mean log loss, with predictions
/// clamped to `[1e-12, 1 - 1e-12]` before the logs.
pub fn residuals_and_loss(scores: &[f64], labels: &[u8]) -> Result<(ResidualBatch, f64), LrError> {
    if scores.is_empty() {
        return Err(LrError::EmptyBatch);
    }
    if scores.len() != labels.len() {
        return Err(LrError::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut residuals = Vec::with_capacity(scores.len());
    let mut loss_sum = 0.0;
    for (&z, &y) in scores.iter().zip(labels) {
        if !z.is_finite() {
            return Err(LrError::NonFinite("scores"));
        }
        if y > 1 {
            return Err(LrError::BadLabel(y));
        }
        let p = sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        residuals.push(f64::from(y) - p);
        loss_sum -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    let loss = loss_sum / scores.len() as f64;
    Ok((
        ResidualBatch {
            residuals,
            row_range: 0..scores.len(),
        },
        loss,
    ))
}

/// Shard-local gradient partial sum `-(1/n_total) Σ_i residual_i · x_i`.
/// Callers accumulate shard results by plain addition.
pub fn gradient(
    residuals: &ResidualBatch,
    features: &FeatureMatrix,
    n_total: usize,
) -> Result<Vec<f64>, LrError> {
    let acc = gradient_fixed(residuals, features)?;
    Ok(finish_gradient(&acc, n_total))
}

/// Fixed-point gradient accumulator: each product `residual_i * x_ij` is a
/// single f64 rounding, then quantized to 2^-40 and summed exactly in i128.
/// Summation is therefore associative, so any sharding of the rows reduces to
/// bit-identical totals — the property the worker-count invariance contract
/// depends on.
pub fn gradient_fixed(
    residuals: &ResidualBatch,
    features: &FeatureMatrix,
) -> Result<Vec<i128>, LrError> {
    let range = &residuals.row_range;
    if range.end > features.rows() || range.len() != residuals.residuals.len() {
        return Err(LrError::DimensionMismatch(format!(
            "residual range {range:?} does not fit shard with {} rows",
            features.rows()
        )));
    }
    let mut acc = vec![0i128; features.cols()];
    for (offset, i) in range.clone().enumerate() {
        let r = residuals.residuals[offset];
        if !r.is_finite() {
            return Err(LrError::NonFinite("residuals"));
        }
        features.for_each_in_row(i, |j, x| {
            acc[j] += quantize_q40(r * x);
        });
    }
    Ok(acc)
}

/// Converts an exact Q40 accumulator into the f64 gradient partial.
pub fn finish_gradient(acc: &[i128], n_total: usize) -> Vec<f64> {
    let scale = -1.0 / (n_total as f64);
    acc.iter()
        .map(|&a| (a as f64) * (2f64).powi(-40) * scale)
        .collect()
}

/// Adds one Q40 accumulator into another (the deterministic reduction).
pub fn add_gradient_fixed(total: &mut [i128], part: &[i128]) {
    for (t, p) in total.iter_mut().zip(part) {
        *t += p;
    }
}

fn quantize_q40(v: f64) -> i128 {
    // |v| < 2^64 comfortably in protocol use; round half away from zero.
    (v * (2f64).powi(40)).round() as i128
}

/// `weights ← weights − η · grad`, iteration incremented.
pub fn apply_update(model: &PartyModel, grad: &[f64]) -> Result<PartyModel, LrError> {
    if grad.len() != model.weights.len() {
        return Err(LrError::DimensionMismatch(format!(
            "{} gradient entries vs {} weights",
            grad.len(),
            model.weights.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(LrError::NonFinite("gradient"));
    }
    let weights = model
        .weights
        .iter()
        .zip(grad)
        .map(|(w, g)| w - model.learning_rate * g)
        .collect();
    Ok(PartyModel {
        weights,
        learning_rate: model.learning_rate,
        iteration: model.iteration + 1,
    })
}

/// Rank-based AUC (Mann-Whitney), ties counted half. Counting is done in
/// integers (half-pair units) so the result is exactly the pairwise
/// definition, not an approximation of it.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, LrError> {
    if scores.len() != labels.len() {
        return Err(LrError::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    for &y in labels {
        if y > 1 {
            return Err(LrError::BadLabel(y));
        }
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(LrError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Sweep ascending; count (wins, half-ties) in units of half-pairs.
    let mut half_pairs: u128 = 0;
    let mut negs_below: u128 = 0;
    let mut idx = 0;
    while idx < order.len() {
        let mut group_end = idx + 1;
        while group_end < order.len() && scores[order[group_end]] == scores[order[idx]] {
            group_end += 1;
        }
        let group = &order[idx..group_end];
        let pos_here = group.iter().filter(|&&i| labels[i] == 1).count() as u128;
        let neg_here = group.len() as u128 - pos_here;
        half_pairs += 2 * pos_here * negs_below + pos_here * neg_here;
        negs_below += neg_here;
        idx = group_end;
    }
    Ok(half_pairs as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Mean log loss of raw scores against labels (same clamping as training).
pub fn log_loss(scores: &[f64], labels: &[u8]) -> Result<f64, LrError> {
    residuals_and_loss(scores, labels).map(|(_, loss)| loss)
}

/// A centralized full-batch GD run over the complete feature set.
#[derive(Clone, Debug)]
pub struct CentralizedRun {
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
    pub iterations: u64,
}

/// Plain-f64 centralized logistic regression, written independently of the
/// shard primitives above (no shared scoring/gradient code): this is the
/// oracle federated training is compared against.
pub fn centralized_fit(
    features: &FeatureMatrix,
    labels: &[u8],
    eta: f64,
    max_iterations: u64,
    tolerance: f64,
    l2: f64,
) -> Result<CentralizedRun, LrError> {
    let n = features.rows();
    let m = features.cols();
    if n == 0 || n != labels.len() {
        return Err(LrError::DimensionMismatch(format!(
            "{n} rows vs {} labels",
            labels.len()
        )));
    }
    let mut w = vec![0.0f64; m];
    let mut losses = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iterations {
        let mut grad = vec![0.0f64; m];
        let mut loss = 0.0;
        for i in 0..n {
            let mut z = 0.0;
            features.for_each_in_row(i, |j, x| z += w[j] * x);
            let p = (1.0 / (1.0 + (-z).exp())).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = f64::from(labels[i]);
            loss -= if labels[i] == 1 { p.ln() } else { (1.0 - p).ln() };
            let coeff = -(y - p) / n as f64;
            features.for_each_in_row(i, |j, x| grad[j] += coeff * x);
        }
        loss /= n as f64;
        for j in 0..m {
            grad[j] += l2 * w[j];
        }
        for j in 0..m {
            w[j] -= eta * grad[j];
        }
        iterations += 1;
        let converged = losses
            .last()
            .map(|prev: &f64| (prev - loss).abs() < tolerance)
            .unwrap_or(false);
        losses.push(loss);
        if converged {
            break;
        }
    }
    Ok(CentralizedRun {
        weights: w,
        losses,
        iterations,
    })
}
