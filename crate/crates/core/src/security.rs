//! Executable leakage analysis for the training protocol.
//!
//! Two kinds of artifact: closed-form recoverability conditions over the
//! shape of a run (rows `n`, features `m`, rounds `r`), and concrete
//! attacks that actually perform the recoveries on small instances — B
//! solving its gradient equations for A's residuals (and hence labels)
//! when `m_B >= n`, and A solving for B's feature matrix when gradient
//! masking is disabled. `audit_run` bundles the conditions into a report
//! the CLI can gate on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureMatrix;

/// Below this magnitude a residual's sign carries no label information.
pub const SIGN_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SecurityError {
    #[error("underdetermined system: {m} gradient equations for {n} residual unknowns")]
    Underdetermined { n: usize, m: usize },
    #[error("insufficient rounds: {r} observed, at least {n} needed")]
    InsufficientRounds { r: usize, n: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("solve failed: {0}")]
    Solve(String),
}

/// B can solve its own gradient equations for every residual — and thus
/// every label — exactly when it holds at least as many features as there
/// are rows.
pub fn residual_recovery_condition(n: usize, m: usize) -> bool {
    m >= n
}

/// Rounds of plaintext score vectors after which A's equation count
/// catches up with the unknowns in `Θ^B` and `X^B`: `ceil(n·m / (n−m))`
/// when `n > m`, never otherwise. Pure equation counting — the system is
/// bilinear and no solver is implied.
pub fn score_equation_rounds(n: usize, m: usize) -> Option<u64> {
    if n > m {
        Some((n as u64 * m as u64).div_ceil((n - m) as u64))
    } else {
        None
    }
}

/// Outcome of B's residual-recovery attack.
#[derive(Clone, Debug)]
pub struct RecoveredResiduals {
    pub residuals: Vec<f64>,
    /// Label guess per row: positive residual means `y = 1`, negative
    /// `y = 0`; `None` where the residual is numerically zero.
    pub labels: Vec<Option<u8>>,
    /// Numerical rank of `X_B^T`; anything below `n` leaves directions of
    /// the residual vector unrecoverable.
    pub rank: usize,
}

/// B's attack: given its own feature shard and one unblinded gradient it
/// received, solve `-(1/n) X_B^T res = grad` for the residuals by least
/// squares. Requires `m >= n` (more equations than unknowns).
pub fn attack_recover_residuals(
    x_b: &FeatureMatrix,
    observed_gradient: &[f64],
    n_total: usize,
) -> Result<RecoveredResiduals, SecurityError> {
    let n = x_b.rows();
    let m = x_b.cols();
    if n == 0 || n_total == 0 {
        return Err(SecurityError::Shape("empty instance".into()));
    }
    if observed_gradient.len() != m {
        return Err(SecurityError::Shape(format!(
            "{} gradient entries for {m} features",
            observed_gradient.len()
        )));
    }
    if m < n {
        return Err(SecurityError::Underdetermined { n, m });
    }
    let mut a = DMatrix::zeros(m, n);
    for i in 0..n {
        x_b.for_each_in_row(i, |j, x| a[(j, i)] = -x / n_total as f64);
    }
    let rhs = DVector::from_column_slice(observed_gradient);
    let svd = a.svd(true, true);
    let eps = svd.singular_values.max() * 1e-12;
    let rank = svd.rank(eps);
    let sol = svd
        .solve(&rhs, eps)
        .map_err(|e| SecurityError::Solve(e.into()))?;
    let residuals: Vec<f64> = sol.iter().copied().collect();
    let labels = residuals
        .iter()
        .map(|&r| {
            if r.abs() < SIGN_EPS {
                None
            } else {
                Some(u8::from(r > 0.0))
            }
        })
        .collect();
    Ok(RecoveredResiduals {
        residuals,
        labels,
        rank,
    })
}

/// Outcome of A's feature-recovery attack.
#[derive(Clone, Debug)]
pub struct RecoveredFeatures {
    /// Least-squares estimate of `X_B`, dense `n x m`.
    pub features: FeatureMatrix,
    /// Numerical rank of the residual history.
    pub rank: usize,
    /// `n - rank`: the dimension of feature space the observed rounds
    /// cannot pin down.
    pub null_dim: usize,
}

/// A's attack against an unmasked run: across `r` rounds A knows the
/// residual vectors it encrypted and — without masking — the exact
/// gradients it decrypted for B. Each feature column of `X_B` then solves
/// `-(1/n) R x = g` where `R` stacks the residual history.
pub fn attack_unmasked_gradients(
    residual_history: &[Vec<f64>],
    gradient_history: &[Vec<f64>],
    n_total: usize,
) -> Result<RecoveredFeatures, SecurityError> {
    let r = residual_history.len();
    if r == 0 || gradient_history.len() != r {
        return Err(SecurityError::Shape(format!(
            "{r} residual rounds vs {} gradient rounds",
            gradient_history.len()
        )));
    }
    let n = residual_history[0].len();
    let m = gradient_history[0].len();
    if n == 0 || m == 0 || n_total == 0 {
        return Err(SecurityError::Shape("empty instance".into()));
    }
    if residual_history.iter().any(|row| row.len() != n)
        || gradient_history.iter().any(|row| row.len() != m)
    {
        return Err(SecurityError::Shape("ragged history".into()));
    }
    if r < n {
        return Err(SecurityError::InsufficientRounds { r, n });
    }
    let mut c = DMatrix::zeros(r, n);
    for (t, row) in residual_history.iter().enumerate() {
        for (i, &res) in row.iter().enumerate() {
            c[(t, i)] = -res / n_total as f64;
        }
    }
    let mut g = DMatrix::zeros(r, m);
    for (t, row) in gradient_history.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            g[(t, j)] = v;
        }
    }
    let svd = c.svd(true, true);
    let eps = svd.singular_values.max() * 1e-12;
    let rank = svd.rank(eps);
    let sol = svd
        .solve(&g, eps)
        .map_err(|e| SecurityError::Solve(e.into()))?;
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            data.push(sol[(i, j)]);
        }
    }
    Ok(RecoveredFeatures {
        features: FeatureMatrix::Dense { cols: m, data },
        rank,
        null_dim: n - rank,
    })
}

/// `‖est − truth‖₂ / ‖truth‖₂`; zero for two empty vectors, infinite when
/// only the truth is zero.
pub fn relative_l2_error(est: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(est.len(), truth.len(), "mismatched vector lengths");
    let diff: f64 = est
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / norm
    }
}

/// Shape-level leakage audit of a configured or completed run. `m` is the
/// attacked party's (B's) feature count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    #[serde(rename = "residuals_recoverable_by_B")]
    pub residuals_recoverable_by_b: bool,
    #[serde(rename = "rounds_for_A_to_solve_scores")]
    pub rounds_for_a_to_solve_scores: Option<u64>,
    #[serde(rename = "unmasked_gradient_rounds_for_A")]
    pub unmasked_gradient_rounds_for_a: Option<u64>,
    pub notes: String,
}

impl LeakageReport {
    /// The conditions actually met by this run's shape. Empty means clean.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.residuals_recoverable_by_b {
            out.push(format!(
                "B's {} features cover all {} rows: every residual, and so every label, \
                 is recoverable by B",
                self.m, self.n
            ));
        }
        if let Some(t) = self.rounds_for_a_to_solve_scores {
            if self.r as u64 >= t {
                out.push(format!(
                    "{} rounds of B's plaintext scores observed; A's equation count \
                     balances the unknowns at round {t}",
                    self.r
                ));
            }
        }
        if let Some(t) = self.unmasked_gradient_rounds_for_a {
            out.push(format!(
                "gradient masking is disabled; A can solve for B's feature matrix \
                 after {t} rounds ({} observed)",
                self.r
            ));
        }
        out
    }

    pub fn is_clean(&self) -> bool {
        self.warnings().is_empty()
    }
}

pub fn audit_run(n: usize, m_a: usize, m_b: usize, r: usize, masking: bool) -> LeakageReport {
    let residuals_recoverable_by_b = residual_recovery_condition(n, m_b);
    let rounds_for_a_to_solve_scores = score_equation_rounds(n, m_b);
    let unmasked_gradient_rounds_for_a = if masking { None } else { Some(n as u64) };

    let mut notes = Vec::new();
    if residuals_recoverable_by_b {
        notes.push(
            "m_B >= n: B's gradient equations determine A's residuals and labels; \
             training refuses this shape unless explicitly overridden"
                .to_string(),
        );
    }
    match rounds_for_a_to_solve_scores {
        Some(t) if (r as u64) >= t => notes.push(format!(
            "equation counting says {t} rounds of plaintext scores balance the \
             unknowns in B's model and features; this run reached {r} \
             (the system is bilinear; counting does not imply a solver)"
        )),
        Some(t) => notes.push(format!(
            "plaintext score equations balance only after {t} rounds; this run has {r}"
        )),
        None => notes.push(
            "plaintext score equations never balance: per-round unknowns grow at \
             least as fast as equations"
                .to_string(),
        ),
    }
    if masking {
        notes.push("gradient masking on: A sees only blinded gradients for B".to_string());
    } else {
        notes.push(format!(
            "gradient masking OFF (test-only mode): A recovers B's feature matrix \
             once {n} rounds accumulate"
        ));
    }
    // m_a = 0 means the auditor (party B) cannot see A's width.
    if m_a > 0 {
        notes.push(format!(
            "party A's own {m_a} features and its labels never leave A readable; \
             no condition here exposes them"
        ));
    } else {
        notes.push(
            "party A's features and labels never leave A readable; \
             no condition here exposes them"
                .to_string(),
        );
    }

    LeakageReport {
        n,
        m: m_b,
        r,
        residuals_recoverable_by_b,
        rounds_for_a_to_solve_scores,
        unmasked_gradient_rounds_for_a,
        notes: notes.join("; "),
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng as _, SeedableRng as _};

    use super::*;
    use crate::protocol::{drive_in_process, PartyA, PartyB, TrainConfig, WeightInit};

    fn dense(cols: usize, data: Vec<f64>) -> FeatureMatrix {
        FeatureMatrix::Dense { cols, data }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        dense(cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    #[test]
    fn condition_formulas_hold_across_the_whole_grid() {
        for n in 1..=1000usize {
            for m in 1..=1000usize {
                assert_eq!(residual_recovery_condition(n, m), m >= n);
                let direct = if n > m {
                    Some(((n as f64 * m as f64) / (n as f64 - m as f64)).ceil() as u64)
                } else {
                    None
                };
                assert_eq!(score_equation_rounds(n, m), direct, "n={n} m={m}");
            }
        }
    }

    #[test]
    fn condition_boundary_cases() {
        assert!(residual_recovery_condition(100, 100));
        assert!(!residual_recovery_condition(100, 99));
        assert!(residual_recovery_condition(1, 1));
        assert_eq!(score_equation_rounds(100, 50), Some(100));
        assert_eq!(score_equation_rounds(100, 100), None);
        assert_eq!(score_equation_rounds(3, 2), Some(6));
    }

    #[test]
    fn residual_attack_solves_a_synthetic_instance() {
        let n = 5;
        let x_b = random_matrix(n, 8, 11);
        let truth = [0.43, -0.17, 0.0, 0.61, -0.52];
        let mut grad = vec![0.0; 8];
        for i in 0..n {
            x_b.for_each_in_row(i, |j, x| grad[j] += -x * truth[i] / n as f64);
        }
        let got = attack_recover_residuals(&x_b, &grad, n).unwrap();
        assert_eq!(got.rank, n);
        assert!(relative_l2_error(&got.residuals, &truth) < 1e-10);
        assert_eq!(
            got.labels,
            vec![Some(1), Some(0), None, Some(1), Some(0)]
        );
    }

    #[test]
    fn residual_attack_refuses_underdetermined_instances() {
        let x_b = random_matrix(6, 4, 12);
        let err = attack_recover_residuals(&x_b, &[0.0; 4], 6).unwrap_err();
        assert!(matches!(err, SecurityError::Underdetermined { n: 6, m: 4 }));
    }

    #[test]
    fn residual_attack_works_on_a_real_transcript() {
        // a deliberately unsafe shape (m_B >= n) that B then exploits
        let n = 4;
        let x_a = random_matrix(n, 2, 21);
        let x_b = random_matrix(n, 6, 22);
        let labels = vec![1, 0, 1, 1];
        let cfg = TrainConfig {
            max_iterations: 3,
            seed: Some(5),
            allow_unsafe_dims: true,
            record_history: true,
            init: WeightInit::SeededUniform { seed: 5 },
            ..TrainConfig::default()
        };
        let mut a = PartyA::new_serial(cfg.clone(), x_a, labels.clone()).unwrap();
        let mut b = PartyB::new_serial(cfg, x_b.clone()).unwrap();
        drive_in_process(&mut a, &mut b).unwrap();
        let (ra, rb) = (a.into_result(), b.into_result());

        for (rec_a, rec_b) in ra.history.iter().zip(&rb.history) {
            let got = attack_recover_residuals(&x_b, &rec_b.gradient_b, n).unwrap();
            assert_eq!(got.rank, n);
            assert!(
                relative_l2_error(&got.residuals, &rec_a.residuals) < 1e-6,
                "iteration {}",
                rec_a.iteration
            );
            for i in 0..n {
                if rec_a.residuals[i].abs() > SIGN_EPS {
                    assert_eq!(got.labels[i], Some(labels[i]), "row {i}");
                }
            }
        }
    }

    #[test]
    fn feature_attack_solves_a_synthetic_instance() {
        let (n, m, rounds) = (6, 3, 10);
        let x_b = random_matrix(n, m, 31);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
        let residual_history: Vec<Vec<f64>> = (0..rounds)
            .map(|_| (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect())
            .collect();
        let gradient_history: Vec<Vec<f64>> = residual_history
            .iter()
            .map(|res| {
                let mut g = vec![0.0; m];
                for i in 0..n {
                    x_b.for_each_in_row(i, |j, x| g[j] += -x * res[i] / n as f64);
                }
                g
            })
            .collect();

        let got = attack_unmasked_gradients(&residual_history, &gradient_history, n).unwrap();
        assert_eq!((got.rank, got.null_dim), (n, 0));
        let (FeatureMatrix::Dense { data: est, .. }, FeatureMatrix::Dense { data: truth, .. }) =
            (&got.features, &x_b)
        else {
            panic!("dense in, dense out");
        };
        assert!(relative_l2_error(est, truth) < 1e-10);
    }

    #[test]
    fn feature_attack_reports_rank_deficiency_and_gates_rounds() {
        let err =
            attack_unmasked_gradients(&vec![vec![0.1; 4]; 3], &vec![vec![0.0; 2]; 3], 4)
                .unwrap_err();
        assert!(matches!(err, SecurityError::InsufficientRounds { r: 3, n: 4 }));

        // six rounds whose residuals all repeat one direction: rank 1
        let res = vec![vec![0.5, -0.25, 0.125]; 6];
        let grads = vec![vec![0.01, 0.02]; 6];
        let got = attack_unmasked_gradients(&res, &grads, 3).unwrap();
        assert_eq!((got.rank, got.null_dim), (1, 2));
    }

    fn attack_run(masking: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, FeatureMatrix) {
        let n = 6;
        let x_a = random_matrix(n, 2, 41);
        let x_b = random_matrix(n, 3, 42);
        let labels = vec![1, 0, 0, 1, 1, 0];
        let cfg = TrainConfig {
            eta: 1.5,
            max_iterations: 10,
            tolerance: 0.0,
            masking,
            seed: Some(6),
            record_history: true,
            init: WeightInit::SeededUniform { seed: 7 },
            ..TrainConfig::default()
        };
        let mut a = PartyA::new_serial(cfg.clone(), x_a, labels).unwrap();
        let mut b = PartyB::new_serial(cfg, x_b.clone()).unwrap();
        drive_in_process(&mut a, &mut b).unwrap();
        let ra = a.into_result();
        // what A actually saw: its own residuals and the decrypted step-5 values
        let residuals = ra.history.iter().map(|h| h.residuals.clone()).collect();
        let observed = ra.history.iter().map(|h| h.masked_gradient_b.clone()).collect();
        (residuals, observed, x_b)
    }

    #[test]
    fn masking_defeats_the_feature_attack() {
        let (res_off, grads_off, x_b) = attack_run(false);
        let off = attack_unmasked_gradients(&res_off, &grads_off, 6).unwrap();
        let FeatureMatrix::Dense { data: truth, .. } = &x_b else { unreachable!() };
        let FeatureMatrix::Dense { data: est_off, .. } = &off.features else { unreachable!() };
        let err_off = relative_l2_error(est_off, truth);
        assert_eq!(off.rank, 6);
        assert!(err_off < 1e-6, "unmasked recovery error {err_off}");

        let (res_on, grads_on, _) = attack_run(true);
        let on = attack_unmasked_gradients(&res_on, &grads_on, 6).unwrap();
        let FeatureMatrix::Dense { data: est_on, .. } = &on.features else { unreachable!() };
        let err_on = relative_l2_error(est_on, truth);
        assert!(
            err_on > err_off * 1e3,
            "masking only weakened the attack {err_off} -> {err_on}"
        );
    }

    #[test]
    fn audit_report_flags_known_scenarios() {
        let clean = audit_run(10_000, 392, 200, 100, true);
        assert!(clean.is_clean());
        assert!(!clean.residuals_recoverable_by_b);
        assert_eq!(clean.rounds_for_a_to_solve_scores, Some(205));
        assert_eq!(clean.unmasked_gradient_rounds_for_a, None);

        let wide_b = audit_run(50, 10, 100, 1, true);
        assert!(wide_b.residuals_recoverable_by_b);
        assert!(!wide_b.is_clean());
        assert_eq!(wide_b.rounds_for_a_to_solve_scores, None);

        let long_run = audit_run(100, 10, 50, 100, true);
        assert_eq!(long_run.rounds_for_a_to_solve_scores, Some(100));
        assert_eq!(long_run.warnings().len(), 1);

        let unmasked = audit_run(100, 10, 50, 10, false);
        assert_eq!(unmasked.unmasked_gradient_rounds_for_a, Some(100));
        assert!(!unmasked.is_clean());
    }

    #[test]
    fn leakage_report_serializes_with_documented_field_names() {
        let report = audit_run(100, 10, 50, 100, true);
        let json = serde_json::to_string(&report).unwrap();
        for key in [
            "\"n\":",
            "\"m\":",
            "\"r\":",
            "\"residuals_recoverable_by_B\":",
            "\"rounds_for_A_to_solve_scores\":",
            "\"unmasked_gradient_rounds_for_A\":",
            "\"notes\":",
        ] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
        let back: LeakageReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_l2_error(&[], &[]), 0.0);
        assert_eq!(relative_l2_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_l2_error(&[1.0], &[0.0]), f64::INFINITY);
        assert!((relative_l2_error(&[1.1], &[1.0]) - 0.1).abs() < 1e-12);
    }
}
