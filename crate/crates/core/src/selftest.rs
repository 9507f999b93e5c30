//! Property suites on synthetic data, runnable without any dataset.
//!
//! | id | property |
//! |----|----------|
//! | a | PI weights satisfy the normal equations |
//! | b | LDA fitted on shared-covariance Gaussians decides like the true Bayes rule |
//! | c | posteriors are normalized, argmax- and shift-invariant |
//! | d | the fitted class statistics maximize the training log-likelihood |
//! | e | posteriors from linear scores equal those from the Gaussian quadratic form |
//! | f | IDX fixtures parse exactly and round-trip byte for byte |

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::{parse_idx_images, parse_idx_labels, synth_gaussian, write_idx_images, write_idx_labels};
use crate::error::Result;
use crate::hidden::Activations;
use crate::linalg::{matmul, matmul_transpose_b, Cholesky};
use crate::matrix::Matrix;
use crate::seed::{derive_seed, Purpose};
use crate::solvers::{
    build_targets, class_stats, log_likelihood, posteriors, score, solve_lda, solve_pi, ClassStats, PriorsPolicy,
    Scores,
};

pub const PI_RESIDUAL_TOL: f64 = 1e-8;
pub const BAYES_AGREEMENT_MIN: f64 = 0.99;
/// Smallest Mahalanobis distance between class means in suite b.
pub const BAYES_MIN_SEPARATION: f64 = 5.0;
pub const POSTERIOR_TOL: f64 = 1e-12;
pub const QUADRATIC_FORM_TOL: f64 = 1e-10;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub id: char,
    pub name: &'static str,
    pub passed: bool,
    /// Instances checked.
    pub cases: usize,
    /// Worst observed value of the suite's metric.
    pub worst: f64,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} ({} cases; {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.cases,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn suite(&self, id: char) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.id == id)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

pub const SUITE_IDS: [char; 6] = ['a', 'b', 'c', 'd', 'e', 'f'];

/// Runs every suite.
pub fn run_selftest(seed: u64) -> SelftestReport {
    SelftestReport {
        suites: SUITE_IDS
            .iter()
            .map(|&id| run_suite(id, seed).expect("known id"))
            .collect(),
    }
}

/// Runs one suite by id; `None` for an unknown id.
pub fn run_suite(id: char, seed: u64) -> Option<SuiteResult> {
    let r = match id {
        'a' => pi_normal_equations(seed),
        'b' => lda_matches_bayes(seed),
        'c' => posterior_properties(seed),
        'd' => likelihood_maximality(seed),
        'e' => quadratic_form_equivalence(seed),
        'f' => idx_fixtures(),
        _ => return None,
    };
    Some(r.unwrap_or_else(|e| SuiteResult {
        id,
        name: "error",
        passed: false,
        cases: 0,
        worst: f64::NAN,
        detail: e.to_string(),
    }))
}

fn rng_for(seed: u64, suite: char, case: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[Purpose::Synthetic as u64, suite as u64, case as u64],
    ))
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `B B^T / m + floor I`, comfortably positive definite.
fn random_spd(rng: &mut ChaCha8Rng, m: usize, floor: f64) -> Matrix {
    let b = gaussian_matrix(rng, m, m);
    let mut s = matmul_transpose_b(&b, &b).expect("square");
    for i in 0..m {
        for j in 0..m {
            s[(i, j)] /= m as f64;
        }
        s[(i, i)] += floor;
    }
    s
}

fn random_priors(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|p| p / total).collect()
}

/// Means `L (scale z_n)` for the covariance factor `L`, so the Mahalanobis
/// distance between classes is `scale |z_i - z_j|`.
fn random_means(rng: &mut ChaCha8Rng, cov: &Matrix, n: usize, scale: f64) -> Result<Vec<Vec<f64>>> {
    let z: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..cov.rows())
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    color(cov, &z)
}

/// Like [`random_means`] but redraws until every pair of classes is at
/// least `min_dist` apart in Mahalanobis distance.
fn separated_means(rng: &mut ChaCha8Rng, cov: &Matrix, n: usize, min_dist: f64) -> Result<Vec<Vec<f64>>> {
    let m = cov.rows();
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(n);
    while z.len() < n {
        let cand: Vec<f64> = (0..m)
            .map(|_| min_dist * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let far = z.iter().all(|w| {
            let d2: f64 = w.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 >= min_dist * min_dist
        });
        if far {
            z.push(cand);
        }
    }
    color(cov, &z)
}

/// `L z` for each `z`, with `L` the Cholesky factor of `cov`.
fn color(cov: &Matrix, z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let chol = Cholesky::factor(cov)?;
    let l = chol.lower();
    Ok(z.iter()
        .map(|z| {
            (0..cov.rows())
                .map(|i| (0..=i).map(|p| l[(i, p)] * z[p]).sum())
                .collect()
        })
        .collect())
}

fn means_matrix(means: &[Vec<f64>]) -> Matrix {
    Matrix::from_fn(means[0].len(), means.len(), |i, n| means[n][i])
}

/// ‖W (A A^T) - T A^T‖ / ‖T A^T‖ over 100 random least-squares problems.
pub fn pi_normal_equations(seed: u64) -> Result<SuiteResult> {
    let cases = 100;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = rng_for(seed, 'a', case);
        let k = rng.random_range(50..=500);
        let m = rng.random_range(2..=40);
        let n = rng.random_range(2..=10);
        let a = Activations::new(Matrix::from_fn(m, k, |_, _| rng.random::<f64>()));
        let labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
        let t = build_targets(&labels, n)?;
        let w = solve_pi(&a, &t, 0.0)?;
        let gram = matmul_transpose_b(a.matrix(), a.matrix())?;
        let rhs = matmul_transpose_b(t.matrix(), a.matrix())?;
        let resid = matmul(w.matrix(), &gram)?.sub(&rhs)?;
        worst = worst.max(resid.frobenius_norm() / rhs.frobenius_norm());
    }
    Ok(SuiteResult {
        id: 'a',
        name: "PI normal equations",
        passed: worst < PI_RESIDUAL_TOL,
        cases,
        worst,
        detail: format!("max relative residual {worst:.3e} < {PI_RESIDUAL_TOL:e}"),
    })
}

/// Fraction of fresh points on which fitted LDA and the true-parameter Bayes
/// rule agree, over 20 Gaussian problems with a shared covariance and
/// classes at least [`BAYES_MIN_SEPARATION`] apart.
pub fn lda_matches_bayes(seed: u64) -> Result<SuiteResult> {
    let cases = 20;
    let mut worst: f64 = 1.0;
    for case in 0..cases {
        let mut rng = rng_for(seed, 'b', case);
        let m = rng.random_range(2..=8);
        let n = rng.random_range(2..=4);
        let cov = random_spd(&mut rng, m, 0.5);
        let means = separated_means(&mut rng, &cov, n, BAYES_MIN_SEPARATION)?;
        let priors = random_priors(&mut rng, n);
        let train_seed = rng.random::<u64>();
        let test_seed = rng.random::<u64>();
        let train = synth_gaussian(&means, &cov, &priors, 100 * m, train_seed)?;
        let test = synth_gaussian(&means, &cov, &priors, 10_000, test_seed)?;

        let fitted = class_stats(
            &Activations::new(train.x().clone()),
            train.labels(),
            n,
            &PriorsPolicy::Empirical,
        )?;
        let truth = ClassStats::from_parts(means_matrix(&means), cov, priors, vec![1; n])?;
        let a_test = Activations::new(test.x().clone());
        let fitted_pred = score(&solve_lda(&fitted, 0.0)?, &a_test)?.classify();
        let bayes_pred = score(&solve_lda(&truth, 0.0)?, &a_test)?.classify();
        let agree = fitted_pred.iter().zip(&bayes_pred).filter(|(a, b)| a == b).count();
        worst = worst.min(agree as f64 / test.len() as f64);
    }
    Ok(SuiteResult {
        id: 'b',
        name: "LDA equals Bayes",
        passed: worst >= BAYES_AGREEMENT_MIN,
        cases,
        worst,
        detail: format!(
            "min agreement {:.2}% >= {:.0}%",
            100.0 * worst,
            100.0 * BAYES_AGREEMENT_MIN
        ),
    })
}

/// Normalization, argmax preservation and shift invariance of the softmax
/// on 100000 random score columns.
pub fn posterior_properties(seed: u64) -> Result<SuiteResult> {
    let (n, chunk, chunks) = (10, 10_000, 10);
    let mut worst_sum: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    let mut argmax_mismatch = 0usize;
    for c in 0..chunks {
        let mut rng = rng_for(seed, 'c', c);
        // Every tenth column is stretched to +-3e4 to exercise overflow.
        let y = Matrix::from_fn(n, chunk, |_, j| {
            let v = rng.random_range(-30.0..30.0);
            if j % 10 == 0 {
                v * 1e3
            } else {
                v
            }
        });
        let shifts: Vec<f64> = (0..chunk).map(|_| rng.random_range(-100.0..100.0)).collect();
        let scores = Scores::new(y.clone());
        let p = posteriors(&scores);
        for j in 0..chunk {
            let sum: f64 = (0..n).map(|i| p.matrix()[(i, j)]).sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
        }
        argmax_mismatch += p
            .classify()
            .iter()
            .zip(scores.classify())
            .filter(|(a, b)| **a != *b)
            .count();

        let moderate: Vec<usize> = (0..chunk).filter(|j| j % 10 != 0).collect();
        let base = y.select_columns(&moderate);
        let shifted = Matrix::from_fn(n, moderate.len(), |i, j| base[(i, j)] + shifts[moderate[j]]);
        let p0 = posteriors(&Scores::new(base));
        let p1 = posteriors(&Scores::new(shifted));
        worst_shift = worst_shift.max(p0.matrix().sub(p1.matrix())?.max_abs());
    }
    let worst = worst_sum.max(worst_shift);
    Ok(SuiteResult {
        id: 'c',
        name: "posterior normalization and invariances",
        passed: worst_sum <= POSTERIOR_TOL && worst_shift <= POSTERIOR_TOL && argmax_mismatch == 0,
        cases: chunk * chunks,
        worst,
        detail: format!(
            "max |sum - 1| {worst_sum:.2e}, max shift change {worst_shift:.2e}, argmax mismatches {argmax_mismatch}"
        ),
    })
}

/// The fitted statistics beat every tested perturbation of the means and
/// every `Sigma + eps I`, for eps in {1e-3, 1e-2}, on 20 datasets.
pub fn likelihood_maximality(seed: u64) -> Result<SuiteResult> {
    let cases = 20;
    let directions = 50;
    let mut violations = 0usize;
    let mut checks = 0usize;
    let mut smallest_gap = f64::INFINITY;
    for case in 0..cases {
        let mut rng = rng_for(seed, 'd', case);
        let m = rng.random_range(2..=6);
        let n = rng.random_range(2..=4);
        let cov = random_spd(&mut rng, m, 0.5);
        let means = random_means(&mut rng, &cov, n, 2.0)?;
        let priors = random_priors(&mut rng, n);
        let data = synth_gaussian(&means, &cov, &priors, 100 * m * n, rng.random())?;
        let a = Activations::new(data.x().clone());
        let stats = class_stats(&a, data.labels(), n, &PriorsPolicy::Empirical)?;
        let best = log_likelihood(&stats, &a, data.labels())?;
        let mut check = |candidate: ClassStats| -> Result<()> {
            let gap = best - log_likelihood(&candidate, &a, data.labels())?;
            checks += 1;
            smallest_gap = smallest_gap.min(gap);
            if gap <= 0.0 {
                violations += 1;
            }
            Ok(())
        };
        for eps in [1e-3, 1e-2] {
            for _ in 0..directions {
                let d = gaussian_matrix(&mut rng, m, n);
                let d = d.scale(eps / d.frobenius_norm());
                check(stats.with_means(stats.means().add(&d)?)?)?;
            }
            check(stats.with_cov(stats.pooled_cov().add(&Matrix::identity(m).scale(eps))?)?)?;
        }
    }
    Ok(SuiteResult {
        id: 'd',
        name: "log-likelihood maximality",
        passed: violations == 0,
        cases: checks,
        worst: smallest_gap,
        detail: format!("{violations} perturbations matched or beat the estimate; smallest gap {smallest_gap:.3e}"),
    })
}

/// Posteriors from `ln pi_n - (a - mu_n)' S^-1 (a - mu_n) / 2` against the
/// softmax of the LDA scores, on 50 random models.
pub fn quadratic_form_equivalence(seed: u64) -> Result<SuiteResult> {
    let cases = 50;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = rng_for(seed, 'e', case);
        let m = rng.random_range(2..=6);
        let n = rng.random_range(2..=5);
        let k = 20;
        let cov = random_spd(&mut rng, m, 0.3);
        let means = random_means(&mut rng, &cov, n, 1.5)?;
        let priors = random_priors(&mut rng, n);
        let x = gaussian_matrix(&mut rng, m, k).scale(2.0);
        let stats = ClassStats::from_parts(means_matrix(&means), cov.clone(), priors.clone(), vec![1; n])?;
        let linear = posteriors(&score(&solve_lda(&stats, 0.0)?, &Activations::new(x.clone()))?);

        let chol = Cholesky::factor(&cov)?;
        let centered = Matrix::from_fn(m, n * k, |i, c| x[(i, c % k)] - means[c / k][i]);
        let solved = chol.solve(&centered)?;
        let quad = Matrix::from_fn(n, k, |c, j| {
            let q: f64 = (0..m).map(|i| centered[(i, c * k + j)] * solved[(i, c * k + j)]).sum();
            priors[c].ln() - 0.5 * q
        });
        let quadratic = posteriors(&Scores::new(quad));
        worst = worst.max(linear.matrix().sub(quadratic.matrix())?.max_abs());
    }
    Ok(SuiteResult {
        id: 'e',
        name: "quadratic form equals linear scores",
        passed: worst <= QUADRATIC_FORM_TOL,
        cases,
        worst,
        detail: format!("max posterior difference {worst:.2e} <= {QUADRATIC_FORM_TOL:e}"),
    })
}

/// A 2x2x2 image file and a 3-label file with known contents.
pub fn idx_fixtures() -> Result<SuiteResult> {
    let mut images = Vec::new();
    for v in [0x0803u32, 2, 2, 2] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(0u8..8);
    let labels = [0u8, 0, 8, 1, 0, 0, 0, 3, 5, 0, 9];

    let mut failures = Vec::new();
    match parse_idx_images(&images) {
        Ok(img) => {
            let expected = Matrix::from_rows(&[[0.0, 4.0], [1.0, 5.0], [2.0, 6.0], [3.0, 7.0]])?;
            if (img.rows, img.cols) != (2, 2) || img.pixels != expected {
                failures.push("image matrix differs".to_string());
            }
            if write_idx_images(&img)? != images {
                failures.push("image round trip differs".into());
            }
        }
        Err(e) => failures.push(format!("image parse: {e}")),
    }
    match parse_idx_labels(&labels, Some(9)) {
        Ok(l) => {
            if l != [5, 0, 9] {
                failures.push(format!("labels parsed as {l:?}"));
            }
            if write_idx_labels(&l)? != labels {
                failures.push("label round trip differs".into());
            }
        }
        Err(e) => failures.push(format!("label parse: {e}")),
    }
    Ok(SuiteResult {
        id: 'f',
        name: "IDX fixtures",
        passed: failures.is_empty(),
        cases: 2,
        worst: failures.len() as f64,
        detail: if failures.is_empty() {
            "exact parse and byte-identical round trip".into()
        } else {
            failures.join("; ")
        },
    })
}
