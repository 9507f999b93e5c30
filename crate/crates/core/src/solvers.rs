//! Hidden-to-output weight solvers and the scoring path.
//!
//! Two ways of turning hidden activations `A` (`M x K`) and labels into
//! output weights:
//!
//! * [`solve_pi`]: least squares against one-hot targets,
//!   `W = T A^T (A A^T + ridge I)^-1`, an `N x M` matrix.
//! * [`solve_lda`]: a shared-covariance Gaussian model of `A` per class,
//!   estimated by maximum likelihood ([`class_stats`]). Row `n` of the
//!   `N x (M+1)` result is `[log pi_n - mu_n' S^-1 mu_n / 2, mu_n' S^-1]`, so
//!   scores are class log-posteriors up to a per-sample constant.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hidden::Activations;
use crate::linalg::{gram, gram_accumulate, matmul, matmul_transpose_b, spd_factor, spd_solve, Cholesky};
use crate::matrix::Matrix;

/// Columns per centered block when accumulating the pooled covariance.
const COVARIANCE_CHUNK: usize = 2048;

/// Tolerance on the sum of explicitly given priors.
pub const PRIOR_SUM_TOL: f64 = 1e-9;

/// One-hot targets, `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix(Matrix);

impl TargetMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.rows()
    }
}

/// Builds the one-hot target matrix with a 1 in row `labels[k]` of column `k`.
///
/// ```
/// use elm_lda::solvers::build_targets;
/// let t = build_targets(&[1], 4).unwrap();
/// assert_eq!(t.matrix().column(0), vec![0.0, 1.0, 0.0, 0.0]);
/// ```
pub fn build_targets(labels: &[usize], num_classes: usize) -> Result<TargetMatrix> {
    check_labels(labels, num_classes)?;
    let mut t = Matrix::zeros(num_classes, labels.len());
    for (k, &n) in labels.iter().enumerate() {
        t[(n, k)] = 1.0;
    }
    Ok(TargetMatrix(t))
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= num_classes) {
        None => Ok(()),
        Some(index) => Err(Error::LabelOutOfRange {
            index,
            value: labels[index],
            num_classes,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Pi,
    Lda,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Pi => "pi",
            SolverKind::Lda => "lda",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            SolverKind::Pi => 0,
            SolverKind::Lda => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SolverKind::Pi),
            1 => Some(SolverKind::Lda),
            _ => None,
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pi" | "pinv" | "pseudo-inverse" => Ok(SolverKind::Pi),
            "lda" => Ok(SolverKind::Lda),
            other => Err(Error::InvalidArgument(format!("unknown solver {other:?}"))),
        }
    }
}

/// Hidden-to-output weights. `Pi` weights are `N x M`; `Lda` weights are
/// `N x (M+1)` with the bias in column 0.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputWeights {
    kind: SolverKind,
    w: Matrix,
    jitter: f64,
}

impl OutputWeights {
    pub fn new(kind: SolverKind, w: Matrix) -> Result<Self> {
        w.check_finite()?;
        if kind == SolverKind::Lda && w.cols() == 0 {
            return Err(Error::InvalidArgument("LDA weights need a bias column".into()));
        }
        Ok(OutputWeights { kind, w, jitter: 0.0 })
    }

    /// Records the diagonal shift used to obtain these weights.
    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn kind(&self) -> SolverKind {
        self.kind
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    /// Number of hidden units the weights expect.
    pub fn num_units(&self) -> usize {
        match self.kind {
            SolverKind::Pi => self.w.cols(),
            SolverKind::Lda => self.w.cols() - 1,
        }
    }

    /// Diagonal shift the SPD solve ended up using (ridge or jitter).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// LDA bias column, `log pi_n - mu_n' S^-1 mu_n / 2`.
    pub fn bias(&self) -> Option<Vec<f64>> {
        (self.kind == SolverKind::Lda).then(|| self.w.column(0))
    }
}

/// Pseudo-inverse solution `W = T A^T (A A^T + ridge I)^-1`.
///
/// With `ridge = 0` this is the least-squares fit of `W A` to `T`. The Gram
/// matrix is factored with jitter escalation; if even that fails the caller
/// should raise `ridge`.
pub fn solve_pi(a: &Activations, t: &TargetMatrix, ridge: f64) -> Result<OutputWeights> {
    let am = a.matrix();
    if t.matrix().cols() != am.cols() {
        return Err(Error::DimensionMismatch {
            op: "solve_pi",
            lhs: am.shape(),
            rhs: t.matrix().shape(),
        });
    }
    if am.rows() > am.cols() {
        warn!(
            "solve_pi: {} hidden units exceed {} samples; A A^T is singular without ridge",
            am.rows(),
            am.cols()
        );
    }
    let g = gram(am);
    // (T A^T)^T = A T^T; solving G X = A T^T gives X = W^T because G is symmetric.
    let rhs = matmul_transpose_b(am, t.matrix())?;
    let sol = spd_solve(&g, &rhs, ridge)?;
    let w = sol.x.transpose();
    w.check_finite()?;
    Ok(OutputWeights {
        kind: SolverKind::Pi,
        w,
        jitter: sol.jitter,
    })
}

/// How class priors are chosen.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PriorsPolicy {
    /// `1 / N` each.
    Uniform,
    /// Class frequencies `K_n / K`.
    #[default]
    Empirical,
    Explicit(Vec<f64>),
}

impl PriorsPolicy {
    pub fn resolve(&self, counts: &[usize]) -> Result<Vec<f64>> {
        let n = counts.len();
        match self {
            PriorsPolicy::Uniform => Ok(vec![1.0 / n as f64; n]),
            PriorsPolicy::Empirical => {
                let total: usize = counts.iter().sum();
                Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
            }
            PriorsPolicy::Explicit(p) => {
                validate_priors(p, n, PRIOR_SUM_TOL)?;
                Ok(p.clone())
            }
        }
    }
}

pub(crate) fn validate_priors(p: &[f64], num_classes: usize, tol: f64) -> Result<()> {
    if p.len() != num_classes {
        return Err(Error::InvalidPriors(format!(
            "{} priors given for {num_classes} classes",
            p.len()
        )));
    }
    if let Some(i) = p.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidPriors(format!("prior {i} is {} (must be > 0)", p[i])));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::InvalidPriors(format!("priors sum to {sum}, not 1")));
    }
    Ok(())
}

impl fmt::Display for PriorsPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorsPolicy::Uniform => f.write_str("uniform"),
            PriorsPolicy::Empirical => f.write_str("empirical"),
            PriorsPolicy::Explicit(p) => {
                let parts: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for PriorsPolicy {
    type Err = Error;

    /// `uniform`, `empirical`, or a comma-separated list of probabilities.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(PriorsPolicy::Uniform),
            "empirical" => Ok(PriorsPolicy::Empirical),
            list => list
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidPriors(format!("cannot parse {v:?} as a probability")))
                })
                .collect::<Result<Vec<_>>>()
                .map(PriorsPolicy::Explicit),
        }
    }
}

impl Serialize for PriorsPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PriorsPolicy::Explicit(p) => p.serialize(s),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for PriorsPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            List(Vec<f64>),
        }
        match Repr::deserialize(d)? {
            Repr::Name(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::List(p) => Ok(PriorsPolicy::Explicit(p)),
        }
    }
}

/// Divisor of the pooled covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceDivisor {
    /// `K`: the maximum-likelihood estimate.
    #[default]
    Samples,
    /// `K - N`: the unbiased estimate.
    SamplesMinusClasses,
}

impl FromStr for CovarianceDivisor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "samples" | "k" => Ok(CovarianceDivisor::Samples),
            "samples-minus-classes" | "k-n" => Ok(CovarianceDivisor::SamplesMinusClasses),
            other => Err(Error::InvalidArgument(format!("unknown covariance divisor {other:?}"))),
        }
    }
}

/// Per-class means, pooled covariance, priors and counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    /// `M x N`; column `n` is the mean of class `n`.
    means: Matrix,
    pooled_cov: Matrix,
    priors: Vec<f64>,
    counts: Vec<usize>,
}

impl ClassStats {
    /// Assembles statistics from parts, checking shapes and priors.
    pub fn from_parts(means: Matrix, pooled_cov: Matrix, priors: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        let (m, n) = means.shape();
        if pooled_cov.shape() != (m, m) {
            return Err(Error::DimensionMismatch {
                op: "class stats",
                lhs: means.shape(),
                rhs: pooled_cov.shape(),
            });
        }
        if counts.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} counts for {n} classes",
                counts.len()
            )));
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass(c));
        }
        validate_priors(&priors, n, 1e-12)?;
        Ok(ClassStats {
            means,
            pooled_cov,
            priors,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.means.cols()
    }

    pub fn dim(&self) -> usize {
        self.means.rows()
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn mean(&self, class: usize) -> Vec<f64> {
        self.means.column(class)
    }

    pub fn pooled_cov(&self) -> &Matrix {
        &self.pooled_cov
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Same statistics with different means.
    pub fn with_means(&self, means: Matrix) -> Result<Self> {
        Self::from_parts(means, self.pooled_cov.clone(), self.priors.clone(), self.counts.clone())
    }

    /// Same statistics with a different covariance.
    pub fn with_cov(&self, cov: Matrix) -> Result<Self> {
        Self::from_parts(self.means.clone(), cov, self.priors.clone(), self.counts.clone())
    }

    /// Same statistics with different priors.
    pub fn with_priors(&self, priors: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.means.clone(), self.pooled_cov.clone(), priors, self.counts.clone())
    }
}

/// Maximum-likelihood class statistics with the `K` covariance divisor.
pub fn class_stats(a: &Activations, labels: &[usize], num_classes: usize, priors: &PriorsPolicy) -> Result<ClassStats> {
    class_stats_with(a, labels, num_classes, priors, CovarianceDivisor::Samples)
}

/// Class statistics with an explicit covariance divisor.
///
/// Two passes: class means first, then the sum of centered outer products,
/// accumulated over column blocks so only one centered block is resident.
pub fn class_stats_with(
    a: &Activations,
    labels: &[usize],
    num_classes: usize,
    priors: &PriorsPolicy,
    divisor: CovarianceDivisor,
) -> Result<ClassStats> {
    let am = a.matrix();
    let (m, k) = am.shape();
    if labels.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {k} activation columns",
            labels.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    check_labels(labels, num_classes)?;

    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(c));
    }
    if k < m + num_classes {
        warn!(
            "class_stats: K - N = {} < M = {m}; the pooled covariance is singular",
            k as i64 - num_classes as i64
        );
    }
    let priors = priors.resolve(&counts)?;

    let mut means = Matrix::zeros(m, num_classes);
    for i in 0..m {
        let row = am.row(i);
        let mrow = means.row_mut(i);
        for (&v, &l) in row.iter().zip(labels) {
            mrow[l] += v;
        }
        for (s, &c) in mrow.iter_mut().zip(&counts) {
            *s /= c as f64;
        }
    }

    let mut cov = Matrix::zeros(m, m);
    let mut block = Vec::new();
    for k0 in (0..k).step_by(COVARIANCE_CHUNK) {
        let width = COVARIANCE_CHUNK.min(k - k0);
        let chunk_labels = &labels[k0..k0 + width];
        block.clear();
        block.reserve(m * width);
        for i in 0..m {
            let src = &am.row(i)[k0..k0 + width];
            let mu = means.row(i);
            block.extend(src.iter().zip(chunk_labels).map(|(&v, &l)| v - mu[l]));
        }
        let centered = Matrix::new(m, width, std::mem::take(&mut block))?;
        gram_accumulate(&mut cov, &centered)?;
        block = centered.into_vec();
    }
    let denom = match divisor {
        CovarianceDivisor::Samples => k,
        CovarianceDivisor::SamplesMinusClasses => {
            if k <= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "unbiased covariance needs K > N (K = {k}, N = {num_classes})"
                )));
            }
            k - num_classes
        }
    } as f64;
    cov.map_in_place(|v| v / denom);

    Ok(ClassStats {
        means,
        pooled_cov: cov,
        priors,
        counts,
    })
}

/// LDA weights from class statistics.
///
/// `S^-1 mu_n` is obtained for all classes from a single Cholesky
/// factorization of the pooled covariance (with jitter escalation).
pub fn solve_lda(stats: &ClassStats, jitter: f64) -> Result<OutputWeights> {
    let (m, n) = stats.means.shape();
    let sol = spd_solve(&stats.pooled_cov, &stats.means, jitter)?;
    let z = &sol.x; // M x N, column n = S^-1 mu_n
    let mut w = Matrix::zeros(n, m + 1);
    for c in 0..n {
        let quad: f64 = (0..m).map(|i| stats.means[(i, c)] * z[(i, c)]).sum();
        w[(c, 0)] = stats.priors[c].ln() - 0.5 * quad;
        for i in 0..m {
            w[(c, i + 1)] = z[(i, c)];
        }
    }
    w.check_finite()?;
    Ok(OutputWeights {
        kind: SolverKind::Lda,
        w,
        jitter: sol.jitter,
    })
}

/// Network outputs `Y`, `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores(Matrix);

impl Scores {
    pub fn new(y: Matrix) -> Self {
        Scores(y)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn classify(&self) -> Vec<usize> {
        argmax_columns(&self.0)
    }
}

/// Class posterior probabilities, `N x K`; every column sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors(Matrix);

impl Posteriors {
    /// Wraps a matrix after checking that it is column-stochastic within `1e-12`.
    pub fn new(p: Matrix) -> Result<Self> {
        for k in 0..p.cols() {
            let col = p.column(k);
            if let Some(v) = col.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!(
                    "posterior {v} outside [0, 1] in column {k}"
                )));
            }
            let s: f64 = col.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("posterior column {k} sums to {s}")));
            }
        }
        Ok(Posteriors(p))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn classify(&self) -> Vec<usize> {
        argmax_columns(&self.0)
    }
}

/// `Y = W A` for PI weights, `Y = W [1; A]` for LDA weights.
pub fn score(w: &OutputWeights, a: &Activations) -> Result<Scores> {
    let am = a.matrix();
    if w.num_units() != am.rows() {
        return Err(Error::DimensionMismatch {
            op: "score",
            lhs: w.w.shape(),
            rhs: am.shape(),
        });
    }
    match w.kind {
        SolverKind::Pi => Ok(Scores(matmul(&w.w, am)?)),
        SolverKind::Lda => {
            let n = w.w.rows();
            let linear = Matrix::from_fn(n, w.w.cols() - 1, |i, j| w.w[(i, j + 1)]);
            let mut y = matmul(&linear, am)?;
            for c in 0..n {
                let b = w.w[(c, 0)];
                y.row_mut(c).iter_mut().for_each(|v| *v += b);
            }
            Ok(Scores(y))
        }
    }
}

/// Column-wise softmax with the column maximum subtracted first.
///
/// ```
/// use elm_lda::solvers::{posteriors, Scores};
/// use elm_lda::Matrix;
/// let y = Scores::new(Matrix::from_rows(&[[1000.0], [0.0]]).unwrap());
/// let p = posteriors(&y);
/// assert_eq!(p.matrix().column(0)[0], 1.0);
/// ```
pub fn posteriors(y: &Scores) -> Posteriors {
    let y = &y.0;
    let (n, k) = y.shape();
    let mut max = vec![f64::NEG_INFINITY; k];
    for c in 0..n {
        for (m, &v) in max.iter_mut().zip(y.row(c)) {
            *m = m.max(v);
        }
    }
    let mut p = Matrix::zeros(n, k);
    let mut sum = vec![0.0; k];
    for c in 0..n {
        let src = y.row(c);
        let dst = p.row_mut(c);
        for j in 0..k {
            let e = (src[j] - max[j]).exp();
            dst[j] = e;
            sum[j] += e;
        }
    }
    for c in 0..n {
        for (v, s) in p.row_mut(c).iter_mut().zip(&sum) {
            *v /= s;
        }
    }
    Posteriors(p)
}

/// Per-column argmax; ties go to the lowest row index.
pub fn argmax_columns(y: &Matrix) -> Vec<usize> {
    let (n, k) = y.shape();
    let mut best = vec![0usize; k];
    if n == 0 {
        return best;
    }
    let mut best_val = y.row(0).to_vec();
    for c in 1..n {
        for (j, &v) in y.row(c).iter().enumerate() {
            if v > best_val[j] {
                best_val[j] = v;
                best[j] = c;
            }
        }
    }
    best
}

/// Per-column argmax of scores.
pub fn classify(y: &Scores) -> Vec<usize> {
    y.classify()
}

/// Log-likelihood of labelled activations under a shared-covariance Gaussian
/// model with the given statistics, including the `sum_n K_n log pi_n` term.
///
/// `K_n` are counted from `labels`. The covariance must factor without jitter.
pub fn log_likelihood(stats: &ClassStats, a: &Activations, labels: &[usize]) -> Result<f64> {
    let am = a.matrix();
    let (m, k) = am.shape();
    if m != stats.dim() || labels.len() != k {
        return Err(Error::DimensionMismatch {
            op: "log_likelihood",
            lhs: stats.means.shape(),
            rhs: am.shape(),
        });
    }
    check_labels(labels, stats.num_classes())?;
    let (chol, used) = spd_factor(&stats.pooled_cov, 0.0)?;
    if used != 0.0 {
        return Err(Error::NotPositiveDefinite { pivot: 0, jitter: used });
    }
    let centered = Matrix::from_fn(m, k, |i, j| am[(i, j)] - stats.means[(i, labels[j])]);
    let z = forward_substitute(&chol, &centered);
    let quad: f64 = z.as_slice().iter().map(|v| v * v).sum();
    let per_sample = -0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * chol.log_det();
    let prior_term: f64 = labels.iter().map(|&l| stats.priors[l].ln()).sum();
    Ok(k as f64 * per_sample - 0.5 * quad + prior_term)
}

/// `L^-1 B` for the lower factor `L`.
fn forward_substitute(chol: &Cholesky, b: &Matrix) -> Matrix {
    let l = chol.lower();
    let n = l.rows();
    let mut x = b.clone();
    let r = x.cols();
    let xs = x.as_mut_slice();
    for i in 0..n {
        let (done, rest) = xs.split_at_mut(i * r);
        let xi = &mut rest[..r];
        for (p, &lip) in l.row(i)[..i].iter().enumerate() {
            if lip != 0.0 {
                for (v, &d) in xi.iter_mut().zip(&done[p * r..(p + 1) * r]) {
                    *v -= lip * d;
                }
            }
        }
        let inv = 1.0 / l[(i, i)];
        xi.iter_mut().for_each(|v| *v *= inv);
    }
    x
}
