//! Experiment engine: paired PI/LDA trials over a range of fan-outs and
//! ensemble sweeps, with CSV output.
//!
//! A trial draws one hidden layer, computes the training activations once and
//! hands the same matrix to both solvers, so the error difference within a
//! trial is due to the solver alone. Every random stream is derived from the
//! base seed and the trial coordinates, so results do not depend on the order
//! or thread in which trials run.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dataio::{load_csv, load_mnist, Dataset, NormalizeMode, Preprocess};
use crate::ensemble::{combine_posteriors, EnsembleModel};
use crate::error::{Error, Result};
use crate::hidden::{ActivationKind, HiddenLayer};
use crate::model::Model;
use crate::seed::{derive_seed, Purpose};
use crate::solvers::{
    build_targets, class_stats_with, posteriors, score, solve_lda, solve_pi, CovarianceDivisor, Posteriors,
    PriorsPolicy, SolverKind,
};

/// Default download location for the MNIST archives.
pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

/// Everything that determines an experiment's results.
///
/// Loaded from TOML or JSON (by file extension); any key may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding the four MNIST IDX files, plain or gzipped.
    pub data_dir: PathBuf,
    /// Base URL the `fetch-data` command downloads from.
    pub mirror_url: String,
    /// CSV training set (header row, integer label last). Overrides `data_dir`.
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    /// Use only the first `n` training / test samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub normalize: NormalizeMode,
    pub activation: ActivationKind,
    pub weight_low: f64,
    pub weight_high: f64,
    pub fan_outs: Vec<usize>,
    /// Trials per fan-out.
    pub repeats: usize,
    pub seed: u64,
    pub priors: PriorsPolicy,
    /// Added to the PI Gram matrix diagonal.
    pub ridge: f64,
    /// Initial diagonal shift for the LDA covariance solve.
    pub jitter: f64,
    pub covariance: CovarianceDivisor,
    pub ensemble_sizes: Vec<usize>,
    pub ensemble_fan_out: usize,
    /// Independent member sets per ensemble size.
    pub ensemble_repeats: usize,
    pub output_dir: PathBuf,
    /// Worker threads for independent trials. Each holds its own activations.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data/mnist"),
            mirror_url: DEFAULT_MIRROR.to_string(),
            train_csv: None,
            test_csv: None,
            train_limit: None,
            test_limit: None,
            normalize: NormalizeMode::Scale01,
            activation: ActivationKind::Sigmoid,
            weight_low: -0.5,
            weight_high: 0.5,
            fan_outs: vec![1, 2, 3],
            repeats: 10,
            seed: 1,
            priors: PriorsPolicy::Uniform,
            ridge: 0.0,
            jitter: 0.0,
            covariance: CovarianceDivisor::Samples,
            ensemble_sizes: vec![1, 2, 5],
            ensemble_fan_out: 5,
            ensemble_repeats: 10,
            output_dir: PathBuf::from("results"),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    /// Reads a `.toml` or `.json` file; other extensions are parsed as TOML.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            _ => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.repeats == 0 {
            return fail("repeats must be at least 1".into());
        }
        if self.fan_outs.is_empty() || self.fan_outs.contains(&0) {
            return fail(format!(
                "fan_outs must be non-empty and positive, got {:?}",
                self.fan_outs
            ));
        }
        if !(self.weight_low.is_finite() && self.weight_high.is_finite() && self.weight_low < self.weight_high) {
            return fail(format!(
                "weight range [{}, {}) must be finite with low < high",
                self.weight_low, self.weight_high
            ));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) || !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return fail("ridge and jitter must be finite and non-negative".into());
        }
        if self.ensemble_sizes.is_empty() || self.ensemble_sizes.contains(&0) {
            return fail(format!(
                "ensemble_sizes must be non-empty and positive, got {:?}",
                self.ensemble_sizes
            ));
        }
        if self.ensemble_fan_out == 0 || self.ensemble_repeats == 0 {
            return fail("ensemble_fan_out and ensemble_repeats must be at least 1".into());
        }
        if self.train_csv.is_some() != self.test_csv.is_some() {
            return fail("train_csv and test_csv must be given together".into());
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return fail("sample limits must be at least 1".into());
        }
        if self.jobs == 0 {
            return fail("jobs must be at least 1".into());
        }
        if let PriorsPolicy::Explicit(p) = &self.priors {
            crate::solvers::validate_priors(p, p.len(), crate::solvers::PRIOR_SUM_TOL)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Preprocessed train/test data plus the configuration that produced it.
#[derive(Debug, Clone)]
pub struct Experiment {
    config: ExperimentConfig,
    preprocess: Preprocess,
    train: Dataset,
    test: Dataset,
}

impl Experiment {
    /// Loads the data named by `config` (CSV pair if given, MNIST otherwise).
    pub fn load(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = match (&config.train_csv, &config.test_csv) {
            (Some(tr), Some(te)) => {
                let (tr, te) = (load_csv(tr, true)?, load_csv(te, true)?);
                let n = tr.num_classes().max(te.num_classes());
                let widen = |d: Dataset| Dataset::new(d.x().clone(), d.labels().to_vec(), n);
                (widen(tr)?, widen(te)?)
            }
            _ => load_mnist(&config.data_dir)?,
        };
        Self::from_datasets(config, train, test)
    }

    /// Applies the sample limits and fits the preprocessing on `train`.
    pub fn from_datasets(config: ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        config.validate()?;
        if train.num_features() != test.num_features() {
            return Err(Error::DimensionMismatch {
                op: "train/test features",
                lhs: train.x().shape(),
                rhs: test.x().shape(),
            });
        }
        if train.num_classes() != test.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "train has {} classes, test has {}",
                train.num_classes(),
                test.num_classes()
            )));
        }
        let train = match config.train_limit {
            Some(n) if n < train.len() => train.head(n),
            _ => train,
        };
        let test = match config.test_limit {
            Some(n) if n < test.len() => test.head(n),
            _ => test,
        };
        let preprocess = Preprocess::fit(config.normalize, train.x());
        let train = train.map_features(|x| preprocess.apply(x).expect("fitted on these features"));
        let test = test.map_features(|x| preprocess.apply(x).expect("same feature count"));
        info!(
            "loaded {} training and {} test samples, {} features, {} classes",
            train.len(),
            test.len(),
            train.num_features(),
            train.num_classes()
        );
        Ok(Experiment {
            config,
            preprocess,
            train,
            test,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    /// Seed of the hidden layer shared by both solvers in a trial.
    pub fn trial_seed(&self, fan_out: usize, trial: usize) -> u64 {
        derive_seed(
            self.config.seed,
            &[Purpose::HiddenWeights as u64, fan_out as u64, trial as u64],
        )
    }

    /// Seed of ensemble member `member` in member set `repeat`.
    pub fn member_seed(&self, fan_out: usize, repeat: usize, member: usize) -> u64 {
        derive_seed(
            self.config.seed,
            &[
                Purpose::EnsembleMember as u64,
                fan_out as u64,
                repeat as u64,
                member as u64,
            ],
        )
    }

    pub fn hidden_layer(&self, fan_out: usize, seed: u64) -> Result<HiddenLayer> {
        let c = &self.config;
        HiddenLayer::init(
            self.train.num_features(),
            fan_out,
            c.weight_low,
            c.weight_high,
            c.activation,
            seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

/// One row of `trials.csv`.
///
/// `pi_train_seconds` and `lda_train_seconds` each cover the hidden-layer
/// forward pass on the training set plus that solver's fit, i.e. the cost
/// of training that network from scratch; the shared forward pass is timed
/// once and also reported on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub fan_out: usize,
    pub trial: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub pi_error_pct: Option<f64>,
    pub lda_error_pct: Option<f64>,
    pub pi_train_seconds: f64,
    pub lda_train_seconds: f64,
    pub test_seconds: f64,
    pub hidden_seconds: f64,
    pub pi_solve_seconds: f64,
    pub lda_solve_seconds: f64,
    pub pi_jitter: Option<f64>,
    pub lda_jitter: Option<f64>,
    /// Checksum of the training activations seen by both solvers.
    pub activation_checksum: String,
    pub error: Option<String>,
    /// Whether the error was numerical (as opposed to data or configuration).
    pub numerical_failure: bool,
}

impl TrialResult {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }
}

/// Percentage of positions where `predicted` and `truth` differ.
pub fn error_rate(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "error_rate needs equal non-empty lists, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let wrong = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(100.0 * wrong as f64 / truth.len() as f64)
}

/// Runs trial `trial` at `fan_out`. Failures are recorded in the result
/// rather than returned.
pub fn run_trial(exp: &Experiment, fan_out: usize, trial: usize) -> TrialResult {
    let seed = exp.trial_seed(fan_out, trial);
    let mut r = TrialResult {
        fan_out,
        trial,
        seed,
        status: TrialStatus::Failed,
        pi_error_pct: None,
        lda_error_pct: None,
        pi_train_seconds: 0.0,
        lda_train_seconds: 0.0,
        test_seconds: 0.0,
        hidden_seconds: 0.0,
        pi_solve_seconds: 0.0,
        lda_solve_seconds: 0.0,
        pi_jitter: None,
        lda_jitter: None,
        activation_checksum: String::new(),
        error: None,
        numerical_failure: false,
    };
    if let Err(e) = trial_body(exp, fan_out, seed, &mut r) {
        warn!("trial fan_out={fan_out} index={trial} failed: {e}");
        r.numerical_failure = e.is_numerical();
        r.error = Some(e.to_string());
        r.status = TrialStatus::Failed;
    }
    r
}

fn trial_body(exp: &Experiment, fan_out: usize, seed: u64, r: &mut TrialResult) -> Result<()> {
    let cfg = exp.config();
    let (train, test) = (exp.train(), exp.test());
    let layer = exp.hidden_layer(fan_out, seed)?;

    let t0 = Instant::now();
    let a = layer.forward(train.x())?;
    r.hidden_seconds = t0.elapsed().as_secs_f64();
    let checksum = a.matrix().checksum();
    r.activation_checksum = format!("{checksum:016x}");

    let t0 = Instant::now();
    let targets = build_targets(train.labels(), train.num_classes())?;
    let w_pi = solve_pi(&a, &targets, cfg.ridge)?;
    drop(targets);
    r.pi_solve_seconds = t0.elapsed().as_secs_f64();
    r.pi_jitter = Some(w_pi.jitter());

    let t0 = Instant::now();
    let stats = class_stats_with(&a, train.labels(), train.num_classes(), &cfg.priors, cfg.covariance)?;
    let w_lda = solve_lda(&stats, cfg.jitter)?;
    drop(stats);
    r.lda_solve_seconds = t0.elapsed().as_secs_f64();
    r.lda_jitter = Some(w_lda.jitter());

    if a.matrix().checksum() != checksum {
        return Err(Error::InvalidArgument(
            "training activations changed between solvers".into(),
        ));
    }
    log::debug!("trial seed {seed:016x}: activation checksum {checksum:016x}");
    r.pi_train_seconds = r.hidden_seconds + r.pi_solve_seconds;
    r.lda_train_seconds = r.hidden_seconds + r.lda_solve_seconds;
    drop(a);

    let t0 = Instant::now();
    let a_test = layer.forward(test.x())?;
    let pi_pred = score(&w_pi, &a_test)?.classify();
    let lda_pred = score(&w_lda, &a_test)?.classify();
    r.test_seconds = t0.elapsed().as_secs_f64();

    r.pi_error_pct = Some(error_rate(&pi_pred, test.labels())?);
    r.lda_error_pct = Some(error_rate(&lda_pred, test.labels())?);
    r.status = TrialStatus::Ok;
    info!(
        "fan_out={fan_out} seed={seed:016x}: PI {:.2}% ({:.2}s) LDA {:.2}% ({:.2}s)",
        r.pi_error_pct.unwrap(),
        r.pi_train_seconds,
        r.lda_error_pct.unwrap(),
        r.lda_train_seconds
    );
    Ok(())
}

/// Runs `f` on every item with `jobs` workers; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().unwrap()[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

/// Per-fan-out aggregates; one row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub fan_out: usize,
    pub pi_error_pct: f64,
    pub lda_error_pct: f64,
    /// `100 (pi - lda) / pi` of the two means.
    pub improvement_pct: f64,
    pub pi_error_std: f64,
    pub lda_error_std: f64,
    /// Mean over trials of the per-trial improvement.
    pub paired_improvement_pct: f64,
    pub pi_train_seconds: f64,
    pub lda_train_seconds: f64,
    pub test_seconds: f64,
    /// Mean over trials of `lda_train_seconds / pi_train_seconds`.
    pub train_time_ratio: f64,
    pub trials: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<SummaryRow>,
}

impl SweepSummary {
    pub fn row(&self, fan_out: usize) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.fan_out == fan_out)
    }

    pub fn excluded(&self) -> usize {
        self.rows.iter().map(|r| r.excluded).sum()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation; 0 for a single value.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return if v.is_empty() { f64::NAN } else { 0.0 };
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Aggregates trials by fan-out, in order of first appearance. Failed
/// trials are counted but contribute nothing else.
pub fn summarize(trials: &[TrialResult]) -> SweepSummary {
    let mut fan_outs: Vec<usize> = Vec::new();
    for t in trials {
        if !fan_outs.contains(&t.fan_out) {
            fan_outs.push(t.fan_out);
        }
    }
    let rows = fan_outs
        .into_iter()
        .map(|f| {
            let group: Vec<&TrialResult> = trials.iter().filter(|t| t.fan_out == f).collect();
            let ok: Vec<&TrialResult> = group.iter().copied().filter(|t| t.is_ok()).collect();
            let col = |g: fn(&TrialResult) -> f64| ok.iter().map(|t| g(t)).collect::<Vec<f64>>();
            let pi = col(|t| t.pi_error_pct.unwrap_or(f64::NAN));
            let lda = col(|t| t.lda_error_pct.unwrap_or(f64::NAN));
            let (mp, ml) = (mean(&pi), mean(&lda));
            let paired: Vec<f64> = pi
                .iter()
                .zip(&lda)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, l)| 100.0 * (p - l) / p)
                .collect();
            SummaryRow {
                fan_out: f,
                pi_error_pct: mp,
                lda_error_pct: ml,
                improvement_pct: 100.0 * (mp - ml) / mp,
                pi_error_std: std_dev(&pi),
                lda_error_std: std_dev(&lda),
                paired_improvement_pct: mean(&paired),
                pi_train_seconds: mean(&col(|t| t.pi_train_seconds)),
                lda_train_seconds: mean(&col(|t| t.lda_train_seconds)),
                test_seconds: mean(&col(|t| t.test_seconds)),
                train_time_ratio: mean(&col(|t| t.lda_train_seconds / t.pi_train_seconds)),
                trials: ok.len(),
                excluded: group.len() - ok.len(),
            }
        })
        .collect();
    SweepSummary { rows }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trials_csv(path: impl AsRef<Path>, trials: &[TrialResult]) -> Result<()> {
    write_rows(path.as_ref(), trials)
}

pub fn read_trials_csv(path: impl AsRef<Path>) -> Result<Vec<TrialResult>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_summary_csv(path: impl AsRef<Path>, summary: &SweepSummary) -> Result<()> {
    write_rows(path.as_ref(), &summary.rows)
}

pub fn read_summary_csv(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes `pi_fan_out,pi_error_pct,lda_fan_out,lda_error_pct`.
pub fn write_plot_fanout(path: impl AsRef<Path>, summary: &SweepSummary) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pi_fan_out", "pi_error_pct", "lda_fan_out", "lda_error_pct"])?;
    for r in &summary.rows {
        w.write_record([
            r.fan_out.to_string(),
            r.pi_error_pct.to_string(),
            r.fan_out.to_string(),
            r.lda_error_pct.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_config_snapshot(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let path = dir.join("config.json");
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Result of [`run_fanout_sweep`].
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub trials: Vec<TrialResult>,
    pub summary: SweepSummary,
}

impl SweepOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &TrialResult> {
        self.trials.iter().filter(|t| !t.is_ok())
    }
}

/// Runs every `(fan_out, trial)` pair. With `out_dir`, writes `trials.csv`,
/// `summary.csv`, `plot_fanout.csv` and `config.json` there.
pub fn run_fanout_sweep(exp: &Experiment, out_dir: Option<&Path>) -> Result<SweepOutcome> {
    let cfg = exp.config();
    let work: Vec<(usize, usize)> = cfg
        .fan_outs
        .iter()
        .flat_map(|&f| (0..cfg.repeats).map(move |t| (f, t)))
        .collect();
    let trials = parallel_map(&work, cfg.jobs, |&(f, t)| run_trial(exp, f, t));
    let summary = summarize(&trials);
    for r in &summary.rows {
        if r.excluded > 0 {
            warn!(
                "fan_out={}: {} of {} trials failed",
                r.fan_out,
                r.excluded,
                r.excluded + r.trials
            );
        }
        if r.train_time_ratio > 1.25 {
            warn!(
                "fan_out={}: LDA/PI training time ratio {:.3} exceeds 1.25",
                r.fan_out, r.train_time_ratio
            );
        }
    }
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_config_snapshot(dir, cfg)?;
        write_trials_csv(dir.join("trials.csv"), &trials)?;
        write_summary_csv(dir.join("summary.csv"), &summary)?;
        write_plot_fanout(dir.join("plot_fanout.csv"), &summary)?;
    }
    Ok(SweepOutcome { trials, summary })
}

/// Test error of one ensemble of a given size in one repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTrial {
    pub repeat: usize,
    pub ensemble_size: usize,
    pub error_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummaryRow {
    pub ensemble_size: usize,
    pub error_pct: f64,
    pub error_std: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub trials: Vec<EnsembleTrial>,
    pub summary: Vec<EnsembleSummaryRow>,
}

impl EnsembleOutcome {
    pub fn mean_error(&self, ensemble_size: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.ensemble_size == ensemble_size)
            .map(|r| r.error_pct)
    }
}

/// Trains one LDA network with the given hidden-layer seed and returns its
/// posteriors on the test set.
pub fn lda_member_posteriors(exp: &Experiment, fan_out: usize, seed: u64) -> Result<Posteriors> {
    let cfg = exp.config();
    let (train, test) = (exp.train(), exp.test());
    let layer = exp.hidden_layer(fan_out, seed)?;
    let a = layer.forward(train.x())?;
    let stats = class_stats_with(&a, train.labels(), train.num_classes(), &cfg.priors, cfg.covariance)?;
    drop(a);
    let w = solve_lda(&stats, cfg.jitter)?;
    let a_test = layer.forward(test.x())?;
    Ok(posteriors(&score(&w, &a_test)?))
}

/// For each repeat, trains `max(ensemble_sizes)` LDA members with distinct
/// seeds at `ensemble_fan_out` and scores the first `E` of them for every
/// `E`, so larger ensembles extend smaller ones within a repeat. With
/// `out_dir`, writes `ensemble_trials.csv`, `ensemble_summary.csv` and
/// `plot_ensemble.csv`.
pub fn run_ensemble_sweep(exp: &Experiment, out_dir: Option<&Path>) -> Result<EnsembleOutcome> {
    let cfg = exp.config();
    let mut sizes = cfg.ensemble_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let largest = *sizes.last().expect("validated non-empty");
    let f = cfg.ensemble_fan_out;

    let work: Vec<(usize, usize)> = (0..cfg.ensemble_repeats)
        .flat_map(|r| (0..largest).map(move |m| (r, m)))
        .collect();
    let posts = parallel_map(&work, cfg.jobs, |&(r, m)| {
        let seed = exp.member_seed(f, r, m);
        let p = lda_member_posteriors(exp, f, seed);
        if p.is_ok() {
            info!("ensemble repeat {r} member {m} trained (seed {seed:016x})");
        }
        p
    });
    let posts = posts.into_iter().collect::<Result<Vec<_>>>()?;

    let mut trials = Vec::new();
    for (r, members) in posts.chunks(largest).enumerate() {
        for &e in &sizes {
            let combined = combine_posteriors(&members[..e])?;
            let error_pct = error_rate(&combined.classify(), exp.test().labels())?;
            info!("ensemble repeat {r} size {e}: {error_pct:.2}%");
            trials.push(EnsembleTrial {
                repeat: r,
                ensemble_size: e,
                error_pct,
            });
        }
    }
    let summary: Vec<EnsembleSummaryRow> = sizes
        .iter()
        .map(|&e| {
            let errs: Vec<f64> = trials
                .iter()
                .filter(|t| t.ensemble_size == e)
                .map(|t| t.error_pct)
                .collect();
            EnsembleSummaryRow {
                ensemble_size: e,
                error_pct: mean(&errs),
                error_std: std_dev(&errs),
                repeats: errs.len(),
            }
        })
        .collect();

    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_config_snapshot(dir, cfg)?;
        write_rows(&dir.join("ensemble_trials.csv"), &trials)?;
        write_rows(&dir.join("ensemble_summary.csv"), &summary)?;
        let path = dir.join("plot_ensemble.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["ensemble_size", "lda_ensemble_error_pct"])?;
        for r in &summary {
            w.write_record([r.ensemble_size.to_string(), r.error_pct.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(EnsembleOutcome { trials, summary })
}

/// Trains one network of the given kind on the experiment's training set.
pub fn train_model(exp: &Experiment, kind: SolverKind, fan_out: usize, seed: u64) -> Result<Model> {
    let cfg = exp.config();
    let train = exp.train();
    let layer = exp.hidden_layer(fan_out, seed)?;
    let a = layer.forward(train.x())?;
    let weights = match kind {
        SolverKind::Pi => solve_pi(&a, &build_targets(train.labels(), train.num_classes())?, cfg.ridge)?,
        SolverKind::Lda => {
            let stats = class_stats_with(&a, train.labels(), train.num_classes(), &cfg.priors, cfg.covariance)?;
            solve_lda(&stats, cfg.jitter)?
        }
    };
    Model::new(exp.preprocess().clone(), layer, weights)
}

/// Trains the `size` LDA members that `run_ensemble_sweep` would train for
/// member set `repeat`.
pub fn train_ensemble(exp: &Experiment, fan_out: usize, size: usize, repeat: usize) -> Result<EnsembleModel> {
    let members = (0..size)
        .map(|m| train_model(exp, SolverKind::Lda, fan_out, exp.member_seed(fan_out, repeat, m)))
        .collect::<Result<Vec<_>>>()?;
    EnsembleModel::new(members)
}
