//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any hard criterion fails.
//!
//! MNIST is read from `$ELM_MNIST_DIR`, else `data/mnist` at the workspace
//! root (where `elm-lda fetch-data` puts it). Without it the MNIST criteria
//! print SKIP.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use elm_lda::dataio::{load_mnist, synth_gaussian, write_csv, Dataset, MNIST_FILES};
use elm_lda::harness::{read_trials_csv, run_ensemble_sweep, run_fanout_sweep, Experiment, ExperimentConfig};
use elm_lda::selftest::run_selftest;
use elm_lda::Matrix;

const PI_FANOUT1: f64 = 7.20;
const LDA_FANOUT1: f64 = 6.84;
const ABS_TOL: f64 = 0.5;
const IMPROVEMENT_RANGE: (f64, f64) = (1.0, 8.0);
const SWEEP_FAN_OUTS: [usize; 3] = [1, 2, 3];
const SWEEP_REPEATS: usize = 20;
const ENSEMBLE_FAN_OUT: usize = 5;
const ENSEMBLE_SIZES: [usize; 3] = [1, 2, 5];
const ENSEMBLE_SEED_SETS: usize = 10;
const TIME_RATIO_FLAG: f64 = 1.25;

struct Report {
    hard_failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, passed: bool, text: String) {
        if !passed {
            self.hard_failures += 1;
        }
        println!("{} criterion {id}: {text}", if passed { "PASS" } else { "FAIL" });
    }

    fn skip(&self, id: &str, why: &str) {
        println!("SKIP criterion {id}: {why}");
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("ELM_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"));
    MNIST_FILES
        .iter()
        .all(|f| elm_lda::dataio::find_mnist_file(&dir, f).is_some())
        .then_some(dir)
}

fn artifacts(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

/// Runs `elm-lda sweep` with `args` into `out` and returns (pi, lda) error columns.
/// `(pi_error_pct, lda_error_pct)` per trial.
type ErrorColumns = Vec<(Option<f64>, Option<f64>)>;

fn cli_sweep(args: &[&str], out: &Path) -> Result<ErrorColumns, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_elm-lda"))
        .arg("sweep")
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .args(["--log-level", "warn"])
        .output()
        .map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!(
            "sweep exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        ));
    }
    let trials = read_trials_csv(out.join("trials.csv")).map_err(|e| e.to_string())?;
    Ok(trials.iter().map(|t| (t.pi_error_pct, t.lda_error_pct)).collect())
}

fn determinism(report: &mut Report, label: &str, args: &[&str]) {
    let a = cli_sweep(args, &artifacts(&format!("determinism-{label}-1")));
    let b = cli_sweep(args, &artifacts(&format!("determinism-{label}-2")));
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let same = a == b && !a.is_empty();
            report.line(
                "5",
                same,
                format!(
                    "{label}: two sweeps, {} trials, error columns identical: {same}",
                    a.len()
                ),
            );
        }
        (Err(e), _) | (_, Err(e)) => report.line("5", false, format!("{label}: {e}")),
    }
}

fn mnist_criteria(report: &mut Report, train: Dataset, test: Dataset) {
    let cfg = ExperimentConfig {
        fan_outs: SWEEP_FAN_OUTS.to_vec(),
        repeats: SWEEP_REPEATS,
        ensemble_fan_out: ENSEMBLE_FAN_OUT,
        ensemble_sizes: ENSEMBLE_SIZES.to_vec(),
        ensemble_repeats: ENSEMBLE_SEED_SETS,
        ..Default::default()
    };
    let exp = match Experiment::from_datasets(cfg, train, test) {
        Ok(e) => e,
        Err(e) => return report.line("1-3,6", false, format!("experiment setup failed: {e}")),
    };

    let t0 = Instant::now();
    let sweep = match run_fanout_sweep(&exp, Some(&artifacts("sweep"))) {
        Ok(s) => s,
        Err(e) => return report.line("1,2,6", false, format!("sweep failed: {e}")),
    };
    println!(
        "     sweep: fan-outs {SWEEP_FAN_OUTS:?} x {SWEEP_REPEATS} repeats in {:.0} s",
        t0.elapsed().as_secs_f64()
    );
    for r in &sweep.summary.rows {
        println!(
            "     fan-out {}: PI {:.3}% (sd {:.3}), LDA {:.3}% (sd {:.3}), improvement {:.2}%, train {:.2}/{:.2} s, ratio {:.3}, {} ok, {} excluded",
            r.fan_out,
            r.pi_error_pct,
            r.pi_error_std,
            r.lda_error_pct,
            r.lda_error_std,
            r.improvement_pct,
            r.pi_train_seconds,
            r.lda_train_seconds,
            r.train_time_ratio,
            r.trials,
            r.excluded
        );
    }

    match sweep.summary.row(1) {
        Some(r) => {
            let pi_ok = (r.pi_error_pct - PI_FANOUT1).abs() <= ABS_TOL;
            let lda_ok = (r.lda_error_pct - LDA_FANOUT1).abs() <= ABS_TOL;
            report.line(
                "1",
                pi_ok && lda_ok && r.trials >= 10,
                format!(
                    "fan-out 1 over {} trials: PI {:.3}% (target {PI_FANOUT1} +- {ABS_TOL}), LDA {:.3}% (target {LDA_FANOUT1} +- {ABS_TOL}), mean train {:.1} s per method",
                    r.trials,
                    r.pi_error_pct,
                    r.lda_error_pct,
                    0.5 * (r.pi_train_seconds + r.lda_train_seconds)
                ),
            );
        }
        None => report.line("1", false, "no fan-out 1 results".into()),
    }

    for f in SWEEP_FAN_OUTS {
        match sweep.summary.row(f) {
            Some(r) => {
                let ok = r.trials >= SWEEP_REPEATS
                    && r.lda_error_pct < r.pi_error_pct
                    && (IMPROVEMENT_RANGE.0..=IMPROVEMENT_RANGE.1).contains(&r.improvement_pct);
                report.line(
                    "2",
                    ok,
                    format!(
                        "fan-out {f}: LDA {:.3}% < PI {:.3}%, improvement {:.2}% in [{}, {}] over {} trials",
                        r.lda_error_pct,
                        r.pi_error_pct,
                        r.improvement_pct,
                        IMPROVEMENT_RANGE.0,
                        IMPROVEMENT_RANGE.1,
                        r.trials
                    ),
                );
            }
            None => report.line("2", false, format!("fan-out {f}: no results")),
        }
    }

    for r in &sweep.summary.rows {
        let tag = if r.train_time_ratio <= TIME_RATIO_FLAG {
            "PASS"
        } else {
            "FLAG"
        };
        println!(
            "{tag} criterion 6: fan-out {}: mean LDA/PI train time ratio {:.3} (flag above {TIME_RATIO_FLAG})",
            r.fan_out, r.train_time_ratio
        );
    }
    drop(sweep);

    let t0 = Instant::now();
    match run_ensemble_sweep(&exp, Some(&artifacts("ensemble"))) {
        Ok(out) => {
            let e: Vec<f64> = ENSEMBLE_SIZES
                .iter()
                .map(|&s| out.mean_error(s).unwrap_or(f64::NAN))
                .collect();
            let ok = e[0] > e[1] && e[1] > e[2];
            report.line(
                "3",
                ok,
                format!(
                    "fan-out {ENSEMBLE_FAN_OUT}, {ENSEMBLE_SEED_SETS} seed sets: E=1 {:.3}% > E=2 {:.3}% > E=5 {:.3}% ({:.0} s)",
                    e[0],
                    e[1],
                    e[2],
                    t0.elapsed().as_secs_f64()
                ),
            );
        }
        Err(e) => report.line("3", false, format!("ensemble sweep failed: {e}")),
    }
}

fn main() {
    let mut report = Report { hard_failures: 0 };

    let t0 = Instant::now();
    let st = run_selftest(0);
    for s in &st.suites {
        report.line(
            &format!("4{}", s.id),
            s.passed,
            format!("{} ({} cases; {})", s.name, s.cases, s.detail),
        );
    }
    println!("     selftest took {:.1} s", t0.elapsed().as_secs_f64());

    let synth_dir = artifacts("synthetic");
    std::fs::create_dir_all(&synth_dir).expect("artifact dir");
    let means = vec![vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]];
    let cov = Matrix::identity(3);
    write_csv(
        &synth_gaussian(&means, &cov, &[0.3, 0.3, 0.4], 2000, 5).unwrap(),
        synth_dir.join("train.csv"),
    )
    .unwrap();
    write_csv(
        &synth_gaussian(&means, &cov, &[0.3, 0.3, 0.4], 1000, 6).unwrap(),
        synth_dir.join("test.csv"),
    )
    .unwrap();
    let train_csv = synth_dir.join("train.csv");
    let test_csv = synth_dir.join("test.csv");
    determinism(
        &mut report,
        "synthetic",
        &[
            "--train-csv",
            train_csv.to_str().unwrap(),
            "--test-csv",
            test_csv.to_str().unwrap(),
            "--normalize",
            "none",
            "--priors",
            "empirical",
            "--fan-out",
            "1,4",
            "--repeats",
            "3",
            "--seed",
            "9",
        ],
    );

    match mnist_dir() {
        None => {
            for id in ["1", "2", "3", "5 (MNIST)", "6"] {
                report.skip(id, "MNIST not found; run `elm-lda fetch-data` or set ELM_MNIST_DIR");
            }
        }
        Some(dir) => {
            let d = dir.to_str().unwrap();
            determinism(
                &mut report,
                "mnist-subset",
                &[
                    "--data-dir",
                    d,
                    "--train-limit",
                    "10000",
                    "--test-limit",
                    "2000",
                    "--fan-out",
                    "1",
                    "--repeats",
                    "2",
                ],
            );
            match load_mnist(&dir) {
                Ok((train, test)) => mnist_criteria(&mut report, train, test),
                Err(e) => report.line("1-3,6", false, format!("loading MNIST from {d}: {e}")),
            }
        }
    }

    println!("acceptance: {} hard failures", report.hard_failures);
    if report.hard_failures > 0 {
        std::process::exit(1);
    }
}
