use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use elm_lda::dataio::{load_csv, load_idx_images, load_idx_labels, NormalizeMode};
use elm_lda::ensemble::{combine_posteriors, ensemble_predict, EnsembleModel, EnsembleOptions};
use elm_lda::harness::{
    error_rate, run_ensemble_sweep, run_fanout_sweep, train_ensemble, train_model, Experiment, ExperimentConfig,
};
use elm_lda::hidden::ActivationKind;
use elm_lda::model::Model;
use elm_lda::selftest::{run_suite, SelftestReport, SUITE_IDS};
use elm_lda::solvers::{posteriors, CovarianceDivisor, Posteriors, PriorsPolicy, SolverKind};
use elm_lda::{Error, Result};
use elm_lda_cli::fetch::{fetch_data, Source, MNIST_SHA256};
use elm_lda_cli::{exit_code, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK};

/// Extreme learning machines with pseudo-inverse and LDA output solvers.
#[derive(Debug, Parser)]
#[command(name = "elm-lda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Log filter used when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Download (or copy) and verify the MNIST files into the data directory.
    FetchData(FetchArgs),
    /// Paired PI/LDA comparison over fan-outs and repeats.
    Sweep(ExpArgs),
    /// Test error of LDA ensembles of several sizes.
    EnsembleSweep(ExpArgs),
    /// Train one model (or an LDA ensemble) and write it to disk.
    Train(TrainArgs),
    /// Classify inputs with a weight file or ensemble manifest.
    Predict(PredictArgs),
    /// Run the property suites on synthetic data.
    Selftest(SelftestArgs),
}

/// Every experiment setting; each overrides the `--config` file.
#[derive(Debug, Args)]
struct ExpArgs {
    /// TOML or JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    mirror_url: Option<String>,
    #[arg(long)]
    train_csv: Option<PathBuf>,
    #[arg(long)]
    test_csv: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    /// none, scale01 or standardize.
    #[arg(long)]
    normalize: Option<NormalizeMode>,
    /// sigmoid, tanh or relu.
    #[arg(long)]
    activation: Option<ActivationKind>,
    #[arg(long, allow_negative_numbers = true)]
    weight_low: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    weight_high: Option<f64>,
    /// Comma-separated fan-outs (hidden units per input).
    #[arg(long = "fan-out", value_delimiter = ',')]
    fan_outs: Vec<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// uniform, empirical, or a comma-separated list of class priors.
    #[arg(long)]
    priors: Option<PriorsPolicy>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    /// samples or samples-minus-classes.
    #[arg(long)]
    covariance: Option<CovarianceDivisor>,
    #[arg(long, value_delimiter = ',')]
    ensemble_sizes: Vec<usize>,
    #[arg(long)]
    ensemble_fan_out: Option<usize>,
    #[arg(long)]
    ensemble_repeats: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_path(p).map_err(|e| match e {
                Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
                e => e,
            })?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone().into();
                }
            )*};
        }
        set!(
            data_dir,
            mirror_url,
            normalize,
            activation,
            weight_low,
            weight_high,
            repeats,
            seed,
            priors
        );
        set!(
            ridge,
            jitter,
            covariance,
            ensemble_fan_out,
            ensemble_repeats,
            output_dir,
            jobs
        );
        if self.train_csv.is_some() {
            c.train_csv = self.train_csv.clone();
        }
        if self.test_csv.is_some() {
            c.test_csv = self.test_csv.clone();
        }
        if self.train_limit.is_some() {
            c.train_limit = self.train_limit;
        }
        if self.test_limit.is_some() {
            c.test_limit = self.test_limit;
        }
        if !self.fan_outs.is_empty() {
            c.fan_outs = self.fan_outs.clone();
        }
        if !self.ensemble_sizes.is_empty() {
            c.ensemble_sizes = self.ensemble_sizes.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct FetchArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// Copy from this directory (plain or .gz files) instead of downloading.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// pi or lda.
    #[arg(long, default_value = "lda")]
    solver: SolverKind,
    /// Train this many LDA members and write an ensemble manifest.
    #[arg(long)]
    ensemble: Option<usize>,
    /// Weight file (or manifest with --ensemble) to write.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Weight file, or a `.json` ensemble manifest.
    #[arg(long)]
    model: PathBuf,
    /// IDX image file (optionally .gz) or CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    /// IDX label file to score the predictions against.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// The CSV input has no label column.
    #[arg(long)]
    unlabeled: bool,
    /// Also write class posteriors.
    #[arg(long)]
    posteriors: bool,
    /// Accept PI members in an ensemble manifest.
    #[arg(long)]
    allow_pi: bool,
    /// Output CSV; standard output if omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run only these suites (letters a-f, comma-separated).
    #[arg(long, value_delimiter = ',')]
    suite: Vec<char>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level)).init();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::FetchData(a) => fetch(a),
        Command::Sweep(a) => sweep(a),
        Command::EnsembleSweep(a) => ensemble_sweep(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Selftest(a) => selftest(a),
    }
}

fn fetch(a: FetchArgs) -> Result<i32> {
    let cfg = a.exp.resolve()?;
    let source = match a.from {
        Some(dir) => Source::Local(dir),
        None => Source::Mirror(cfg.mirror_url.clone()),
    };
    for p in fetch_data(&cfg.data_dir, &source, &MNIST_SHA256)? {
        println!("{}", p.display());
    }
    Ok(EXIT_OK)
}

fn sweep(a: ExpArgs) -> Result<i32> {
    let cfg = a.resolve()?;
    let out = cfg.output_dir.clone();
    let exp = Experiment::load(cfg)?;
    let outcome = run_fanout_sweep(&exp, Some(&out))?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(
        stdout,
        "{:>7} {:>10} {:>10} {:>13} {:>11} {:>6} {:>8}",
        "fan_out", "pi_err_%", "lda_err_%", "improvement_%", "lda/pi_time", "trials", "excluded"
    );
    for r in &outcome.summary.rows {
        let _ = writeln!(
            stdout,
            "{:>7} {:>10.3} {:>10.3} {:>13.2} {:>11.3} {:>6} {:>8}",
            r.fan_out, r.pi_error_pct, r.lda_error_pct, r.improvement_pct, r.train_time_ratio, r.trials, r.excluded
        );
    }
    info!("results written to {}", out.display());
    let failed: Vec<_> = outcome.failures().collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        warn!("{} trials failed; see trials.csv", failed.len());
        Ok(if failed.iter().any(|t| t.numerical_failure) {
            EXIT_NUMERICAL
        } else {
            EXIT_DATA
        })
    }
}

fn ensemble_sweep(a: ExpArgs) -> Result<i32> {
    let cfg = a.resolve()?;
    let out = cfg.output_dir.clone();
    let exp = Experiment::load(cfg)?;
    let outcome = run_ensemble_sweep(&exp, Some(&out))?;
    println!(
        "{:>13} {:>10} {:>10} {:>7}",
        "ensemble_size", "error_%", "std", "repeats"
    );
    for r in &outcome.summary {
        println!(
            "{:>13} {:>10.3} {:>10.3} {:>7}",
            r.ensemble_size, r.error_pct, r.error_std, r.repeats
        );
    }
    info!("results written to {}", out.display());
    Ok(EXIT_OK)
}

fn train(a: TrainArgs) -> Result<i32> {
    let cfg = a.exp.resolve()?;
    let fan_out = match cfg.fan_outs.as_slice() {
        [f] => *f,
        other => {
            return Err(Error::Config(format!(
                "train needs exactly one --fan-out, got {other:?}"
            )))
        }
    };
    let exp = Experiment::load(cfg)?;
    // The experiment's test set is already preprocessed.
    let (x, truth) = (exp.test().x(), exp.test().labels());
    let predicted = match a.ensemble {
        Some(size) => {
            if a.solver != SolverKind::Lda {
                return Err(Error::Config("ensembles are built from LDA members".into()));
            }
            let ens = train_ensemble(&exp, fan_out, size, 0)?;
            ens.save(&a.output)?;
            let per_member = ens
                .members()
                .iter()
                .map(|m| Ok(posteriors(&m.scores_prepared(x)?)))
                .collect::<Result<Vec<_>>>()?;
            combine_posteriors(&per_member)?.classify()
        }
        None => {
            let model = train_model(&exp, a.solver, fan_out, exp.trial_seed(fan_out, 0))?;
            model.save(&a.output)?;
            model.scores_prepared(x)?.classify()
        }
    };
    println!("test_error_pct {:.4}", error_rate(&predicted, truth)?);
    info!("wrote {}", a.output.display());
    Ok(EXIT_OK)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

enum Predictor {
    Single(Model),
    Ensemble(EnsembleModel),
}

fn predict(a: PredictArgs) -> Result<i32> {
    let (x, truth) = if is_csv(&a.input) {
        let d = load_csv(&a.input, !a.unlabeled)?;
        let labels = (!a.unlabeled).then(|| d.labels().to_vec());
        (d.x().clone(), labels)
    } else {
        let x = load_idx_images(&a.input)?;
        let labels = a.labels.as_ref().map(load_idx_labels).transpose()?;
        (x, labels)
    };
    let manifest = a.model.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let predictor = if manifest {
        let opts = EnsembleOptions {
            allow_pi: a.allow_pi,
            ..Default::default()
        };
        Predictor::Ensemble(EnsembleModel::load(&a.model, opts)?)
    } else {
        Predictor::Single(Model::load(&a.model)?)
    };
    let (inputs, classes) = match &predictor {
        Predictor::Single(m) => (m.num_inputs(), m.num_classes()),
        Predictor::Ensemble(e) => (e.num_inputs(), e.num_classes()),
    };
    if x.rows() != inputs {
        return Err(Error::format(
            &a.input,
            format!("{} features per sample, model expects {inputs}", x.rows()),
        ));
    }
    let (post, labels): (Posteriors, Vec<usize>) = match &predictor {
        Predictor::Single(m) => {
            let p = m.posteriors(&x)?;
            let l = p.classify();
            (p, l)
        }
        Predictor::Ensemble(e) => ensemble_predict(e, &x)?,
    };

    let sink: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["index".to_string(), "predicted".to_string()];
    if a.posteriors {
        header.extend((0..classes).map(|c| format!("p{c}")));
    }
    w.write_record(&header)?;
    for (j, l) in labels.iter().enumerate() {
        let mut row = vec![j.to_string(), l.to_string()];
        if a.posteriors {
            row.extend((0..classes).map(|c| format!("{:?}", post.matrix()[(c, j)])));
        }
        w.write_record(&row)?;
    }
    w.flush()
        .map_err(|e| Error::io(a.output.clone().unwrap_or_else(|| "<stdout>".into()), e))?;
    if let Some(t) = truth {
        let err = error_rate(&labels, &t)?;
        eprintln!("error_pct {err:.4}");
    }
    Ok(EXIT_OK)
}

fn selftest(a: SelftestArgs) -> Result<i32> {
    let ids = if a.suite.is_empty() {
        SUITE_IDS.to_vec()
    } else {
        a.suite.clone()
    };
    let mut suites = Vec::new();
    for id in ids {
        let r = run_suite(id.to_ascii_lowercase(), a.seed)
            .ok_or_else(|| Error::Config(format!("unknown suite {id:?}; expected one of a-f")))?;
        println!("{r}");
        suites.push(r);
    }
    let report = SelftestReport { suites };
    Ok(if report.passed() { EXIT_OK } else { EXIT_NUMERICAL })
}
