use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oodkit::csv_io;
use oodkit::data::{FeatureVector, OodPool, SplitDataset};
use oodkit::detectors::{self, Detector, DetectorInput, DetectorKind};
use oodkit::harness::{self, BenchmarkConfig};
use oodkit::metrics::{self, MetricsRow, ScorePair, DEFAULT_TPR};
use oodkit::nn::SoftmaxClassifier;
use oodkit::Error;

/// Out-of-distribution detection on softmax outputs.
#[derive(Debug, Parser)]
#[command(name = "oodkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic train/validation/test splits and every OOD pool as CSV.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a softmax classifier, optionally with outlier exposure.
    Train {
        #[command(flatten)]
        common: Common,
        /// Labeled training CSV (`f0..,label`).
        #[arg(long)]
        train: PathBuf,
        /// Labeled validation CSV used for the learning-rate schedule and checkpointing.
        #[arg(long)]
        validation: PathBuf,
        /// Feature CSV of auxiliary OOD inputs; enables outlier-exposure training.
        #[arg(long)]
        oe_pool: Option<PathBuf>,
        /// Number of classes; defaults to the largest label plus one.
        #[arg(long)]
        classes: Option<usize>,
        /// Where to write the model.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write softmax vectors (`p0..`) for a saved model and a feature CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Feature CSV; a trailing `label` column is ignored.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate or fit one detector.
    FitDetector {
        #[command(flatten)]
        common: Common,
        /// baseline, odin, iforest or gbm.
        #[arg(long)]
        kind: DetectorKind,
        /// Validation softmax CSV, or validation feature CSV for odin.
        #[arg(long)]
        validation: PathBuf,
        /// Softmax CSV of the auxiliary OOD set (gbm only).
        #[arg(long)]
        ood: Option<PathBuf>,
        /// Classifier used by odin.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print OOD error, AUROC and FPR at 95% TPR as CSV.
    ///
    /// Without `--detector` both inputs are score CSVs (`score`, larger means
    /// in-distribution) and verdicts use the 95%-TPR threshold.
    Evaluate {
        /// In-distribution scores, softmax vectors, or features for odin.
        #[arg(long = "in")]
        in_path: PathBuf,
        /// OOD scores, softmax vectors, or features for odin.
        #[arg(long = "out")]
        out_path: PathBuf,
        #[arg(long)]
        detector: Option<PathBuf>,
        /// Classifier used by an odin detector.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Label for the detector column.
        #[arg(long)]
        name: Option<String>,
        /// Label for the OOD set column.
        #[arg(long, default_value = "ood")]
        ood_set: String,
    },
    /// Run the full pipeline and write models, detectors and reports.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML benchmark config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    odin_temperature: Option<f64>,
    #[arg(long)]
    odin_epsilon: Option<f64>,
}

impl Common {
    fn config(&self) -> oodkit::Result<BenchmarkConfig> {
        let mut cfg = match &self.config {
            Some(path) => BenchmarkConfig::load(path)?,
            None => BenchmarkConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.odin_temperature {
            cfg.detectors.odin_temperature = t;
        }
        if let Some(e) = self.odin_epsilon {
            cfg.detectors.odin_epsilon = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("oodkit: error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("oodkit: error: {}: {message}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Stage { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn run(command: Command) -> oodkit::Result<()> {
    match command {
        Command::Generate { common, out } => generate(&common.config()?, &out),
        Command::Train {
            common,
            train,
            validation,
            oe_pool,
            classes,
            out,
        } => {
            let cfg = common.config()?;
            let train = csv_io::load_labeled(train)?;
            let validation = csv_io::load_labeled(validation)?;
            let n_classes = classes.unwrap_or_else(|| {
                train.iter().chain(&validation).map(|s| s.label + 1).max().unwrap_or(0)
            });
            let data = SplitDataset::new(n_classes, train, validation, Vec::new())?;
            let pool = oe_pool
                .map(|p| OodPool::new(p.display().to_string(), csv_io::load_features(p)?))
                .transpose()?;
            harness::train_model(&cfg, &data, pool.as_ref())?.save(out)
        }
        Command::Predict { model, input, out } => {
            let model = SoftmaxClassifier::load(model)?;
            let xs = csv_io::load_features(input)?;
            csv_io::save_probs(out, &harness::predict_all(&model, &xs)?)
        }
        Command::FitDetector {
            common,
            kind,
            validation,
            ood,
            model,
            out,
        } => {
            let cfg = common.config()?;
            let d = &cfg.detectors;
            let detector = match kind {
                DetectorKind::Baseline => {
                    detectors::calibrate_baseline(&csv_io::load_probs(validation)?, d.quantile)?
                }
                DetectorKind::Odin => {
                    let model = SoftmaxClassifier::load(require(model, "--model", kind)?)?;
                    let xs = csv_io::load_features(validation)?;
                    detectors::calibrate_odin(&model, &xs, d.odin_temperature, d.odin_epsilon, d.quantile)?
                }
                DetectorKind::IsolationForest => detectors::fit_iforest_detector(
                    &csv_io::load_probs(validation)?,
                    &d.forest_params(cfg.seed),
                )?,
                DetectorKind::GradientBoosting => detectors::fit_gbm_detector(
                    &csv_io::load_probs(validation)?,
                    &csv_io::load_probs(require(ood, "--ood", kind)?)?,
                    &d.gbm_params(),
                )?,
            };
            detector.save(out)
        }
        Command::Evaluate {
            in_path,
            out_path,
            detector,
            model,
            name,
            ood_set,
        } => {
            let row = match detector {
                None => evaluate_scores(&in_path, &out_path, name.as_deref().unwrap_or("scores"), &ood_set)?,
                Some(path) => {
                    let detector = Detector::load(path)?;
                    let name = name.unwrap_or_else(|| detector.kind().name().to_string());
                    evaluate_with_detector(&detector, model.as_deref(), &in_path, &out_path, &name, &ood_set)?
                }
            };
            println!("detector,ood_set,ood_error,auroc,fpr_at_95_tpr");
            println!("{},{},{}", row.detector, row.ood_set, harness::metrics_csv_fields(&row));
            Ok(())
        }
        Command::Benchmark { common, out } => {
            let cfg = common.config()?;
            let outcome = harness::run_benchmark(&cfg)?;
            outcome.write(&out)?;
            print!("{}", outcome.report.to_text());
            Ok(())
        }
    }
}

fn require(path: Option<PathBuf>, flag: &str, kind: DetectorKind) -> oodkit::Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("{flag} is required for --kind {kind}")))
}

fn generate(cfg: &BenchmarkConfig, out: &Path) -> oodkit::Result<()> {
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let data = harness::generate_data(cfg)?;
    csv_io::save_labeled(out.join("train.csv"), &data.dataset.train)?;
    csv_io::save_labeled(out.join("validation.csv"), &data.dataset.validation)?;
    csv_io::save_labeled(out.join("test.csv"), &data.dataset.test)?;
    for pool in &data.pools {
        csv_io::save_features(out.join(format!("pool_{}.csv", pool.tag)), &pool.samples)?;
    }
    Ok(())
}

fn evaluate_scores(in_path: &Path, out_path: &Path, name: &str, ood_set: &str) -> oodkit::Result<MetricsRow> {
    let pair = ScorePair::new(csv_io::load_scores(in_path)?, csv_io::load_scores(out_path)?)?;
    let tau = metrics::threshold_at_tpr(pair.in_scores(), DEFAULT_TPR)?;
    MetricsRow::from_parts(
        name,
        ood_set,
        &pair,
        &metrics::verdicts_at_threshold(pair.in_scores(), tau),
        &metrics::verdicts_at_threshold(pair.out_scores(), tau),
    )
}

fn evaluate_with_detector(
    detector: &Detector,
    model: Option<&Path>,
    in_path: &Path,
    out_path: &Path,
    name: &str,
    ood_set: &str,
) -> oodkit::Result<MetricsRow> {
    if detector.kind() == DetectorKind::Odin {
        let path = model.ok_or_else(|| Error::Config("--model is required for an odin detector".into()))?;
        let model = SoftmaxClassifier::load(path)?;
        let load = |p: &Path| -> oodkit::Result<Vec<FeatureVector>> { csv_io::load_features(p) };
        let (xs_in, xs_out) = (load(in_path)?, load(out_path)?);
        let ins: Vec<_> = xs_in.iter().map(|x| DetectorInput::Features { model: &model, x }).collect();
        let outs: Vec<_> = xs_out.iter().map(|x| DetectorInput::Features { model: &model, x }).collect();
        metrics::evaluate_detector(detector, name, ood_set, &ins, &outs)
    } else {
        let (p_in, p_out) = (csv_io::load_probs(in_path)?, csv_io::load_probs(out_path)?);
        let ins: Vec<_> = p_in.iter().map(DetectorInput::Probs).collect();
        let outs: Vec<_> = p_out.iter().map(DetectorInput::Probs).collect();
        metrics::evaluate_detector(detector, name, ood_set, &ins, &outs)
    }
}
