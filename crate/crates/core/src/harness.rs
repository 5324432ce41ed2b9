//! End-to-end benchmark: generate data, train the plain and
//! outlier-exposure classifiers, fit all detectors on validation softmax
//! outputs and evaluate them against every evaluation OOD pool.
//!
//! Seeds: every stage derives its seed from the master seed as
//! `master * 1000 + stage_index` (wrapping), see [`Stage`].

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_ood_pool, generate_synthetic, FeatureVector, OodMode, OodPool, OodPoolSpec, ProbVector,
    SplitDataset, SyntheticSpec, DEFAULT_SHIFTED_SPREAD,
};
use crate::detectors::{self, Detector, DetectorInput};
use crate::error::{Error, Result, StageExt};
use crate::gbm::{self, GbmParams};
use crate::iforest::{self, ForestParams};
use crate::metrics::{self, MetricsRow};
use crate::nn::{self, SoftmaxClassifier, TrainConfig};
use crate::persist;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const STAGE_STRIDE: u64 = 1000;

/// Pipeline stages that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    /// Weight initialisation and batch order, shared by the plain and OE models.
    Model,
    IsolationForest,
    /// The `i`-th entry of the pool list.
    Pool(usize),
}

impl Stage {
    fn index(self) -> u64 {
        match self {
            Stage::Data => 0,
            Stage::Model => 1,
            Stage::IsolationForest => 2,
            Stage::Pool(i) => 16 + i as u64,
        }
    }
}

pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    master.wrapping_mul(STAGE_STRIDE).wrapping_add(stage.index())
}

/// The five compared methods. Outlier exposure is the baseline rule applied
/// to the OE-trained classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Baseline,
    Odin,
    OutlierExposure,
    IsolationForest,
    GradientBoosting,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::Odin,
        Method::OutlierExposure,
        Method::IsolationForest,
        Method::GradientBoosting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Odin => "odin",
            Method::OutlierExposure => "outlier-exposure",
            Method::IsolationForest => "iforest",
            Method::GradientBoosting => "gbm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// In-distribution quantile used to calibrate the max-softmax thresholds.
    pub quantile: f64,
    pub odin_temperature: f64,
    pub odin_epsilon: f64,
    pub iforest_trees: usize,
    /// Defaults to `min(256, n_validation)`.
    pub iforest_sample_size: Option<usize>,
    pub gbm_trees: usize,
    pub gbm_max_depth: usize,
    pub gbm_learning_rate: f64,
    pub gbm_balance_classes: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            quantile: detectors::DEFAULT_QUANTILE,
            odin_temperature: detectors::DEFAULT_ODIN_TEMPERATURE,
            odin_epsilon: detectors::DEFAULT_ODIN_EPSILON,
            iforest_trees: iforest::DEFAULT_TREES,
            iforest_sample_size: None,
            gbm_trees: gbm::DEFAULT_TREES,
            gbm_max_depth: gbm::DEFAULT_MAX_DEPTH,
            gbm_learning_rate: gbm::DEFAULT_LEARNING_RATE,
            gbm_balance_classes: false,
        }
    }
}

impl DetectorConfig {
    pub fn forest_params(&self, master_seed: u64) -> ForestParams {
        ForestParams {
            n_trees: self.iforest_trees,
            sample_size: self.iforest_sample_size,
            seed: stage_seed(master_seed, Stage::IsolationForest),
        }
    }

    pub fn gbm_params(&self) -> GbmParams {
        GbmParams {
            n_trees: self.gbm_trees,
            max_depth: self.gbm_max_depth,
            learning_rate: self.gbm_learning_rate,
            balance_classes: self.gbm_balance_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub tag: String,
    pub mode: OodMode,
    pub n: usize,
    /// The exposure pool trains the OE model and the boosting detector and is
    /// never evaluated on.
    #[serde(default)]
    pub exposure: bool,
    #[serde(default = "default_pool_spread")]
    pub spread: f64,
}

fn default_pool_spread() -> f64 {
    DEFAULT_SHIFTED_SPREAD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub detectors: DetectorConfig,
    pub pools: Vec<PoolConfig>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 1,
            data: SyntheticSpec {
                n_classes: 4,
                feature_dim: 4,
                samples_per_class: 250,
                spread: 0.15,
                seed: 0,
            },
            train: TrainConfig::default(),
            detectors: DetectorConfig::default(),
            pools: vec![
                PoolConfig {
                    tag: "exposure-box".into(),
                    mode: OodMode::UniformBox,
                    n: 400,
                    exposure: true,
                    spread: DEFAULT_SHIFTED_SPREAD,
                },
                PoolConfig {
                    tag: "box".into(),
                    mode: OodMode::UniformBox,
                    n: 200,
                    exposure: false,
                    spread: DEFAULT_SHIFTED_SPREAD,
                },
                PoolConfig {
                    tag: "shifted".into(),
                    mode: OodMode::ShiftedCluster,
                    n: 200,
                    exposure: false,
                    spread: 0.5,
                },
            ],
        }
    }
}

impl BenchmarkConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchmarkConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&persist::read_file(path.as_ref())?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let exposure: Vec<&PoolConfig> = self.pools.iter().filter(|p| p.exposure).collect();
        if exposure.len() != 1 {
            return Err(Error::Config(format!(
                "exactly one exposure pool is required, found {}",
                exposure.len()
            )));
        }
        if self.evaluation_pools().next().is_none() {
            return Err(Error::Config("at least one evaluation pool is required".into()));
        }
        for (i, p) in self.pools.iter().enumerate() {
            if self.pools[..i].iter().any(|q| q.tag == p.tag) {
                return Err(Error::Config(format!("duplicate pool tag `{}`", p.tag)));
            }
            if p.tag.is_empty() || p.tag.contains(|c: char| c.is_whitespace() || c == ',') {
                return Err(Error::Config(format!("invalid pool tag `{}`", p.tag)));
            }
            if p.n == 0 {
                return Err(Error::Config(format!("pool `{}` has n = 0", p.tag)));
            }
        }
        let d = &self.detectors;
        if !(0.0..1.0).contains(&d.quantile) {
            return Err(Error::Config("quantile must be in [0, 1)".into()));
        }
        let valid_odin = d.odin_temperature > 0.0 && d.odin_temperature.is_finite() && d.odin_epsilon >= 0.0 && d.odin_epsilon.is_finite();
        if !valid_odin {
            return Err(Error::Config("ODIN needs temperature > 0 and epsilon >= 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization, first 16 hex digits.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn exposure_pool(&self) -> (usize, &PoolConfig) {
        self.pools
            .iter()
            .enumerate()
            .find(|(_, p)| p.exposure)
            .expect("validated config has an exposure pool")
    }

    pub fn evaluation_pools(&self) -> impl Iterator<Item = (usize, &PoolConfig)> {
        self.pools.iter().enumerate().filter(|(_, p)| !p.exposure)
    }

    pub fn data_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: stage_seed(self.seed, Stage::Data),
            ..self.data.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: stage_seed(self.seed, Stage::Model),
            ..self.train.clone()
        }
    }

    pub fn pool_spec(&self, index: usize) -> OodPoolSpec {
        let p = &self.pools[index];
        OodPoolSpec {
            tag: p.tag.clone(),
            feature_dim: self.data.feature_dim,
            n: p.n,
            mode: p.mode,
            spread: p.spread,
            seed: stage_seed(self.seed, Stage::Pool(index)),
        }
    }
}

/// Generated inputs of one benchmark run.
#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub dataset: SplitDataset,
    /// All pools, in config order.
    pub pools: Vec<OodPool>,
}

pub fn generate_data(cfg: &BenchmarkConfig) -> Result<BenchmarkData> {
    let dataset = generate_synthetic(&cfg.data_spec())?;
    let pools = (0..cfg.pools.len())
        .map(|i| generate_ood_pool(&cfg.pool_spec(i), dataset.feature_dim()))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkData { dataset, pools })
}

fn initial_model(cfg: &BenchmarkConfig, data: &SplitDataset) -> Result<SoftmaxClassifier> {
    SoftmaxClassifier::init(
        data.feature_dim(),
        cfg.train.hidden_units,
        data.n_classes,
        stage_seed(cfg.seed, Stage::Model),
    )
}

/// Trains the plain classifier, or the OE classifier when `exposure` is given.
pub fn train_model(
    cfg: &BenchmarkConfig,
    data: &SplitDataset,
    exposure: Option<&OodPool>,
) -> Result<SoftmaxClassifier> {
    let model = initial_model(cfg, data)?;
    let outcome = match exposure {
        None => nn::train(model, data, &cfg.train_config())?,
        Some(pool) => nn::train_with_oe(model, data, pool, &cfg.train_config())?,
    };
    Ok(outcome.model)
}

pub fn predict_all(model: &SoftmaxClassifier, xs: &[FeatureVector]) -> Result<Vec<ProbVector>> {
    xs.iter().map(|x| model.forward(x, 1.0)).collect()
}

fn features(samples: &[crate::data::LabeledSample]) -> Vec<FeatureVector> {
    samples.iter().map(|s| s.features.clone()).collect()
}

/// Fits the detector behind `method`. `model` is the classifier whose
/// softmax outputs the method consumes (the OE model for outlier exposure).
pub fn fit_method(
    cfg: &BenchmarkConfig,
    method: Method,
    model: &SoftmaxClassifier,
    validation: &[FeatureVector],
    exposure: &[FeatureVector],
) -> Result<Detector> {
    let d = &cfg.detectors;
    match method {
        Method::Baseline | Method::OutlierExposure => {
            detectors::calibrate_baseline(&predict_all(model, validation)?, d.quantile)
        }
        Method::Odin => {
            detectors::calibrate_odin(model, validation, d.odin_temperature, d.odin_epsilon, d.quantile)
        }
        Method::IsolationForest => {
            detectors::fit_iforest_detector(&predict_all(model, validation)?, &d.forest_params(cfg.seed))
        }
        Method::GradientBoosting => detectors::fit_gbm_detector(
            &predict_all(model, validation)?,
            &predict_all(model, exposure)?,
            &d.gbm_params(),
        ),
    }
}

/// Evaluates a fitted detector on in-distribution versus OOD features.
pub fn evaluate_method(
    method: Method,
    detector: &Detector,
    model: &SoftmaxClassifier,
    in_features: &[FeatureVector],
    out_features: &[FeatureVector],
    ood_set: &str,
) -> Result<MetricsRow> {
    let probs_in;
    let probs_out;
    let (ins, outs): (Vec<DetectorInput<'_>>, Vec<DetectorInput<'_>>) = if method == Method::Odin {
        (
            in_features.iter().map(|x| DetectorInput::Features { model, x }).collect(),
            out_features.iter().map(|x| DetectorInput::Features { model, x }).collect(),
        )
    } else {
        probs_in = predict_all(model, in_features)?;
        probs_out = predict_all(model, out_features)?;
        (
            probs_in.iter().map(DetectorInput::Probs).collect(),
            probs_out.iter().map(DetectorInput::Probs).collect(),
        )
    };
    metrics::evaluate_detector(detector, method.name(), ood_set, &ins, &outs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metrics: MetricsRow,
    pub threshold: Option<f64>,
    pub classification_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// One row per (method, evaluation pool), methods in [`Method::ALL`] order.
    pub rows: Vec<ReportRow>,
    /// Macro-average across evaluation pools, one per method.
    pub summary: Vec<MetricsRow>,
}

impl EvalReport {
    pub fn row(&self, method: Method, ood_set: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.metrics.detector == method.name() && r.metrics.ood_set == ood_set)
    }

    pub fn mean(&self, method: Method) -> Option<&MetricsRow> {
        self.summary.iter().find(|r| r.detector == method.name())
    }

    pub const CSV_HEADER: &'static str =
        "detector,ood_set,threshold,classification_error,ood_error,auroc,fpr_at_95_tpr";

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# version={} config_hash={} seed={}", self.version, self.config_hash, self.seed);
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let threshold = r.threshold.map_or_else(|| "-".into(), |t| t.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m.detector,
                m.ood_set,
                threshold,
                r.classification_error,
                metrics_csv_fields(m)
            );
        }
        for m in &self.summary {
            let _ = writeln!(out, "{},{},-,-,{}", m.detector, m.ood_set, metrics_csv_fields(m));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "oodkit benchmark report");
        let _ = writeln!(out, "version      {}", self.version);
        let _ = writeln!(out, "config hash  {}", self.config_hash);
        let _ = writeln!(out, "seed         {}", self.seed);
        let _ = writeln!(out);
        let header = format!(
            "{:<18} {:<16} {:>10} {:>10} {:>10} {:>8} {:>14}",
            "method", "OOD data", "threshold", "clf error", "OOD error", "AUROC", "FPR@95%TPR"
        );
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{}", "-".repeat(header.len()));
        for r in &self.rows {
            let m = &r.metrics;
            let threshold = r.threshold.map_or_else(|| "-".into(), |t| format!("{t:.4}"));
            let _ = writeln!(
                out,
                "{:<18} {:<16} {:>10} {:>10.4} {:>10.4} {:>8.4} {:>14.4}",
                m.detector, m.ood_set, threshold, r.classification_error, m.ood_error, m.auroc, m.fpr_at_95_tpr
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "average over evaluation OOD sets");
        for m in &self.summary {
            let _ = writeln!(
                out,
                "{:<18} {:<16} {:>10} {:>10} {:>10.4} {:>8.4} {:>14.4}",
                m.detector, m.ood_set, "", "", m.ood_error, m.auroc, m.fpr_at_95_tpr
            );
        }
        out
    }
}

/// `ood_error,auroc,fpr_at_95_tpr` with shortest round-trip formatting.
pub fn metrics_csv_fields(m: &MetricsRow) -> String {
    format!("{},{},{}", m.ood_error, m.auroc, m.fpr_at_95_tpr)
}

/// Everything a benchmark run produces.
#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub data: BenchmarkData,
    pub model: SoftmaxClassifier,
    pub oe_model: SoftmaxClassifier,
    /// Fitted detectors in [`Method::ALL`] order.
    pub detectors: Vec<(Method, Detector)>,
    pub report: EvalReport,
}

impl BenchmarkOutcome {
    /// Writes `model.txt`, `model_oe.txt`, `detector_<name>.txt`,
    /// `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(dir.join("model.txt"))?;
        self.oe_model.save(dir.join("model_oe.txt"))?;
        for (method, det) in &self.detectors {
            det.save(dir.join(format!("detector_{}.txt", method.name())))?;
        }
        persist::write_file(&dir.join("report.txt"), &self.report.to_text())?;
        persist::write_file(&dir.join("report.csv"), &self.report.to_csv())
    }
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkOutcome> {
    cfg.validate().stage("config")?;
    let data = generate_data(cfg).stage("generate")?;
    let dataset = &data.dataset;
    let (exposure_idx, _) = cfg.exposure_pool();
    let exposure = &data.pools[exposure_idx];

    let model = train_model(cfg, dataset, None).stage("train")?;
    let oe_model = train_model(cfg, dataset, Some(exposure)).stage("train-oe")?;

    let validation = features(&dataset.validation);
    let test = features(&dataset.test);
    let clf_error = 1.0 - model.accuracy(&dataset.test).stage("classify")?;
    let oe_clf_error = 1.0 - oe_model.accuracy(&dataset.test).stage("classify")?;

    let mut fitted = Vec::new();
    for method in Method::ALL {
        let m = if method == Method::OutlierExposure { &oe_model } else { &model };
        let det = fit_method(cfg, method, m, &validation, &exposure.samples).stage("fit-detectors")?;
        fitted.push((method, det));
    }

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (method, det) in &fitted {
        let (m, err) = if *method == Method::OutlierExposure {
            (&oe_model, oe_clf_error)
        } else {
            (&model, clf_error)
        };
        let mut per_pool = Vec::new();
        for (i, pool_cfg) in cfg.evaluation_pools() {
            let row = evaluate_method(*method, det, m, &test, &data.pools[i].samples, &pool_cfg.tag)
                .stage("evaluate")?;
            per_pool.push(row.clone());
            rows.push(ReportRow {
                metrics: row,
                threshold: det.threshold(),
                classification_error: err,
            });
        }
        summary.push(metrics::macro_average(&per_pool, method.name(), "mean").stage("evaluate")?);
    }

    let report = EvalReport {
        version: VERSION.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rows,
        summary,
    };
    Ok(BenchmarkOutcome {
        data,
        model,
        oe_model,
        detectors: fitted,
        report,
    })
}
