//! The four OOD detectors over softmax outputs and their decision rules.
//!
//! * baseline: max softmax probability, OOD when below a calibrated threshold
//! * ODIN: max softmax at temperature `T` of a gradient-perturbed input,
//!   thresholded like the baseline
//! * isolation forest fitted on validation softmax vectors, OOD when the
//!   anomaly score exceeds 0.5
//! * gradient boosting fitted on validation (in) versus auxiliary (out)
//!   softmax vectors, OOD when the predicted probability exceeds 0.5
//!
//! Outlier exposure is not a detector kind: it is a differently trained
//! model scored by the baseline detector.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{FeatureVector, ProbVector};
use crate::error::{Error, Result};
use crate::gbm::{BoostedClassifier, GbmParams};
use crate::iforest::{self, ForestParams, IsolationForest};
use crate::metrics::Verdict;
use crate::nn::SoftmaxClassifier;
use crate::persist::{self, LineReader};

pub const DEFAULT_QUANTILE: f64 = 0.05;
pub const MIN_CALIBRATION_POINTS: usize = 20;
pub const DEFAULT_ODIN_TEMPERATURE: f64 = 1000.0;
pub const DEFAULT_ODIN_EPSILON: f64 = 0.005;
/// Probability above which the boosted classifier declares OOD.
pub const GBM_DECISION_THRESHOLD: f64 = 0.5;

const HEADER_KEY: &str = "oodkit-detector";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    Baseline,
    Odin,
    IsolationForest,
    GradientBoosting,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [
        DetectorKind::Baseline,
        DetectorKind::Odin,
        DetectorKind::IsolationForest,
        DetectorKind::GradientBoosting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Baseline => "baseline",
            DetectorKind::Odin => "odin",
            DetectorKind::IsolationForest => "iforest",
            DetectorKind::GradientBoosting => "gbm",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            DetectorKind::Baseline | DetectorKind::Odin => Orientation::LargerIsIn,
            DetectorKind::IsolationForest | DetectorKind::GradientBoosting => Orientation::LargerIsOut,
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown detector kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    LargerIsIn,
    LargerIsOut,
}

impl Orientation {
    /// Maps a raw score so that larger means more in-distribution.
    pub fn oriented(self, score: f64) -> f64 {
        match self {
            Orientation::LargerIsIn => score,
            Orientation::LargerIsOut => -score,
        }
    }

    pub fn flipped(self) -> Orientation {
        match self {
            Orientation::LargerIsIn => Orientation::LargerIsOut,
            Orientation::LargerIsOut => Orientation::LargerIsIn,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Orientation::LargerIsIn => "larger-is-in",
            Orientation::LargerIsOut => "larger-is-out",
        }
    }
}

/// What a detector consumes: a softmax vector, or for ODIN the raw input
/// together with the classifier that produced it.
#[derive(Debug, Clone, Copy)]
pub enum DetectorInput<'a> {
    Probs(&'a ProbVector),
    Features {
        model: &'a SoftmaxClassifier,
        x: &'a FeatureVector,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub verdict: Verdict,
    /// Raw detector score before thresholding.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Baseline {
        threshold: f64,
    },
    Odin {
        threshold: f64,
        temperature: f64,
        epsilon: f64,
    },
    Forest(IsolationForest),
    Boosted(BoostedClassifier),
}

/// A fitted detector. Only the `calibrate_*` / `fit_*` constructors produce
/// one, so every detector is fitted by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    state: State,
}

pub fn baseline_score(p: &ProbVector) -> f64 {
    p.max()
}

/// Lower (inverted-CDF) empirical `q`-quantile: the `ceil(q n)`-th smallest
/// score, or the minimum for `q = 0`.
pub fn calibrate_threshold(scores: &[f64], q: f64) -> Result<f64> {
    if scores.len() < MIN_CALIBRATION_POINTS {
        return Err(Error::Fit(format!(
            "threshold calibration needs at least {MIN_CALIBRATION_POINTS} scores, got {}",
            scores.len()
        )));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Config(format!("quantile must be in [0, 1), got {q}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Fit("non-finite calibration score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // The 1e-9 slack keeps products like 0.05 * 100 from rounding up a rank.
    let rank = (q * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank - 1])
}

pub fn calibrate_baseline(val_probs: &[ProbVector], q: f64) -> Result<Detector> {
    let scores: Vec<f64> = val_probs.iter().map(baseline_score).collect();
    Ok(Detector {
        state: State::Baseline {
            threshold: calibrate_threshold(&scores, q)?,
        },
    })
}

/// Perturbs `x` toward higher confidence in its temperature-1 predicted class,
/// then returns the max softmax probability at `temperature`.
pub fn odin_score(model: &SoftmaxClassifier, x: &FeatureVector, temperature: f64, epsilon: f64) -> Result<f64> {
    let perturbed = model.perturb_odin(x, epsilon)?;
    Ok(model.forward(&perturbed, temperature)?.max())
}

/// Calibrates the ODIN threshold on perturbed validation inputs.
pub fn calibrate_odin(
    model: &SoftmaxClassifier,
    val_inputs: &[FeatureVector],
    temperature: f64,
    epsilon: f64,
    q: f64,
) -> Result<Detector> {
    let scores = val_inputs
        .iter()
        .map(|x| odin_score(model, x, temperature, epsilon))
        .collect::<Result<Vec<_>>>()?;
    Ok(Detector {
        state: State::Odin {
            threshold: calibrate_threshold(&scores, q)?,
            temperature,
            epsilon,
        },
    })
}

pub fn fit_iforest_detector(val_probs: &[ProbVector], params: &ForestParams) -> Result<Detector> {
    Ok(Detector {
        state: State::Forest(IsolationForest::fit(val_probs, params)?),
    })
}

/// Labels validation vectors 0 (in) and auxiliary OOD vectors 1 (out).
pub fn fit_gbm_detector(
    val_probs: &[ProbVector],
    ood_probs: &[ProbVector],
    params: &GbmParams,
) -> Result<Detector> {
    if val_probs.is_empty() || ood_probs.is_empty() {
        return Err(Error::Fit("gradient boosting detector needs in and out samples".into()));
    }
    let points: Vec<&ProbVector> = val_probs.iter().chain(ood_probs).collect();
    let points: Vec<&[f64]> = points.into_iter().map(ProbVector::as_slice).collect();
    let labels: Vec<bool> = std::iter::repeat_n(false, val_probs.len())
        .chain(std::iter::repeat_n(true, ood_probs.len()))
        .collect();
    Ok(Detector {
        state: State::Boosted(BoostedClassifier::fit(&points, &labels, params)?),
    })
}

impl Detector {
    /// A baseline-rule detector with a given threshold.
    pub fn baseline_with_threshold(threshold: f64) -> Self {
        Detector {
            state: State::Baseline { threshold },
        }
    }

    pub fn kind(&self) -> DetectorKind {
        match self.state {
            State::Baseline { .. } => DetectorKind::Baseline,
            State::Odin { .. } => DetectorKind::Odin,
            State::Forest(_) => DetectorKind::IsolationForest,
            State::Boosted(_) => DetectorKind::GradientBoosting,
        }
    }

    pub fn orientation(&self) -> Orientation {
        self.kind().orientation()
    }

    /// Calibrated threshold of the max-softmax rules; `None` for the forest
    /// and boosting detectors, whose cut-off is the fixed 0.5.
    pub fn threshold(&self) -> Option<f64> {
        match self.state {
            State::Baseline { threshold } | State::Odin { threshold, .. } => Some(threshold),
            _ => None,
        }
    }

    pub fn forest(&self) -> Option<&IsolationForest> {
        match &self.state {
            State::Forest(f) => Some(f),
            _ => None,
        }
    }

    pub fn boosted(&self) -> Option<&BoostedClassifier> {
        match &self.state {
            State::Boosted(b) => Some(b),
            _ => None,
        }
    }

    pub fn score(&self, input: &DetectorInput<'_>) -> Result<f64> {
        match (&self.state, input) {
            (State::Baseline { .. }, DetectorInput::Probs(p)) => Ok(baseline_score(p)),
            (
                State::Odin {
                    temperature,
                    epsilon,
                    ..
                },
                DetectorInput::Features { model, x },
            ) => odin_score(model, x, *temperature, *epsilon),
            (State::Forest(f), DetectorInput::Probs(p)) => f.anomaly_score(p.as_slice()),
            (State::Boosted(b), DetectorInput::Probs(p)) => b.predict_proba(p.as_slice()),
            (_, DetectorInput::Probs(_)) => Err(Error::DetectorInput(format!(
                "{} detector needs features and a model",
                self.kind()
            ))),
            (_, DetectorInput::Features { .. }) => Err(Error::DetectorInput(format!(
                "{} detector needs a probability vector",
                self.kind()
            ))),
        }
    }

    pub fn verdict_for(&self, score: f64) -> Verdict {
        let ood = match self.state {
            State::Baseline { threshold } | State::Odin { threshold, .. } => score < threshold,
            State::Forest(_) => score > iforest::DECISION_THRESHOLD,
            State::Boosted(_) => score > GBM_DECISION_THRESHOLD,
        };
        if ood {
            Verdict::OutOfDistribution
        } else {
            Verdict::InDistribution
        }
    }

    pub fn decide(&self, input: &DetectorInput<'_>) -> Result<Decision> {
        let score = self.score(input)?;
        Ok(Decision {
            verdict: self.verdict_for(score),
            score,
        })
    }

    pub fn to_text(&self) -> String {
        let threshold = self
            .threshold()
            .map_or_else(|| "-".to_string(), persist::fmt_f64);
        let mut header = vec![
            "kind".to_string(),
            self.kind().name().to_string(),
            "threshold".into(),
            threshold,
            "orientation".into(),
            self.orientation().name().into(),
        ];
        if let State::Odin {
            temperature,
            epsilon,
            ..
        } = self.state
        {
            header.extend([
                "temperature".into(),
                persist::fmt_f64(temperature),
                "epsilon".into(),
                persist::fmt_f64(epsilon),
            ]);
        }
        let mut out = String::new();
        persist::push_line(&mut out, HEADER_KEY, header);
        match &self.state {
            State::Forest(f) => out.push_str(&f.to_text()),
            State::Boosted(b) => out.push_str(&b.to_text()),
            _ => {}
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut r = LineReader::new(text, source);
        let tokens = r.expect(HEADER_KEY)?;
        if tokens.len() % 2 != 0 {
            return Err(r.error("detector header must be key/value pairs"));
        }
        let get = |key: &str| {
            tokens
                .chunks(2)
                .find(|kv| kv[0] == key)
                .map(|kv| kv[1])
        };
        let kind: DetectorKind = get("kind")
            .ok_or_else(|| r.error("missing `kind`"))?
            .parse()
            .map_err(|e: Error| r.error(e.to_string()))?;
        if get("orientation") != Some(kind.orientation().name()) {
            return Err(r.error(format!("orientation does not match kind `{kind}`")));
        }
        let float = |key: &str| -> Result<f64> {
            let v = get(key).ok_or_else(|| r.error(format!("missing `{key}`")))?;
            r.parse::<f64>(v)
        };
        let state = match kind {
            DetectorKind::Baseline => State::Baseline {
                threshold: float("threshold")?,
            },
            DetectorKind::Odin => State::Odin {
                threshold: float("threshold")?,
                temperature: float("temperature")?,
                epsilon: float("epsilon")?,
            },
            DetectorKind::IsolationForest => State::Forest(IsolationForest::read(&mut r)?),
            DetectorKind::GradientBoosting => State::Boosted(BoostedClassifier::read(&mut r)?),
        };
        r.finish()?;
        Ok(Detector { state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_file(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&persist::read_file(path)?, &path.display().to_string())
    }
}
