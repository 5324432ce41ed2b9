//! Domain types shared by every detector, plus the synthetic Gaussian-cluster
//! generator used in place of real image datasets.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on `sum(probs) == 1`.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// A softmax output over `M >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidProbability(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some((k, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::InvalidProbability(format!(
                "entry {k} = {p} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::InvalidProbability(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(ProbVector(probs))
    }

    /// Uniform distribution over `m` classes.
    pub fn uniform(m: usize) -> Result<Self> {
        Self::new(vec![1.0 / m as f64; m])
    }

    pub fn one_hot(m: usize, class: usize) -> Result<Self> {
        if class >= m {
            return Err(Error::InvalidProbability(format!(
                "class {class} out of range for {m} classes"
            )));
        }
        let mut v = vec![0.0; m];
        v[class] = 1.0;
        Self::new(v)
    }

    pub fn n_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest entry; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = k;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Raw model-input features. All entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidFeature(format!("entry {i} = {v} is not finite")));
        }
        Ok(FeatureVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: FeatureVector,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub n_classes: usize,
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl SplitDataset {
    /// Checks the split invariants: consistent dimension, labels in range and a
    /// non-empty validation split.
    pub fn new(
        n_classes: usize,
        train: Vec<LabeledSample>,
        validation: Vec<LabeledSample>,
        test: Vec<LabeledSample>,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
        }
        if validation.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        let dim = validation[0].features.dim();
        for s in train.iter().chain(&validation).chain(&test) {
            if s.features.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: s.features.dim(),
                });
            }
            if s.label >= n_classes {
                return Err(Error::Config(format!(
                    "label {} out of range for {n_classes} classes",
                    s.label
                )));
            }
        }
        Ok(SplitDataset {
            n_classes,
            train,
            validation,
            test,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.validation[0].features.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodPool {
    pub tag: String,
    pub samples: Vec<FeatureVector>,
}

impl OodPool {
    pub fn new(tag: impl Into<String>, samples: Vec<FeatureVector>) -> Result<Self> {
        let tag = tag.into();
        if samples.is_empty() {
            return Err(Error::Config(format!("OOD pool `{tag}` is empty")));
        }
        let dim = samples[0].dim();
        if let Some(s) = samples.iter().find(|s| s.dim() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                found: s.dim(),
            });
        }
        Ok(OodPool { tag, samples })
    }

    pub fn feature_dim(&self) -> usize {
        self.samples[0].dim()
    }
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    /// Per-coordinate standard deviation around each class center.
    pub spread: f64,
    #[serde(skip)]
    pub seed: u64,
}

const TRAIN_FRACTION: f64 = 0.6;
const VALIDATION_FRACTION: f64 = 0.2;
/// Candidate directions tried per center when the cross-polytope layout runs out.
const CENTER_CANDIDATES: usize = 64;

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be >= 2, got {}",
                self.n_classes
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config(format!(
                "feature_dim must be >= 2, got {}",
                self.feature_dim
            )));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Config(format!(
                "spread must be positive and finite, got {}",
                self.spread
            )));
        }
        let total = self.n_classes * self.samples_per_class;
        if total < 5 {
            return Err(Error::Config(format!(
                "need at least 5 samples in total for a 60/20/20 split, got {total}"
            )));
        }
        Ok(())
    }

    /// Class centers on the unit sphere.
    ///
    /// The first `2d` centers are the vertices `+q_0, ..., +q_{d-1}, -q_0, ...`
    /// of a cross-polytope in a random orthonormal frame, so any two of them are
    /// at least `sqrt(2)` apart. Further centers are picked greedily as the
    /// random unit direction farthest from all existing centers.
    pub fn class_centers(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(place_centers(self.n_classes, self.feature_dim, &mut rng))
    }
}

fn random_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn orthonormal_frame(d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(d);
    while frame.len() < d {
        let mut v = random_unit(d, rng);
        for q in &frame {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            frame.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    frame
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn place_centers(m: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let frame = orthonormal_frame(d, rng);
    let mut centers: Vec<Vec<f64>> = frame
        .iter()
        .cloned()
        .chain(frame.iter().map(|q| q.iter().map(|x| -x).collect()))
        .take(m)
        .collect();
    while centers.len() < m {
        let best = (0..CENTER_CANDIDATES)
            .map(|_| random_unit(d, rng))
            .map(|c| {
                let gap = centers
                    .iter()
                    .map(|e| distance(&c, e))
                    .fold(f64::INFINITY, f64::min);
                (gap, c)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, c)| c)
            .expect("at least one candidate");
        centers.push(best);
    }
    centers
}

/// Draws `samples_per_class` Gaussian points around each class center and
/// splits them 60/20/20 into train/validation/test after a seeded shuffle.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = place_centers(spec.n_classes, spec.feature_dim, &mut rng);
    let noise = Normal::new(0.0, spec.spread)
        .map_err(|e| Error::Config(format!("spread: {e}")))?;

    let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let values = center.iter().map(|c| c + noise.sample(&mut rng)).collect();
            samples.push(LabeledSample {
                features: FeatureVector::new(values)?,
                label,
            });
        }
    }
    samples.shuffle(&mut rng);

    let n = samples.len();
    let n_train = (n as f64 * TRAIN_FRACTION).floor() as usize;
    let n_val = ((n as f64 * VALIDATION_FRACTION).floor() as usize).max(1);
    let test = samples.split_off(n_train + n_val);
    let validation = samples.split_off(n_train);
    SplitDataset::new(spec.n_classes, samples, validation, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodMode {
    /// Uniform draws from the box `[-2, 2]^d`.
    UniformBox,
    /// A Gaussian blob whose center lies at radius 4, hence at least 3 units
    /// from every class center on the unit sphere.
    ShiftedCluster,
}

impl fmt::Display for OodMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OodMode::UniformBox => f.write_str("uniform-box"),
            OodMode::ShiftedCluster => f.write_str("shifted-cluster"),
        }
    }
}

pub const UNIFORM_BOX_HALF_WIDTH: f64 = 2.0;
pub const SHIFTED_CLUSTER_RADIUS: f64 = 4.0;
pub const DEFAULT_SHIFTED_SPREAD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct OodPoolSpec {
    pub tag: String,
    pub feature_dim: usize,
    pub n: usize,
    pub mode: OodMode,
    /// Standard deviation of the shifted cluster; ignored for the uniform box.
    pub spread: f64,
    pub seed: u64,
}

/// Generates an OOD pool. `expected_dim` is the feature dimension of the
/// companion in-distribution dataset.
pub fn generate_ood_pool(spec: &OodPoolSpec, expected_dim: usize) -> Result<OodPool> {
    if spec.feature_dim != expected_dim {
        return Err(Error::Dimension {
            expected: expected_dim,
            found: spec.feature_dim,
        });
    }
    if spec.n == 0 {
        return Err(Error::Config(format!("OOD pool `{}` requests 0 samples", spec.tag)));
    }
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samples = match spec.mode {
        OodMode::UniformBox => (0..spec.n)
            .map(|_| {
                let v = (0..d)
                    .map(|_| rng.random_range(-UNIFORM_BOX_HALF_WIDTH..=UNIFORM_BOX_HALF_WIDTH))
                    .collect();
                FeatureVector::new(v)
            })
            .collect::<Result<Vec<_>>>()?,
        OodMode::ShiftedCluster => {
            if !(spec.spread > 0.0 && spec.spread.is_finite()) {
                return Err(Error::Config(format!(
                    "shifted-cluster spread must be positive, got {}",
                    spec.spread
                )));
            }
            let center: Vec<f64> = random_unit(d, &mut rng)
                .into_iter()
                .map(|x| x * SHIFTED_CLUSTER_RADIUS)
                .collect();
            let noise = Normal::new(0.0, spec.spread)
                .map_err(|e| Error::Config(format!("spread: {e}")))?;
            (0..spec.n)
                .map(|_| {
                    FeatureVector::new(center.iter().map(|c| c + noise.sample(&mut rng)).collect())
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    OodPool::new(spec.tag.clone(), samples)
}
