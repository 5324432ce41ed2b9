//! Evaluation metrics: OOD error, AUROC and FPR at a fixed TPR.
//!
//! Scores are oriented so that larger means "more in-distribution"; the
//! in-distribution class is the positive class for TPR.

use std::fmt;

use crate::detectors::{Detector, DetectorInput};
use crate::error::{Error, Result};

pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    InDistribution,
    OutOfDistribution,
}

impl Verdict {
    pub fn is_ood(self) -> bool {
        self == Verdict::OutOfDistribution
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::InDistribution => "in-distribution",
            Verdict::OutOfDistribution => "out-of-distribution",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorePair {
    in_scores: Vec<f64>,
    out_scores: Vec<f64>,
}

impl ScorePair {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>) -> Result<Self> {
        if in_scores.is_empty() || out_scores.is_empty() {
            return Err(Error::Config("score pair needs both sides non-empty".into()));
        }
        if in_scores.iter().chain(&out_scores).any(|s| !s.is_finite()) {
            return Err(Error::Config("scores must be finite".into()));
        }
        Ok(ScorePair {
            in_scores,
            out_scores,
        })
    }

    pub fn in_scores(&self) -> &[f64] {
        &self.in_scores
    }

    pub fn out_scores(&self) -> &[f64] {
        &self.out_scores
    }

    /// Swaps the roles of the two sides.
    pub fn swapped(&self) -> ScorePair {
        ScorePair {
            in_scores: self.out_scores.clone(),
            out_scores: self.in_scores.clone(),
        }
    }

    /// Negates every score, reversing the orientation.
    pub fn negated(&self) -> ScorePair {
        ScorePair {
            in_scores: self.in_scores.iter().map(|s| -s).collect(),
            out_scores: self.out_scores.iter().map(|s| -s).collect(),
        }
    }
}

/// `P(in > out) + P(in = out) / 2` via the rank-sum statistic with midranks.
pub fn auroc(sp: &ScorePair) -> f64 {
    let n_in = sp.in_scores.len();
    let n_out = sp.out_scores.len();
    let mut all: Vec<(f64, bool)> = sp
        .in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(sp.out_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Ranks are 1-based; a tie group occupying positions i..j gets (i + 1 + j) / 2.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let in_count = all[i..j].iter().filter(|e| e.1).count();
        rank_sum += midrank * in_count as f64;
        i = j;
    }
    let u = rank_sum - (n_in * (n_in + 1)) as f64 / 2.0;
    u / (n_in as f64 * n_out as f64)
}

/// Largest observed in-distribution score `tau` with
/// `#{in >= tau} / n_in >= tpr_level`.
pub fn threshold_at_tpr(in_scores: &[f64], tpr_level: f64) -> Result<f64> {
    if in_scores.is_empty() {
        return Err(Error::Config("no in-distribution scores".into()));
    }
    if !(tpr_level > 0.0 && tpr_level <= 1.0) {
        return Err(Error::Config(format!("TPR level must be in (0, 1], got {tpr_level}")));
    }
    let mut sorted = in_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    let mut k = 0;
    while k < sorted.len() {
        let tau = sorted[k];
        while k < sorted.len() && sorted[k] == tau {
            k += 1;
        }
        if k as f64 / n >= tpr_level {
            return Ok(tau);
        }
    }
    Ok(sorted[sorted.len() - 1])
}

/// Fraction of OOD scores `>= tau` at the TPR threshold.
pub fn fpr_at_tpr(sp: &ScorePair, tpr_level: f64) -> Result<f64> {
    let tau = threshold_at_tpr(&sp.in_scores, tpr_level)?;
    let accepted = sp.out_scores.iter().filter(|&&s| s >= tau).count();
    Ok(accepted as f64 / sp.out_scores.len() as f64)
}

/// Misclassification rate of the binary in/out decision over the joint set.
pub fn ood_error(in_verdicts: &[Verdict], out_verdicts: &[Verdict]) -> Result<f64> {
    if in_verdicts.is_empty() || out_verdicts.is_empty() {
        return Err(Error::Config("OOD error needs both sides non-empty".into()));
    }
    let wrong_in = in_verdicts.iter().filter(|v| v.is_ood()).count();
    let wrong_out = out_verdicts.iter().filter(|v| !v.is_ood()).count();
    Ok((wrong_in + wrong_out) as f64 / (in_verdicts.len() + out_verdicts.len()) as f64)
}

/// Verdicts induced by the TPR threshold: scores below `tau` are OOD.
pub fn verdicts_at_threshold(scores: &[f64], tau: f64) -> Vec<Verdict> {
    scores
        .iter()
        .map(|&s| {
            if s < tau {
                Verdict::OutOfDistribution
            } else {
                Verdict::InDistribution
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub detector: String,
    pub ood_set: String,
    pub ood_error: f64,
    pub auroc: f64,
    pub fpr_at_95_tpr: f64,
}

impl MetricsRow {
    /// Metrics from oriented scores plus the detector's own verdicts.
    pub fn from_parts(
        detector: impl Into<String>,
        ood_set: impl Into<String>,
        scores: &ScorePair,
        in_verdicts: &[Verdict],
        out_verdicts: &[Verdict],
    ) -> Result<Self> {
        Ok(MetricsRow {
            detector: detector.into(),
            ood_set: ood_set.into(),
            ood_error: ood_error(in_verdicts, out_verdicts)?,
            auroc: auroc(scores),
            fpr_at_95_tpr: fpr_at_tpr(scores, DEFAULT_TPR)?,
        })
    }
}

/// Arithmetic mean of each metric across `rows`.
pub fn macro_average(
    rows: &[MetricsRow],
    detector: impl Into<String>,
    ood_set: impl Into<String>,
) -> Result<MetricsRow> {
    if rows.is_empty() {
        return Err(Error::Config("cannot average zero rows".into()));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(MetricsRow {
        detector: detector.into(),
        ood_set: ood_set.into(),
        ood_error: mean(|r| r.ood_error),
        auroc: mean(|r| r.auroc),
        fpr_at_95_tpr: mean(|r| r.fpr_at_95_tpr),
    })
}

/// Scores both sides with `detector`, orients them (larger = in) and reports
/// all three metrics. Verdicts come from the detector's own decision rule.
pub fn evaluate_detector(
    detector: &Detector,
    detector_name: &str,
    ood_set: &str,
    in_inputs: &[DetectorInput<'_>],
    out_inputs: &[DetectorInput<'_>],
) -> Result<MetricsRow> {
    let decide_all = |inputs: &[DetectorInput<'_>]| -> Result<(Vec<f64>, Vec<Verdict>)> {
        let mut scores = Vec::with_capacity(inputs.len());
        let mut verdicts = Vec::with_capacity(inputs.len());
        for input in inputs {
            let d = detector.decide(input)?;
            scores.push(detector.orientation().oriented(d.score));
            verdicts.push(d.verdict);
        }
        Ok((scores, verdicts))
    };
    let (in_scores, in_verdicts) = decide_all(in_inputs)?;
    let (out_scores, out_verdicts) = decide_all(out_inputs)?;
    let pair = ScorePair::new(in_scores, out_scores)?;
    MetricsRow::from_parts(detector_name, ood_set, &pair, &in_verdicts, &out_verdicts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &[f64], b: &[f64]) -> ScorePair {
        ScorePair::new(a.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&pair(&[0.9, 0.8], &[0.1, 0.2])), 1.0);
        assert_eq!(auroc(&pair(&[0.5], &[0.5])), 0.5);
        assert_eq!(auroc(&pair(&[0.9, 0.4], &[0.6, 0.1])), 0.75);
    }

    #[test]
    fn fpr_examples() {
        let mut inn = vec![0.5; 19];
        inn.push(0.1);
        let sp = pair(&inn, &[0.3, 0.6, 0.4]);
        assert_eq!(threshold_at_tpr(&inn, 0.95).unwrap(), 0.5);
        assert_eq!(fpr_at_tpr(&sp, 0.95).unwrap(), 1.0 / 3.0);

        let sp = pair(&[0.5, 0.7, 0.9], &[0.1, 0.2, 0.4]);
        for tpr in [0.1, 0.5, 0.95, 1.0] {
            assert_eq!(fpr_at_tpr(&sp, tpr).unwrap(), 0.0);
        }

        let same = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert!(fpr_at_tpr(&pair(&same, &same), 0.95).unwrap() >= 0.95);
        assert!(fpr_at_tpr(&sp, 0.0).is_err());
    }

    #[test]
    fn ood_error_examples() {
        use Verdict::*;
        assert_eq!(ood_error(&[InDistribution; 3], &[OutOfDistribution; 4]).unwrap(), 0.0);
        assert_eq!(ood_error(&[InDistribution; 5], &[InDistribution; 5]).unwrap(), 0.5);
        assert!(ood_error(&[], &[InDistribution]).is_err());
    }

    #[test]
    fn averaging_rows() {
        let row = |e, a, f| MetricsRow {
            detector: "d".into(),
            ood_set: "s".into(),
            ood_error: e,
            auroc: a,
            fpr_at_95_tpr: f,
        };
        let avg = macro_average(&[row(0.2, 0.9, 0.3), row(0.4, 0.7, 0.5)], "d", "mean").unwrap();
        assert!((avg.ood_error - 0.3).abs() < 1e-15);
        assert!((avg.auroc - 0.8).abs() < 1e-15);
        assert!((avg.fpr_at_95_tpr - 0.4).abs() < 1e-15);
    }

    #[test]
    fn invalid_pairs() {
        assert!(ScorePair::new(vec![], vec![1.0]).is_err());
        assert!(ScorePair::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn monotone_transform_invariance(
            a in proptest::collection::vec(-5.0f64..5.0, 1..30),
            b in proptest::collection::vec(-5.0f64..5.0, 1..30),
            tpr in 0.05f64..1.0,
        ) {
            let sp = pair(&a, &b);
            let f = |x: f64| (x * 0.7).exp() + 3.0;
            let tp = ScorePair::new(a.iter().map(|&x| f(x)).collect(), b.iter().map(|&x| f(x)).collect()).unwrap();
            proptest::prop_assert_eq!(auroc(&sp), auroc(&tp));
            proptest::prop_assert_eq!(fpr_at_tpr(&sp, tpr).unwrap(), fpr_at_tpr(&tp, tpr).unwrap());
        }

        #[test]
        fn fpr_non_increasing_as_tpr_drops(
            a in proptest::collection::vec(0u8..20, 1..30),
            b in proptest::collection::vec(0u8..20, 1..30),
        ) {
            let sp = pair(&a.iter().map(|&x| x as f64).collect::<Vec<_>>(), &b.iter().map(|&x| x as f64).collect::<Vec<_>>());
            let levels = [1.0, 0.95, 0.8, 0.5, 0.2, 0.01];
            let fprs: Vec<f64> = levels.iter().map(|&t| fpr_at_tpr(&sp, t).unwrap()).collect();
            for w in fprs.windows(2) {
                proptest::prop_assert!(w[1] <= w[0]);
            }
        }

        #[test]
        fn swapping_sides_complements_auroc(
            a in proptest::collection::hash_set(-1000i32..1000, 1..30),
            b in proptest::collection::hash_set(1000i32..3000, 1..30),
            shift in -2000i32..2000,
        ) {
            // Disjoint integer sets shifted by a common offset stay tie-free.
            let a: Vec<f64> = a.into_iter().map(|x| x as f64).collect();
            let b: Vec<f64> = b.into_iter().map(|x| (x + shift) as f64 + 0.5).collect();
            let sp = pair(&a, &b);
            proptest::prop_assert!((auroc(&sp) + auroc(&sp.swapped()) - 1.0).abs() < 1e-12);
        }
    }
}
