//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use oodkit::data::FeatureVector;
use oodkit::iforest::SplitChooser;
use oodkit::nn::SoftmaxClassifier;

/// Pairwise AUROC: wins plus half the ties over all in/out pairs.
pub fn brute_auroc(ins: &[f64], outs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &a in ins {
        for &b in outs {
            if a > b {
                acc += 1.0;
            } else if a == b {
                acc += 0.5;
            }
        }
    }
    acc / (ins.len() * outs.len()) as f64
}

pub fn reference_c(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + 0.5772156649) - 2.0 * (n - 1.0) / n
        }
    }
}

/// Records every choice an inner chooser makes.
pub struct Recording<C> {
    pub inner: C,
    pub features: Vec<usize>,
    pub thresholds: Vec<f64>,
}

impl<C: SplitChooser> SplitChooser for Recording<C> {
    fn feature(&mut self, n: usize) -> usize {
        let f = self.inner.feature(n);
        self.features.push(f);
        f
    }

    fn threshold(&mut self, lo: f64, hi: f64) -> f64 {
        let t = self.inner.threshold(lo, hi);
        self.thresholds.push(t);
        t
    }
}

/// Replays a recorded transcript in order.
pub struct Replay {
    pub features: std::vec::IntoIter<usize>,
    pub thresholds: std::vec::IntoIter<f64>,
}

impl SplitChooser for Replay {
    fn feature(&mut self, _: usize) -> usize {
        self.features.next().expect("transcript exhausted")
    }

    fn threshold(&mut self, _: f64, _: f64) -> f64 {
        self.thresholds.next().expect("transcript exhausted")
    }
}

pub enum RefTree {
    Leaf(usize),
    Split(f64, Box<RefTree>, Box<RefTree>),
}

/// Recursive isolation tree over 1-D distinct points, consuming thresholds
/// in pre-order.
pub fn reference_tree(points: &[f64], depth: usize, limit: usize, thresholds: &mut impl Iterator<Item = f64>) -> RefTree {
    if points.len() <= 1 || depth >= limit {
        return RefTree::Leaf(points.len());
    }
    let t = thresholds.next().expect("transcript exhausted");
    let left: Vec<f64> = points.iter().copied().filter(|&p| p < t).collect();
    let right: Vec<f64> = points.iter().copied().filter(|&p| p >= t).collect();
    let l = reference_tree(&left, depth + 1, limit, thresholds);
    let r = reference_tree(&right, depth + 1, limit, thresholds);
    RefTree::Split(t, Box::new(l), Box::new(r))
}

pub fn reference_path(tree: &RefTree, x: f64) -> f64 {
    match tree {
        RefTree::Leaf(n) => reference_c(*n),
        RefTree::Split(t, l, r) => 1.0 + reference_path(if x < *t { l } else { r }, x),
    }
}

/// Exhaustive optimal least-squares stump over one feature: returns the
/// threshold (midpoint) with the member indices of each side, or `None` when
/// no split has a gain above 1e-12. Ties within 1e-12 go to the lowest threshold.
pub fn brute_stump(xs: &[f64], residuals: &[f64]) -> Option<(f64, Vec<usize>, Vec<usize>)> {
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let sse = |idx: &[usize]| {
        if idx.is_empty() {
            return 0.0;
        }
        let mean = idx.iter().map(|&i| residuals[i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&i| (residuals[i] - mean).powi(2)).sum::<f64>()
    };
    let all: Vec<usize> = (0..xs.len()).collect();
    let total = sse(&all);
    let mut candidates = Vec::new();
    for w in distinct.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let left: Vec<usize> = all.iter().copied().filter(|&i| xs[i] <= t).collect();
        let right: Vec<usize> = all.iter().copied().filter(|&i| xs[i] > t).collect();
        let gain = (total - sse(&left) - sse(&right)) / xs.len() as f64;
        candidates.push((gain, t, left, right));
    }
    let best = candidates.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    if best <= 1e-12 {
        return None;
    }
    candidates
        .into_iter()
        .find(|c| c.0 >= best - 1e-12)
        .map(|(_, t, l, r)| (t, l, r))
}

pub const FD_STEP: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Central differences of the cross-entropy to `target` with respect to every parameter.
pub fn fd_param_gradient(model: &SoftmaxClassifier, x: &FeatureVector, target: &[f64]) -> Vec<f64> {
    let loss = |m: &SoftmaxClassifier| {
        let p = m.forward(x, 1.0).unwrap();
        -target
            .iter()
            .zip(p.as_slice())
            .map(|(q, pk)| q * pk.ln())
            .sum::<f64>()
    };
    let mut probe = model.clone();
    (0..model.params().len())
        .map(|i| {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.params_mut()[i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.params_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Central differences of `ln p_class` with respect to the input.
pub fn fd_input_gradient(model: &SoftmaxClassifier, x: &FeatureVector, class: usize) -> Vec<f64> {
    let f = |v: Vec<f64>| model.forward(&FeatureVector::new(v).unwrap(), 1.0).unwrap().as_slice()[class].ln();
    (0..x.dim())
        .map(|i| {
            let mut up = x.as_slice().to_vec();
            let mut down = up.clone();
            up[i] += FD_STEP;
            down[i] -= FD_STEP;
            (f(up) - f(down)) / (2.0 * FD_STEP)
        })
        .collect()
}
