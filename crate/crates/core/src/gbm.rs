//! Gradient-boosted regression trees for binary classification under the
//! logistic loss.
//!
//! Each stage fits a least-squares regression tree to the pseudo-residuals
//! `y - sigmoid(F)`, then replaces every leaf value by one Newton step
//! `sum(r) / sum(p (1 - p))` over the leaf's members.

use std::path::Path;

use crate::error::{Error, Result};
use crate::persist::{self, LineReader};

pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_MAX_DEPTH: usize = 3;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
/// Lower bound on Newton-step denominators.
pub const HESSIAN_FLOOR: f64 = 1e-6;
/// Base rates are clamped to `[RATE_CLAMP, 1 - RATE_CLAMP]` before taking log-odds.
pub const RATE_CLAMP: f64 = 1e-6;
/// Gains closer than this are ties; the earlier candidate wins.
pub const GAIN_TIE_TOLERANCE: f64 = 1e-12;

const FORMAT_HEADER: &str = "oodkit-gradient-boosting";
const FORMAT_VERSION: u32 = 1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Best least-squares split of a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    /// Points with `x[feature] <= threshold` go left.
    pub threshold: f64,
    /// Reduction of the (weighted) residual variance.
    pub gain: f64,
}

/// Exhaustive CART split search over midpoints of consecutive distinct
/// feature values. Returns `None` when no split reduces the variance.
///
/// Features are scanned in the order given and thresholds in ascending order;
/// a later candidate replaces the incumbent only if its gain is larger by more
/// than [`GAIN_TIE_TOLERANCE`].
pub fn split_search(points: &[&[f64]], residuals: &[f64], features: &[usize]) -> Option<Split> {
    let weights = vec![1.0; points.len()];
    split_search_weighted(points, residuals, &weights, features)
}

pub(crate) fn split_search_weighted(
    points: &[&[f64]],
    residuals: &[f64],
    weights: &[f64],
    features: &[usize],
) -> Option<Split> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let total_w: f64 = weights.iter().sum();
    let total_wr: f64 = weights.iter().zip(residuals).map(|(w, r)| w * r).sum();
    let total_wrr: f64 = weights.iter().zip(residuals).map(|(w, r)| w * r * r).sum();
    let parent_sse = total_wrr - total_wr * total_wr / total_w;

    let mut best: Option<Split> = None;
    let mut order: Vec<usize> = (0..n).collect();
    for &feature in features {
        order.sort_by(|&a, &b| points[a][feature].total_cmp(&points[b][feature]));
        let (mut w, mut wr, mut wrr) = (0.0, 0.0, 0.0);
        for k in 0..n - 1 {
            let i = order[k];
            w += weights[i];
            wr += weights[i] * residuals[i];
            wrr += weights[i] * residuals[i] * residuals[i];
            let lo = points[i][feature];
            let hi = points[order[k + 1]][feature];
            if lo == hi {
                continue;
            }
            let (rw, rwr, rwrr) = (total_w - w, total_wr - wr, total_wrr - wrr);
            let left_sse = wrr - wr * wr / w;
            let right_sse = rwrr - rwr * rwr / rw;
            let gain = (parent_sse - left_sse - right_sse) / total_w;
            let mut threshold = lo + (hi - lo) / 2.0;
            if threshold >= hi {
                threshold = lo;
            }
            let better = match best {
                None => gain > GAIN_TIE_TOLERANCE,
                Some(b) => gain > b.gain + GAIN_TIE_TOLERANCE,
            };
            if better {
                best = Some(Split {
                    feature,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Regression tree stored in pre-order, root first.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct StageData<'a> {
    points: &'a [&'a [f64]],
    residuals: &'a [f64],
    hessians: &'a [f64],
    weights: &'a [f64],
    features: &'a [usize],
    max_depth: usize,
}

fn grow(nodes: &mut Vec<TreeNode>, data: &StageData<'_>, members: Vec<usize>, depth: usize) -> usize {
    let idx = nodes.len();
    let num: f64 = members.iter().map(|&i| data.weights[i] * data.residuals[i]).sum();
    let den: f64 = members.iter().map(|&i| data.weights[i] * data.hessians[i]).sum();
    nodes.push(TreeNode::Leaf {
        value: num / den.max(HESSIAN_FLOOR),
    });
    if depth >= data.max_depth || members.len() < 2 {
        return idx;
    }
    let pts: Vec<&[f64]> = members.iter().map(|&i| data.points[i]).collect();
    let res: Vec<f64> = members.iter().map(|&i| data.residuals[i]).collect();
    let wts: Vec<f64> = members.iter().map(|&i| data.weights[i]).collect();
    let Some(split) = split_search_weighted(&pts, &res, &wts, data.features) else {
        return idx;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = members
        .into_iter()
        .partition(|&i| data.points[i][split.feature] <= split.threshold);
    let left = grow(nodes, data, l, depth + 1);
    let right = grow(nodes, data, r, depth + 1);
    nodes[idx] = TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    idx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbmParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Reweight samples so both classes carry equal total weight.
    pub balance_classes: bool,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams {
            n_trees: DEFAULT_TREES,
            max_depth: DEFAULT_MAX_DEPTH,
            learning_rate: DEFAULT_LEARNING_RATE,
            balance_classes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostedClassifier {
    init_score: f64,
    learning_rate: f64,
    max_depth: usize,
    n_features: usize,
    trees: Vec<RegressionTree>,
}

impl BoostedClassifier {
    /// Fits the ensemble. `labels[i]` is `true` for the positive class
    /// (out-of-distribution). Both classes must be present.
    pub fn fit<P: AsRef<[f64]>>(points: &[P], labels: &[bool], params: &GbmParams) -> Result<Self> {
        if !labels.iter().any(|&y| y) || labels.iter().all(|&y| y) {
            return Err(Error::Fit("gradient boosting needs both classes present".into()));
        }
        Self::fit_unchecked(points, labels, params)
    }

    /// Like [`BoostedClassifier::fit`] but accepts single-class labels, relying
    /// on the base-rate clamp.
    pub(crate) fn fit_unchecked<P: AsRef<[f64]>>(
        points: &[P],
        labels: &[bool],
        params: &GbmParams,
    ) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::Fit(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if points.is_empty() {
            return Err(Error::Fit("no training points".into()));
        }
        if params.n_trees == 0 {
            return Err(Error::Fit("n_trees must be >= 1".into()));
        }
        if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
            return Err(Error::Fit(format!(
                "learning rate must be in (0, 1], got {}",
                params.learning_rate
            )));
        }
        let pts: Vec<&[f64]> = points.iter().map(|p| p.as_ref()).collect();
        let n_features = pts[0].len();
        for p in &pts {
            if p.len() != n_features {
                return Err(Error::Dimension {
                    expected: n_features,
                    found: p.len(),
                });
            }
            if p.iter().any(|v| v.is_nan()) {
                return Err(Error::Fit("NaN feature value".into()));
            }
        }

        let n = pts.len();
        let n_pos = labels.iter().filter(|&&y| y).count();
        let weights: Vec<f64> = if params.balance_classes && n_pos > 0 && n_pos < n {
            let (wp, wn) = (n as f64 / (2.0 * n_pos as f64), n as f64 / (2.0 * (n - n_pos) as f64));
            labels.iter().map(|&y| if y { wp } else { wn }).collect()
        } else {
            vec![1.0; n]
        };
        let targets: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
        let total_w: f64 = weights.iter().sum();
        let rate = weights.iter().zip(&targets).map(|(w, y)| w * y).sum::<f64>() / total_w;
        let rate = rate.clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
        let init_score = (rate / (1.0 - rate)).ln();

        let features: Vec<usize> = (0..n_features).collect();
        let mut raw = vec![init_score; n];
        let mut trees = Vec::with_capacity(params.n_trees);
        for _ in 0..params.n_trees {
            let probs: Vec<f64> = raw.iter().map(|&f| sigmoid(f)).collect();
            let residuals: Vec<f64> = targets.iter().zip(&probs).map(|(y, p)| y - p).collect();
            let hessians: Vec<f64> = probs.iter().map(|p| p * (1.0 - p)).collect();
            let stage = StageData {
                points: &pts,
                residuals: &residuals,
                hessians: &hessians,
                weights: &weights,
                features: &features,
                max_depth: params.max_depth,
            };
            let mut nodes = Vec::new();
            grow(&mut nodes, &stage, (0..n).collect(), 0);
            let tree = RegressionTree { nodes };
            for (f, p) in raw.iter_mut().zip(&pts) {
                *f += params.learning_rate * tree.predict(p);
            }
            trees.push(tree);
        }
        Ok(BoostedClassifier {
            init_score,
            learning_rate: params.learning_rate,
            max_depth: params.max_depth,
            n_features,
            trees,
        })
    }

    pub fn init_score(&self) -> f64 {
        self.init_score
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::Dimension {
                expected: self.n_features,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn raw_after(&self, x: &[f64], stages: usize) -> f64 {
        self.trees[..stages]
            .iter()
            .fold(self.init_score, |f, t| f + self.learning_rate * t.predict(x))
    }

    /// `F0 + lr * sum(tree(x))`.
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.raw_after(x, self.trees.len()))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.predict_raw(x)?))
    }

    /// Mean logistic loss after each stage, starting with the constant model.
    pub fn staged_log_loss<P: AsRef<[f64]>>(&self, points: &[P], labels: &[bool]) -> Result<Vec<f64>> {
        for p in points {
            self.check(p.as_ref())?;
        }
        Ok((0..=self.trees.len())
            .map(|m| {
                points
                    .iter()
                    .zip(labels)
                    .map(|(p, &y)| log_loss(self.raw_after(p.as_ref(), m), y))
                    .sum::<f64>()
                    / points.len() as f64
            })
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        persist::push_line(&mut out, FORMAT_HEADER, [format!("v{FORMAT_VERSION}")]);
        persist::push_floats(&mut out, "init_score", &[self.init_score]);
        persist::push_floats(&mut out, "learning_rate", &[self.learning_rate]);
        persist::push_line(&mut out, "max_depth", [self.max_depth]);
        persist::push_line(&mut out, "features", [self.n_features]);
        persist::push_line(&mut out, "trees", [self.trees.len()]);
        for tree in &self.trees {
            persist::push_line(&mut out, "tree", [tree.nodes.len()]);
            for node in &tree.nodes {
                match node {
                    TreeNode::Leaf { value } => persist::push_floats(&mut out, "leaf", &[*value]),
                    TreeNode::Split {
                        feature, threshold, ..
                    } => persist::push_line(
                        &mut out,
                        "split",
                        [feature.to_string(), persist::fmt_f64(*threshold)],
                    ),
                }
            }
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        Self::read(&mut LineReader::new(text, source))
    }

    pub(crate) fn read(r: &mut LineReader<'_>) -> Result<Self> {
        let version = r.expect(FORMAT_HEADER)?;
        if version != [format!("v{FORMAT_VERSION}").as_str()] {
            return Err(r.error(format!("unsupported version {version:?}")));
        }
        let init_score = r.expect_floats("init_score", 1)?[0];
        let learning_rate = r.expect_floats("learning_rate", 1)?[0];
        let max_depth: usize = r.expect_one("max_depth")?;
        let n_features: usize = r.expect_one("features")?;
        let n_trees: usize = r.expect_one("trees")?;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let count: usize = r.expect_one("tree")?;
            let mut nodes = Vec::with_capacity(count);
            read_node(r, &mut nodes, n_features)?;
            if nodes.len() != count {
                return Err(r.error(format!("tree declares {count} nodes, read {}", nodes.len())));
            }
            trees.push(RegressionTree { nodes });
        }
        Ok(BoostedClassifier {
            init_score,
            learning_rate,
            max_depth,
            n_features,
            trees,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_file(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&persist::read_file(path)?, &path.display().to_string())
    }
}

fn read_node(r: &mut LineReader<'_>, nodes: &mut Vec<TreeNode>, n_features: usize) -> Result<usize> {
    let idx = nodes.len();
    let (key, rest) = r.next_record()?;
    match (key, rest.as_slice()) {
        ("leaf", [value]) => {
            let value: f64 = r.parse(value)?;
            if !value.is_finite() {
                return Err(r.error("non-finite leaf value"));
            }
            nodes.push(TreeNode::Leaf { value });
        }
        ("split", [feature, threshold]) => {
            let feature: usize = r.parse(feature)?;
            let threshold: f64 = r.parse(threshold)?;
            if feature >= n_features {
                return Err(r.error(format!("split feature {feature} out of range")));
            }
            nodes.push(TreeNode::Leaf { value: 0.0 });
            let left = read_node(r, nodes, n_features)?;
            let right = read_node(r, nodes, n_features)?;
            nodes[idx] = TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            };
        }
        _ => return Err(r.error(format!("malformed tree node `{key}`"))),
    }
    Ok(idx)
}

/// Logistic loss of raw score `f` for label `y`, computed stably.
pub fn log_loss(f: f64, y: bool) -> f64 {
    // -ln sigmoid(z) = softplus(-z)
    let z = if y { f } else { -f };
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}
