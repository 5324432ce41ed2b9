//! Isolation Forest built from random axis-aligned splits.
//!
//! A point's anomaly score is `2^(-E[h(x)] / c(psi))`, where `h` is the path
//! length in one tree, `psi` the per-tree subsample size and `c` the average
//! path length of an unsuccessful binary-search-tree lookup.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::persist::{self, LineReader};

pub const EULER_GAMMA: f64 = 0.5772156649;
pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_MAX_SAMPLES: usize = 256;
/// Points scoring above this are declared anomalous.
pub const DECISION_THRESHOLD: f64 = 0.5;

const FORMAT_HEADER: &str = "oodkit-isolation-forest";
const FORMAT_VERSION: u32 = 1;
/// Redraws allowed when a threshold draw lands exactly on the lower bound.
const THRESHOLD_REDRAWS: usize = 8;

/// Average path length of an unsuccessful search in a binary search tree of
/// `n` points, with `c(0) = c(1) = 0` and `c(2) = 1`.
pub fn expected_path_c(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

/// Converts a mean path length into an anomaly score in `(0, 1]`.
pub fn score_from_path_length(mean_path: f64, sample_size: usize) -> f64 {
    2f64.powf(-mean_path / expected_path_c(sample_size))
}

/// Source of the random choices made while growing a tree.
pub trait SplitChooser {
    /// A feature index in `0..n_features`.
    fn feature(&mut self, n_features: usize) -> usize;
    /// A split value with `lo < value <= hi`.
    fn threshold(&mut self, lo: f64, hi: f64) -> f64;
}

pub struct RngChooser<R>(pub R);

impl<R: RngCore> SplitChooser for RngChooser<R> {
    fn feature(&mut self, n_features: usize) -> usize {
        self.0.random_range(0..n_features)
    }

    fn threshold(&mut self, lo: f64, hi: f64) -> f64 {
        for _ in 0..THRESHOLD_REDRAWS {
            let t = self.0.random_range(lo..hi);
            if t > lo {
                return t;
            }
        }
        hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

/// Nodes are stored in pre-order; the root is `nodes[0]`. Points with
/// `x[feature] < threshold` go left.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree {
    nodes: Vec<Node>,
    height_limit: usize,
}

fn all_identical(points: &[&[f64]]) -> bool {
    points.windows(2).all(|w| w[0] == w[1])
}

impl IsolationTree {
    pub fn build(points: &[&[f64]], height_limit: usize, chooser: &mut impl SplitChooser) -> Self {
        let mut nodes = Vec::new();
        grow(&mut nodes, points.to_vec(), 0, height_limit, chooser);
        IsolationTree {
            nodes,
            height_limit,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn height_limit(&self) -> usize {
        self.height_limit
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Edges from the root to the leaf reached by `x`, plus `c(leaf size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        let mut edges = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { size } => return edges as f64 + expected_path_c(size),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature] < threshold { left } else { right };
                    edges += 1;
                }
            }
        }
    }
}

fn grow(
    nodes: &mut Vec<Node>,
    points: Vec<&[f64]>,
    depth: usize,
    height_limit: usize,
    chooser: &mut impl SplitChooser,
) -> usize {
    let idx = nodes.len();
    nodes.push(Node::Leaf { size: points.len() });
    if points.len() <= 1 || depth >= height_limit || all_identical(&points) {
        return idx;
    }
    let n_features = points[0].len();
    for _ in 0..n_features {
        let feature = chooser.feature(n_features);
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[feature]), hi.max(p[feature]))
        });
        if hi > lo {
            let threshold = chooser.threshold(lo, hi);
            let (l, r): (Vec<&[f64]>, Vec<&[f64]>) =
                points.into_iter().partition(|p| p[feature] < threshold);
            let left = grow(nodes, l, depth + 1, height_limit, chooser);
            let right = grow(nodes, r, depth + 1, height_limit, chooser);
            nodes[idx] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
            return idx;
        }
    }
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Subsample size per tree; `None` means `min(256, n)`.
    pub sample_size: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: DEFAULT_TREES,
            sample_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    sample_size: usize,
    n_features: usize,
    seed: u64,
}

impl IsolationForest {
    /// Builds each tree on an independent subsample drawn without replacement.
    /// Tree `i` uses its own RNG seeded from the `i`-th draw of the forest seed.
    pub fn fit<P: AsRef<[f64]>>(data: &[P], params: &ForestParams) -> Result<Self> {
        let n = data.len();
        if n < 2 {
            return Err(Error::Fit(format!("isolation forest needs at least 2 points, got {n}")));
        }
        if params.n_trees == 0 {
            return Err(Error::Fit("isolation forest needs at least one tree".into()));
        }
        let n_features = data[0].as_ref().len();
        if n_features == 0 {
            return Err(Error::Fit("points have no features".into()));
        }
        for p in data {
            let p = p.as_ref();
            if p.len() != n_features {
                return Err(Error::Dimension {
                    expected: n_features,
                    found: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Fit("non-finite feature value".into()));
            }
        }
        let sample_size = params.sample_size.unwrap_or(DEFAULT_MAX_SAMPLES.min(n));
        if sample_size < 2 || sample_size > n {
            return Err(Error::Fit(format!(
                "sample size must be in [2, {n}], got {sample_size}"
            )));
        }
        let height_limit = (sample_size as f64).log2().ceil() as usize;

        let mut master = ChaCha8Rng::seed_from_u64(params.seed);
        let tree_seeds: Vec<u64> = (0..params.n_trees).map(|_| master.next_u64()).collect();
        let trees = tree_seeds
            .into_iter()
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let subsample: Vec<&[f64]> = rand::seq::index::sample(&mut rng, n, sample_size)
                    .into_iter()
                    .map(|i| data[i].as_ref())
                    .collect();
                IsolationTree::build(&subsample, height_limit, &mut RngChooser(rng))
            })
            .collect();
        Ok(IsolationForest {
            trees,
            sample_size,
            n_features,
            seed: params.seed,
        })
    }

    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn seed(&self) -> u64 {
        self.seed
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

    pub fn mean_path_length(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let total: f64 = self.trees.iter().map(|t| t.path_length(x)).sum();
        Ok(total / self.trees.len() as f64)
    }

    pub fn anomaly_score(&self, x: &[f64]) -> Result<f64> {
        Ok(score_from_path_length(self.mean_path_length(x)?, self.sample_size))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        persist::push_line(&mut out, FORMAT_HEADER, [format!("v{FORMAT_VERSION}")]);
        persist::push_line(&mut out, "trees", [self.trees.len()]);
        persist::push_line(&mut out, "sample_size", [self.sample_size]);
        persist::push_line(&mut out, "features", [self.n_features]);
        persist::push_line(&mut out, "seed", [self.seed]);
        for tree in &self.trees {
            persist::push_line(&mut out, "tree", [tree.nodes.len(), tree.height_limit]);
            for node in &tree.nodes {
                match node {
                    Node::Leaf { size } => persist::push_line(&mut out, "leaf", [size]),
                    Node::Split {
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
        let n_trees: usize = r.expect_one("trees")?;
        let sample_size: usize = r.expect_one("sample_size")?;
        let n_features: usize = r.expect_one("features")?;
        let seed: u64 = r.expect_one("seed")?;
        if n_trees == 0 || sample_size < 2 || n_features == 0 {
            return Err(r.error("invalid forest header"));
        }
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let header = r.expect("tree")?;
            if header.len() != 2 {
                return Err(r.error("`tree` needs node count and height limit"));
            }
            let count: usize = r.parse(header[0])?;
            let height_limit: usize = r.parse(header[1])?;
            let mut nodes = Vec::with_capacity(count);
            read_node(r, &mut nodes, n_features)?;
            if nodes.len() != count {
                return Err(r.error(format!("tree declares {count} nodes, read {}", nodes.len())));
            }
            trees.push(IsolationTree {
                nodes,
                height_limit,
            });
        }
        Ok(IsolationForest {
            trees,
            sample_size,
            n_features,
            seed,
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

fn read_node(r: &mut LineReader<'_>, nodes: &mut Vec<Node>, n_features: usize) -> Result<usize> {
    let idx = nodes.len();
    let (key, rest) = r.next_record()?;
    match key {
        "leaf" => {
            if rest.len() != 1 {
                return Err(r.error("`leaf` takes one size"));
            }
            nodes.push(Node::Leaf {
                size: r.parse(rest[0])?,
            });
        }
        "split" => {
            if rest.len() != 2 {
                return Err(r.error("`split` takes feature and threshold"));
            }
            let feature: usize = r.parse(rest[0])?;
            let threshold: f64 = r.parse(rest[1])?;
            if feature >= n_features || !threshold.is_finite() {
                return Err(r.error("invalid split"));
            }
            nodes.push(Node::Leaf { size: 0 });
            let left = read_node(r, nodes, n_features)?;
            let right = read_node(r, nodes, n_features)?;
            nodes[idx] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
        }
        other => return Err(r.error(format!("expected `leaf` or `split`, found `{other}`"))),
    }
    Ok(idx)
}
