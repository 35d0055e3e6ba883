//! Gradient boosted regression trees (squared error, exact greedy splits).
//!
//! Defaults mirror the common "standard settings" of a stagewise least
//! squares booster: 100 depth-3 trees with shrinkage 0.1.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Kept for reproducibility records; the exact greedy fit without row
    /// subsampling draws no random numbers.
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_estimators: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_split: 2,
            min_samples_leaf: 1,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 {
            return Err(Error::Config("n_estimators must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config("learning_rate must lie in (0, 1]".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be >= 1".into()));
        }
        if self.min_samples_leaf == 0 || self.min_samples_split < 2 {
            return Err(Error::Config("min_samples_leaf >= 1 and min_samples_split >= 2 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

/// A regression tree; node 0 is the root. Samples with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbtModel {
    pub feature_names: Vec<String>,
    pub initial_prediction: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

/// Dense row-major design matrix view.
struct Design<'a> {
    x: &'a [f64],
    n_features: usize,
}

impl Design<'_> {
    #[inline]
    fn at(&self, row: usize, feature: usize) -> f64 {
        self.x[row * self.n_features + feature]
    }
}

#[derive(Clone, Copy)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn best_split_for_feature(
    design: &Design,
    residuals: &[f64],
    rows: &[usize],
    feature: usize,
    min_leaf: usize,
) -> Option<SplitCandidate> {
    let mut order: Vec<(f64, f64)> =
        rows.iter().map(|&i| (design.at(i, feature), residuals[i])).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = order.len();
    let total: f64 = order.iter().map(|p| p.1).sum();
    let parent = total * total / n as f64;
    let mut left_sum = 0.0;
    let mut best: Option<SplitCandidate> = None;
    for i in 0..n - 1 {
        left_sum += order[i].1;
        let (lo, hi) = (order[i].0, order[i + 1].0);
        if lo == hi {
            continue;
        }
        let n_left = i + 1;
        let n_right = n - n_left;
        if n_left < min_leaf || n_right < min_leaf {
            continue;
        }
        let right_sum = total - left_sum;
        let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64 - parent;
        if best.map_or(true, |b| gain > b.gain) {
            let mut threshold = lo + (hi - lo) / 2.0;
            if threshold >= hi {
                threshold = lo;
            }
            best = Some(SplitCandidate { gain, feature, threshold });
        }
    }
    best
}

fn grow(
    design: &Design,
    residuals: &[f64],
    rows: Vec<usize>,
    depth: usize,
    params: &GbtParams,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    let n = rows.len();
    let mean = rows.iter().map(|&i| residuals[i]).sum::<f64>() / n as f64;
    nodes.push(Node::Leaf { value: mean });
    if depth >= params.max_depth || n < params.min_samples_split || n < 2 * params.min_samples_leaf {
        return id;
    }
    let sse: f64 = rows.iter().map(|&i| (residuals[i] - mean).powi(2)).sum();
    if sse <= 1e-24 * n as f64 {
        return id;
    }
    let candidates: Vec<Option<SplitCandidate>> = (0..design.n_features)
        .into_par_iter()
        .map(|f| best_split_for_feature(design, residuals, &rows, f, params.min_samples_leaf))
        .collect();
    // lowest feature index wins ties: only strictly better gains replace
    let best = candidates.into_iter().flatten().fold(None::<SplitCandidate>, |acc, c| match acc {
        Some(a) if c.gain <= a.gain => Some(a),
        _ => Some(c),
    });
    let Some(best) = best.filter(|b| b.gain > 1e-12 * sse) else {
        return id;
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.into_iter().partition(|&i| design.at(i, best.feature) <= best.threshold);
    let left = grow(design, residuals, left_rows, depth + 1, params, nodes);
    let right = grow(design, residuals, right_rows, depth + 1, params, nodes);
    nodes[id] = Node::Split { feature: best.feature, threshold: best.threshold, left, right };
    id
}

/// Fits the booster and returns the per-stage in-sample MSE (index 0 is the
/// constant initial model).
pub fn fit_gbt_with_trace(table: &MetricTable, params: &GbtParams) -> Result<(GbtModel, Vec<f64>)> {
    params.validate()?;
    let targets = table
        .iou_targets
        .as_ref()
        .ok_or_else(|| Error::Data("metric table has no targets".into()))?;
    let n = table.n_rows();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 rows to fit, got {n}")));
    }
    let design = Design { x: table.values(), n_features: table.n_features() };
    let init = targets.iter().sum::<f64>() / n as f64;
    let mut pred = vec![init; n];
    let mse = |pred: &[f64]| {
        pred.iter().zip(targets).map(|(p, y)| (y - p) * (y - p)).sum::<f64>() / n as f64
    };
    let mut trace = vec![mse(&pred)];
    let mut trees = Vec::with_capacity(params.n_estimators);
    for _ in 0..params.n_estimators {
        let residuals: Vec<f64> = targets.iter().zip(&pred).map(|(y, p)| y - p).collect();
        let mut nodes = Vec::new();
        grow(&design, &residuals, (0..n).collect(), 0, params, &mut nodes);
        let tree = Tree { nodes };
        for (i, p) in pred.iter_mut().enumerate() {
            *p += params.learning_rate * tree.predict(table.row(i));
        }
        trace.push(mse(&pred));
        trees.push(tree);
    }
    let model = GbtModel {
        feature_names: table.feature_names.clone(),
        initial_prediction: init,
        learning_rate: params.learning_rate,
        trees,
    };
    Ok((model, trace))
}

pub fn fit_gbt(table: &MetricTable, params: &GbtParams) -> Result<GbtModel> {
    fit_gbt_with_trace(table, params).map(|(m, _)| m)
}

impl GbtModel {
    /// Unclipped boosted sum for one feature row.
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        self.initial_prediction
            + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("gbt v1\n");
        writeln!(out, "initial {}", self.initial_prediction).unwrap();
        writeln!(out, "learning_rate {}", self.learning_rate).unwrap();
        writeln!(out, "features {} {}", self.feature_names.len(), self.feature_names.join(" ")).unwrap();
        writeln!(out, "trees {}", self.trees.len()).unwrap();
        out.push_str("# tree node feature threshold leaf_value left right\n");
        for (t, tree) in self.trees.iter().enumerate() {
            for (i, node) in tree.nodes.iter().enumerate() {
                match *node {
                    Node::Split { feature, threshold, left, right } => {
                        writeln!(out, "{t} {i} {feature} {threshold} - {left} {right}").unwrap()
                    }
                    Node::Leaf { value } => writeln!(out, "{t} {i} - - {value} - -").unwrap(),
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("gbt model: {m}"));
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        if lines.next() != Some("gbt v1") {
            return Err(bad("unsupported version header"));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' ').or(Some("")))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected {key}")))
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let initial_prediction = num(&field("initial")?)?;
        let learning_rate = num(&field("learning_rate")?)?;
        let feats = field("features")?;
        let mut parts = feats.split(' ').filter(|s| !s.is_empty());
        let count: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("feature count"))?;
        let feature_names: Vec<String> = parts.map(str::to_string).collect();
        if feature_names.len() != count {
            return Err(bad("feature count mismatch"));
        }
        let n_trees: usize = field("trees")?.parse().map_err(|_| bad("tree count"))?;
        let mut trees = vec![Tree { nodes: Vec::new() }; n_trees];
        let idx = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad index {s:?}")));
        for line in lines {
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 7 {
                return Err(bad("node line needs 7 fields"));
            }
            let (t, i) = (idx(f[0])?, idx(f[1])?);
            let tree = trees.get_mut(t).ok_or_else(|| bad("tree id out of range"))?;
            if i != tree.nodes.len() {
                return Err(bad("node ids must be consecutive"));
            }
            let node = if f[2] == "-" {
                Node::Leaf { value: num(f[4])? }
            } else {
                Node::Split { feature: idx(f[2])?, threshold: num(f[3])?, left: idx(f[5])?, right: idx(f[6])? }
            };
            tree.nodes.push(node);
        }
        for tree in &trees {
            let n = tree.nodes.len();
            if n == 0 {
                return Err(bad("empty tree"));
            }
            for node in &tree.nodes {
                if let Node::Split { feature, left, right, .. } = *node {
                    if feature >= count || left >= n || right >= n {
                        return Err(bad("dangling reference"));
                    }
                }
            }
        }
        Ok(GbtModel { feature_names, initial_prediction, learning_rate, trees })
    }
}

/// Segment quality scores `s(k)`: the boosted prediction clipped into `[0, 1]`.
pub fn predict_quality(model: &GbtModel, table: &MetricTable) -> Result<Vec<f64>> {
    if model.feature_names != table.feature_names {
        return Err(Error::Schema("metric table features differ from the training features".into()));
    }
    Ok((0..table.n_rows()).map(|i| model.predict_raw(table.row(i)).clamp(0.0, 1.0)).collect())
}
