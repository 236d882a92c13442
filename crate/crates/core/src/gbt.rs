//! Second-order gradient boosting with a softmax objective.
//!
//! Each round fits one regression tree per class to the gradient and hessian
//! of the multiclass log-loss at the current logits, then adds `η · tree` to
//! that class's logit. Splits are exact: every midpoint between consecutive
//! distinct feature values is scored with
//! `½[G_L²/(H_L+λ) + G_R²/(H_R+λ) − G²/(H+λ)] − γ`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureTable, N_CLASSES};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    /// Initial logits per class; `None` means all zero (uniform).
    pub base_score: Option<Vec<f64>>,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            n_rounds: 100,
            max_depth: 6,
            learning_rate: 0.3,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            base_score: None,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("gbt config: {m}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 0");
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return bad("min_child_weight must be finite and >= 0");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if let Some(b) = &self.base_score {
            if b.len() != N_CLASSES || b.iter().any(|v| !v.is_finite()) {
                return bad("base_score needs one finite value per class");
            }
        }
        Ok(())
    }

    fn split_params(&self) -> SplitParams {
        SplitParams {
            lambda: self.lambda,
            gamma: self.gamma,
            min_child_weight: self.min_child_weight,
        }
    }
}

/// Regularization applied while scoring candidate splits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams {
    pub lambda: f64,
    pub gamma: f64,
    /// Minimum hessian sum on each side of a split.
    pub min_child_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    /// Rows with `x < threshold` go left.
    pub threshold: f64,
    pub gain: f64,
}

/// Gains closer than this are treated as equal, so the lower feature index
/// (then the lower threshold) wins regardless of summation order.
pub const GAIN_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

/// Nodes stored in preorder; the root is node 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { weight } => return weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[feature] < threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &RegressionTree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        if self.nodes.is_empty() {
            0
        } else {
            go(self, 0)
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    pub config: GbtConfig,
    pub n_features: usize,
    pub n_classes: usize,
    pub base_score: Vec<f64>,
    /// `rounds[r][c]` is the tree for class `c` fitted in round `r`.
    pub rounds: Vec<Vec<RegressionTree>>,
    /// Mean training log-loss before the first round and after each round.
    pub train_logloss: Vec<f64>,
}

impl BoostedEnsemble {
    pub fn n_trees(&self) -> usize {
        self.rounds.iter().map(Vec::len).sum()
    }

    pub fn logits_row(&self, row: &[f64]) -> Vec<f64> {
        let mut z = self.base_score.clone();
        let eta = self.config.learning_rate;
        for round in &self.rounds {
            for (c, tree) in round.iter().enumerate() {
                z[c] += eta * tree.predict_row(row);
            }
        }
        z
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = EnsembleFile {
            format: ENSEMBLE_FORMAT.into(),
            version: ENSEMBLE_VERSION,
            ensemble: self.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: EnsembleFile = serde_json::from_str(&text)?;
        if doc.format != ENSEMBLE_FORMAT || doc.version != ENSEMBLE_VERSION {
            return Err(Error::invalid(format!(
                "unsupported ensemble file ({} v{})",
                doc.format, doc.version
            )));
        }
        Ok(doc.ensemble)
    }
}

const ENSEMBLE_FORMAT: &str = "meaflow-gbt";
const ENSEMBLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EnsembleFile {
    format: String,
    version: u32,
    ensemble: BoostedEnsemble,
}

/// Row-wise softmax of `rows × k` logits.
pub fn softmax(logits: &[f64], k: usize) -> Vec<f64> {
    let mut p = logits.to_vec();
    for row in p.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

/// `g = p − onehot(y)`, `h = p(1 − p)`, both `rows × k` row-major.
pub fn softmax_grad_hess(
    logits: &[f64],
    labels: &[usize],
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if logits.len() != labels.len() * k {
        return Err(Error::DimensionMismatch {
            expected: labels.len() * k,
            actual: logits.len(),
        });
    }
    let p = softmax(logits, k);
    let mut g = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} outside 0..{k}")));
        }
        g[i * k + y] -= 1.0;
    }
    let h = p.iter().map(|&q| q * (1.0 - q)).collect();
    Ok((g, h))
}

/// `−G / (H + λ)`.
pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> Result<f64> {
    if h + lambda <= 0.0 {
        return Err(Error::invalid(format!(
            "leaf weight needs H + lambda > 0 (got {})",
            h + lambda
        )));
    }
    Ok(-g / (h + lambda))
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

/// Split value between two consecutive distinct sorted values `a < b`, chosen
/// so that `a` goes left and `b` goes right.
pub fn midpoint(a: f64, b: f64) -> f64 {
    let t = a + (b - a) * 0.5;
    if t > a {
        t
    } else {
        b
    }
}

/// One feature's `(value, row)` pairs for a node, ascending by value then row.
type Column = Vec<(f64, u32)>;

/// Best split of one feature given the node's sorted column.
fn best_for_feature(
    feature: usize,
    column: &[(f64, u32)],
    g: &[f64],
    h: &[f64],
    totals: (f64, f64),
    p: SplitParams,
) -> Option<Split> {
    let (g_tot, h_tot) = totals;
    let parent = score(g_tot, h_tot, p.lambda);
    let (mut gl, mut hl) = (0.0, 0.0);
    let mut best: Option<Split> = None;
    for w in column.windows(2) {
        let ((a, i), (b, _)) = (w[0], w[1]);
        gl += g[i as usize];
        hl += h[i as usize];
        if a >= b {
            continue;
        }
        let (gr, hr) = (g_tot - gl, h_tot - hl);
        if hl < p.min_child_weight || hr < p.min_child_weight {
            continue;
        }
        let gain = 0.5 * (score(gl, hl, p.lambda) + score(gr, hr, p.lambda) - parent) - p.gamma;
        if best.is_none_or(|s| gain > s.gain + GAIN_TIE_EPS) {
            best = Some(Split {
                feature,
                threshold: midpoint(a, b),
                gain,
            });
        }
    }
    best
}

fn best_split_sorted(columns: &[Column], g: &[f64], h: &[f64], p: SplitParams) -> Option<Split> {
    let rows = &columns[0];
    if rows.len() < 2 {
        return None;
    }
    let totals = rows.iter().fold((0.0, 0.0), |(a, b), &(_, r)| {
        (a + g[r as usize], b + h[r as usize])
    });
    let features: Vec<usize> = (0..columns.len()).collect();
    let per_feature = par::map(&features, |&f| {
        best_for_feature(f, &columns[f], g, h, totals, p)
    });
    let mut best: Option<Split> = None;
    for s in per_feature.into_iter().flatten() {
        if best.is_none_or(|b| s.gain > b.gain + GAIN_TIE_EPS) {
            best = Some(s);
        }
    }
    best.filter(|s| s.gain > 0.0)
}

fn sort_columns(x: &[f64], width: usize, rows: &[usize]) -> Vec<Column> {
    (0..width)
        .map(|f| {
            let mut col: Column = rows.iter().map(|&r| (x[r * width + f], r as u32)).collect();
            col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            col
        })
        .collect()
}

/// Exact greedy split search over the given rows of a row-major `x`
/// (`width` features). Returns `None` when no split has positive gain.
pub fn find_best_split(
    x: &[f64],
    width: usize,
    rows: &[usize],
    g: &[f64],
    h: &[f64],
    params: SplitParams,
) -> Option<Split> {
    if rows.len() < 2 || width == 0 {
        return None;
    }
    best_split_sorted(&sort_columns(x, width, rows), g, h, params)
}

struct TreeBuilder<'a> {
    x: &'a [f64],
    width: usize,
    g: &'a [f64],
    h: &'a [f64],
    params: SplitParams,
    max_depth: usize,
    goes_left: Vec<bool>,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, rows: &[(f64, u32)]) -> Result<()> {
        let (gs, hs) = rows.iter().fold((0.0, 0.0), |(a, b), &(_, r)| {
            (a + self.g[r as usize], b + self.h[r as usize])
        });
        let weight = leaf_weight(gs, hs, self.params.lambda)?;
        self.nodes.push(Node::Leaf { weight });
        Ok(())
    }

    fn grow(&mut self, columns: Vec<Column>, depth: usize) -> Result<()> {
        let split = if depth < self.max_depth && self.width > 0 {
            best_split_sorted(&columns, self.g, self.h, self.params)
        } else {
            None
        };
        let Some(split) = split else {
            return match columns.first() {
                Some(rows) => self.leaf(rows),
                None => self.leaf(&self.all_rows()),
            };
        };
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { weight: 0.0 });
        for &(_, r) in &columns[0] {
            let r = r as usize;
            self.goes_left[r] = self.x[r * self.width + split.feature] < split.threshold;
        }
        let (mut left, mut right) = (
            Vec::with_capacity(self.width),
            Vec::with_capacity(self.width),
        );
        for col in columns {
            let (l, r): (Column, Column) = col
                .into_iter()
                .partition(|&(_, i)| self.goes_left[i as usize]);
            left.push(l);
            right.push(r);
        }
        let left_at = self.nodes.len();
        self.grow(left, depth + 1)?;
        let right_at = self.nodes.len();
        self.grow(right, depth + 1)?;
        self.nodes[me] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: left_at,
            right: right_at,
        };
        Ok(())
    }

    fn all_rows(&self) -> Column {
        (0..self.g.len() as u32).map(|r| (0.0, r)).collect()
    }
}

fn check_tree_input(x: &[f64], width: usize, g: &[f64], h: &[f64]) -> Result<()> {
    let n = g.len();
    if x.len() != n * width || h.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n * width,
            actual: x.len(),
        });
    }
    if n == 0 {
        return Err(Error::Empty("tree training rows"));
    }
    Ok(())
}

fn fit_tree_sorted(
    x: &[f64],
    width: usize,
    columns: &[Column],
    g: &[f64],
    h: &[f64],
    max_depth: usize,
    params: SplitParams,
) -> Result<RegressionTree> {
    let mut b = TreeBuilder {
        x,
        width,
        g,
        h,
        params,
        max_depth,
        goes_left: vec![false; g.len()],
        nodes: Vec::new(),
    };
    b.grow(columns.to_vec(), 0)?;
    Ok(RegressionTree { nodes: b.nodes })
}

/// Fits one regression tree to per-row `(g, h)` over all rows of `x`.
pub fn fit_tree(
    x: &[f64],
    width: usize,
    g: &[f64],
    h: &[f64],
    max_depth: usize,
    params: SplitParams,
) -> Result<RegressionTree> {
    check_tree_input(x, width, g, h)?;
    let rows: Vec<usize> = (0..g.len()).collect();
    fit_tree_sorted(
        x,
        width,
        &sort_columns(x, width, &rows),
        g,
        h,
        max_depth,
        params,
    )
}

fn mean_logloss(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let p = softmax(logits, k);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -p[i * k + y].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len() as f64
}

fn column_of(v: &[f64], k: usize, c: usize) -> Vec<f64> {
    v.chunks_exact(k).map(|r| r[c]).collect()
}

pub fn fit_gbt(train: &FeatureTable, cfg: &GbtConfig) -> Result<BoostedEnsemble> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("booster training table"));
    }
    let k = N_CLASSES;
    let n = train.n_rows();
    let width = train.n_features();
    let x = train.features();
    let y = train.label_indices();
    let base = cfg.base_score.clone().unwrap_or_else(|| vec![0.0; k]);
    let mut logits: Vec<f64> = (0..n).flat_map(|_| base.iter().copied()).collect();
    let params = cfg.split_params();
    let mut rounds = Vec::with_capacity(cfg.n_rounds);
    let mut train_logloss = vec![mean_logloss(&logits, &y, k)];
    let classes: Vec<usize> = (0..k).collect();
    let all: Vec<usize> = (0..n).collect();
    let columns = sort_columns(x, width, &all);
    for _ in 0..cfg.n_rounds {
        let (g, h) = softmax_grad_hess(&logits, &y, k)?;
        let trees = par::map(&classes, |&c| {
            fit_tree_sorted(
                x,
                width,
                &columns,
                &column_of(&g, k, c),
                &column_of(&h, k, c),
                cfg.max_depth,
                params,
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for (i, row) in x.chunks_exact(width).enumerate() {
            for (c, t) in trees.iter().enumerate() {
                logits[i * k + c] += cfg.learning_rate * t.predict_row(row);
            }
        }
        train_logloss.push(mean_logloss(&logits, &y, k));
        rounds.push(trees);
    }
    Ok(BoostedEnsemble {
        config: cfg.clone(),
        n_features: width,
        n_classes: k,
        base_score: base,
        rounds,
        train_logloss,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities (`rows × 3`) and argmax labels.
pub fn predict_gbt(ens: &BoostedEnsemble, table: &FeatureTable) -> Result<(Vec<f64>, Vec<usize>)> {
    if table.n_features() != ens.n_features {
        return Err(Error::DimensionMismatch {
            expected: ens.n_features,
            actual: table.n_features(),
        });
    }
    let rows: Vec<&[f64]> = table.rows().collect();
    let logits: Vec<f64> = par::map(&rows, |r| ens.logits_row(r))
        .into_iter()
        .flatten()
        .collect();
    let probs = softmax(&logits, ens.n_classes);
    let labels = probs.chunks_exact(ens.n_classes).map(argmax).collect();
    Ok((probs, labels))
}
