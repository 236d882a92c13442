//! The comparison methods, all behind [`fit_baseline`] / [`predict_baseline`].
//!
//! Classical learners (CART, random forest, SAMME AdaBoost, Gaussian naive
//! Bayes, multinomial logistic regression) live here; the network-based
//! methods and the booster delegate to [`crate::nn`] and [`crate::gbt`].

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureTable, N_CLASSES};
use crate::error::{Error, Result};
use crate::gbt::{self, argmax, BoostedEnsemble, GbtConfig};
use crate::nn::{self, CnnConfig, CnnModel, Tap, TrainHistory};
use crate::par;
use crate::rng;

const K: usize = N_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Cnn,
    Mlp,
    GbtAlone,
    Adaboost,
    RandomForest,
    DecisionTree,
    NaiveBayes,
    LogisticRegression,
    Fused,
}

impl BaselineMethod {
    /// Proposed method first, then the comparison field.
    pub const ALL: [BaselineMethod; 9] = [
        BaselineMethod::Fused,
        BaselineMethod::Cnn,
        BaselineMethod::GbtAlone,
        BaselineMethod::Mlp,
        BaselineMethod::Adaboost,
        BaselineMethod::RandomForest,
        BaselineMethod::DecisionTree,
        BaselineMethod::NaiveBayes,
        BaselineMethod::LogisticRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Cnn => "cnn",
            BaselineMethod::Mlp => "mlp",
            BaselineMethod::GbtAlone => "gbt_alone",
            BaselineMethod::Adaboost => "adaboost",
            BaselineMethod::RandomForest => "random_forest",
            BaselineMethod::DecisionTree => "decision_tree",
            BaselineMethod::NaiveBayes => "naive_bayes",
            BaselineMethod::LogisticRegression => "logistic_regression",
            BaselineMethod::Fused => "fused",
        }
    }

    /// Methods that need at least two classes in the training set.
    pub fn is_discriminative(self) -> bool {
        matches!(
            self,
            BaselineMethod::Cnn
                | BaselineMethod::Mlp
                | BaselineMethod::Fused
                | BaselineMethod::Adaboost
                | BaselineMethod::LogisticRegression
        )
    }
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 16,
            min_samples_split: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features tried per split; `None` means `⌊√d⌋`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 16,
            min_samples_split: 2,
            max_features: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaBoostConfig {
    pub n_rounds: usize,
}

impl Default for AdaBoostConfig {
    fn default() -> Self {
        AdaBoostConfig { n_rounds: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NaiveBayesConfig {
    /// Added to every per-class feature variance.
    pub var_floor: f64,
}

impl Default for NaiveBayesConfig {
    fn default() -> Self {
        NaiveBayesConfig { var_floor: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub l2: f64,
    /// Stop once the largest absolute gradient component is below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1e-4,
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub decision_tree: TreeConfig,
    pub random_forest: ForestConfig,
    pub adaboost: AdaBoostConfig,
    pub naive_bayes: NaiveBayesConfig,
    pub logistic_regression: LogisticConfig,
}

/// Everything a method may need besides its training table.
#[derive(Debug, Clone, Copy)]
pub struct FitContext<'a> {
    pub baselines: &'a BaselineConfig,
    pub nn: &'a CnnConfig,
    pub gbt: &'a GbtConfig,
    pub tap: Tap,
    pub seed: u64,
    /// Only used to record validation accuracy in network histories.
    pub val: Option<&'a FeatureTable>,
}

// ---------------------------------------------------------------- CART

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CartNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Class fractions of the training rows reaching this leaf.
        dist: [f64; K],
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CartTree {
    pub nodes: Vec<CartNode>,
}

impl CartTree {
    pub fn leaf_dist(&self, row: &[f64]) -> [f64; K] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                CartNode::Leaf { dist } => return *dist,
                CartNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[*feature] < *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn predict_label(&self, row: &[f64]) -> usize {
        argmax(&self.leaf_dist(row))
    }

    pub fn depth(&self) -> usize {
        fn go(t: &CartTree, i: usize) -> usize {
            match &t.nodes[i] {
                CartNode::Leaf { .. } => 0,
                CartNode::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

struct CartBuilder<'a, R: Rng> {
    x: &'a [f64],
    width: usize,
    y: &'a [usize],
    max_depth: usize,
    min_samples_split: usize,
    /// `Some((rng, m))` draws `m` candidate features per split.
    sampler: Option<(R, usize)>,
    nodes: Vec<CartNode>,
}

fn counts_of(y: &[usize], rows: &[usize]) -> [f64; K] {
    let mut c = [0.0; K];
    for &r in rows {
        c[y[r]] += 1.0;
    }
    c
}

fn purity(c: &[f64; K], n: f64) -> f64 {
    c.iter().map(|v| v * v).sum::<f64>() / n
}

impl<R: Rng> CartBuilder<'_, R> {
    fn candidates(&mut self) -> Vec<usize> {
        match &mut self.sampler {
            Some((r, m)) if *m < self.width => {
                let mut f = index::sample(r, self.width, *m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..self.width).collect(),
        }
    }

    /// Best Gini split; maximizes `Σ n_Lc²/n_L + Σ n_Rc²/n_R`, which is the
    /// same as minimizing weighted child impurity.
    fn best_split(&mut self, rows: &[usize], counts: &[f64; K]) -> Option<(usize, f64)> {
        let n = rows.len() as f64;
        let parent = purity(counts, n);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        for f in self.candidates() {
            pairs.clear();
            pairs.extend(rows.iter().map(|&r| (self.x[r * self.width + f], r)));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut left = [0.0; K];
            for i in 0..pairs.len() - 1 {
                left[self.y[pairs[i].1]] += 1.0;
                let (a, b) = (pairs[i].0, pairs[i + 1].0);
                if a >= b {
                    continue;
                }
                let nl = (i + 1) as f64;
                let mut right = *counts;
                for c in 0..K {
                    right[c] -= left[c];
                }
                let score = purity(&left, nl) + purity(&right, n - nl);
                if score > parent + 1e-12 && best.is_none_or(|(_, _, s)| score > s + 1e-12) {
                    best = Some((f, gbt::midpoint(a, b), score));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) {
        let counts = counts_of(self.y, &rows);
        let n = rows.len() as f64;
        let pure = counts.iter().filter(|&&c| c > 0.0).count() <= 1;
        let split = if depth < self.max_depth && rows.len() >= self.min_samples_split && !pure {
            self.best_split(&rows, &counts)
        } else {
            None
        };
        let Some((feature, threshold)) = split else {
            self.nodes.push(CartNode::Leaf {
                dist: counts.map(|c| c / n),
            });
            return;
        };
        let me = self.nodes.len();
        self.nodes.push(CartNode::Leaf { dist: [0.0; K] });
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&i| self.x[i * self.width + feature] < threshold);
        let left = self.nodes.len();
        self.grow(l, depth + 1);
        let right = self.nodes.len();
        self.grow(r, depth + 1);
        self.nodes[me] = CartNode::Split {
            feature,
            threshold,
            left,
            right,
        };
    }
}

fn fit_cart_rows<R: Rng>(
    x: &[f64],
    width: usize,
    y: &[usize],
    rows: Vec<usize>,
    max_depth: usize,
    min_samples_split: usize,
    sampler: Option<(R, usize)>,
) -> CartTree {
    let mut b = CartBuilder {
        x,
        width,
        y,
        max_depth,
        min_samples_split: min_samples_split.max(2),
        sampler,
        nodes: Vec::new(),
    };
    b.grow(rows, 0);
    CartTree { nodes: b.nodes }
}

pub fn fit_decision_tree(train: &FeatureTable, cfg: &TreeConfig) -> Result<CartTree> {
    non_empty(train)?;
    let y = train.label_indices();
    Ok(fit_cart_rows::<rng::StreamRng>(
        train.features(),
        train.n_features(),
        &y,
        (0..train.n_rows()).collect(),
        cfg.max_depth,
        cfg.min_samples_split,
        None,
    ))
}

pub fn fit_random_forest(
    train: &FeatureTable,
    cfg: &ForestConfig,
    seed: u64,
) -> Result<Vec<CartTree>> {
    non_empty(train)?;
    if cfg.n_trees == 0 {
        return Err(Error::invalid("random forest needs at least one tree"));
    }
    let width = train.n_features();
    let m = cfg
        .max_features
        .unwrap_or_else(|| ((width as f64).sqrt().floor() as usize).max(1))
        .clamp(1, width);
    let y = train.label_indices();
    let n = train.n_rows();
    Ok(par::map_range(cfg.n_trees, |t| {
        let mut r = rng::stream(seed, &[0xF0E5, t as u64]);
        let rows = if cfg.bootstrap {
            (0..n).map(|_| r.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        fit_cart_rows(
            train.features(),
            width,
            &y,
            rows,
            cfg.max_depth,
            cfg.min_samples_split,
            Some((r, m)),
        )
    }))
}

// ---------------------------------------------------------------- AdaBoost

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// Weighted misclassification error, normalized by total weight.
    pub error: f64,
}

impl Stump {
    pub fn predict(&self, row: &[f64]) -> usize {
        if row[self.feature] < self.threshold {
            self.left
        } else {
            self.right
        }
    }
}

fn weighted_majority(w: &[f64; K]) -> usize {
    argmax(w)
}

/// Depth-1 split minimizing weighted misclassification, each side predicting
/// its weighted-majority class. Ties go to the lowest feature, then the
/// lowest threshold. A constant stump is returned when no feature varies.
pub fn fit_stump(x: &[f64], width: usize, y: &[usize], w: &[f64]) -> Stump {
    let total_by_class = y.iter().zip(w).fold([0.0; K], |mut acc, (&c, &wi)| {
        acc[c] += wi;
        acc
    });
    let total: f64 = total_by_class.iter().sum();
    let majority = weighted_majority(&total_by_class);
    let mut best = Stump {
        feature: 0,
        threshold: f64::INFINITY,
        left: majority,
        right: majority,
        error: (total - total_by_class[majority]) / total,
    };
    let mut have_split = false;
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    for f in 0..width {
        order.sort_by(|&a, &b| {
            x[a * width + f]
                .total_cmp(&x[b * width + f])
                .then(a.cmp(&b))
        });
        let mut left = [0.0; K];
        for i in 0..n.saturating_sub(1) {
            let r = order[i];
            left[y[r]] += w[r];
            let (a, b) = (x[r * width + f], x[order[i + 1] * width + f]);
            if a >= b {
                continue;
            }
            let mut right = total_by_class;
            for c in 0..K {
                right[c] -= left[c];
            }
            let (lc, rc) = (weighted_majority(&left), weighted_majority(&right));
            let correct = left[lc] + right[rc];
            let error = (total - correct) / total;
            if !have_split || error < best.error - 1e-12 {
                best = Stump {
                    feature: f,
                    threshold: gbt::midpoint(a, b),
                    left: lc,
                    right: rc,
                    error,
                };
                have_split = true;
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaBoostModel {
    pub stumps: Vec<(Stump, f64)>,
}

/// Multiclass AdaBoost (SAMME) on decision stumps.
pub fn fit_adaboost(train: &FeatureTable, cfg: &AdaBoostConfig) -> Result<AdaBoostModel> {
    non_empty(train)?;
    let width = train.n_features();
    let x = train.features();
    let y = train.label_indices();
    let n = y.len();
    let mut w = vec![1.0 / n as f64; n];
    let mut stumps = Vec::new();
    let chance = 1.0 - 1.0 / K as f64;
    for _ in 0..cfg.n_rounds {
        let s = fit_stump(x, width, &y, &w);
        if s.error <= 0.0 {
            stumps.push((s, 1.0));
            break;
        }
        if s.error >= chance {
            if stumps.is_empty() {
                stumps.push((s, 1.0));
            }
            break;
        }
        let alpha = ((1.0 - s.error) / s.error).ln() + ((K - 1) as f64).ln();
        let mut sum = 0.0;
        for (i, wi) in w.iter_mut().enumerate() {
            if s.predict(&x[i * width..(i + 1) * width]) != y[i] {
                *wi *= alpha.exp();
            }
            sum += *wi;
        }
        w.iter_mut().for_each(|v| *v /= sum);
        stumps.push((s, alpha));
    }
    Ok(AdaBoostModel { stumps })
}

// ---------------------------------------------------------------- Naive Bayes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesModel {
    pub priors: [f64; K],
    /// `K × d`.
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

pub fn fit_naive_bayes(train: &FeatureTable, cfg: &NaiveBayesConfig) -> Result<NaiveBayesModel> {
    non_empty(train)?;
    let d = train.n_features();
    let counts = train.class_counts();
    let mut means = vec![0.0; K * d];
    let mut vars = vec![0.0; K * d];
    for (row, l) in train.rows().zip(train.labels()) {
        let c = l.index();
        for j in 0..d {
            means[c * d + j] += row[j];
        }
    }
    for c in 0..K {
        if counts[c] > 0 {
            means[c * d..(c + 1) * d]
                .iter_mut()
                .for_each(|m| *m /= counts[c] as f64);
        }
    }
    for (row, l) in train.rows().zip(train.labels()) {
        let c = l.index();
        for j in 0..d {
            let e = row[j] - means[c * d + j];
            vars[c * d + j] += e * e;
        }
    }
    for c in 0..K {
        let n = counts[c].max(1) as f64;
        vars[c * d..(c + 1) * d]
            .iter_mut()
            .for_each(|v| *v = *v / n + cfg.var_floor);
    }
    let n = train.n_rows() as f64;
    Ok(NaiveBayesModel {
        priors: counts.map(|c| c as f64 / n),
        means,
        vars,
    })
}

impl NaiveBayesModel {
    pub fn scores_row(&self, row: &[f64]) -> [f64; K] {
        let d = row.len();
        let mut log = [f64::NEG_INFINITY; K];
        for c in 0..K {
            if self.priors[c] == 0.0 {
                continue;
            }
            let mut s = self.priors[c].ln();
            for j in 0..d {
                let v = self.vars[c * d + j];
                let e = row[j] - self.means[c * d + j];
                s -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + e * e / v);
            }
            log[c] = s;
        }
        let max = log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = log.map(|l| (l - max).exp());
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sum);
        p
    }
}

// ---------------------------------------------------------------- Logistic regression

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// `d × K`.
    pub weights: Vec<f64>,
    pub bias: [f64; K],
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    fn logits_row(&self, row: &[f64]) -> [f64; K] {
        let mut z = self.bias;
        for (j, &v) in row.iter().enumerate() {
            for c in 0..K {
                z[c] += v * self.weights[j * K + c];
            }
        }
        z
    }
}

/// Largest eigenvalue of `[X 1]ᵀ[X 1] / n` by power iteration.
fn gram_lambda_max(x: &[f64], d: usize, n: usize) -> f64 {
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut out = vec![0.0; d + 1];
        for row in x.chunks_exact(d) {
            let dot = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
            for j in 0..d {
                out[j] += dot * row[j];
            }
            out[d] += dot;
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let norm = out.iter().map(|o| o * o).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = out.into_iter().map(|o| o / norm).collect();
        if (next - lambda).abs() <= 1e-9 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Multinomial logistic regression by full-batch gradient descent on the mean
/// cross-entropy plus `l2/2 · ‖W‖²`. The step is `1/L`, with `L` bounding the
/// gradient's Lipschitz constant.
pub fn fit_logistic(train: &FeatureTable, cfg: &LogisticConfig) -> Result<LogisticModel> {
    non_empty(train)?;
    let d = train.n_features();
    let n = train.n_rows();
    let x = train.features();
    let y = train.label_indices();
    let lip = 0.5 * gram_lambda_max(x, d, n) + cfg.l2;
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };
    let mut model = LogisticModel {
        weights: vec![0.0; d * K],
        bias: [0.0; K],
        iterations: 0,
        converged: false,
    };
    for it in 0..cfg.max_iter {
        let mut gw = vec![0.0; d * K];
        let mut gb = [0.0; K];
        for (i, row) in x.chunks_exact(d).enumerate() {
            let z = model.logits_row(row);
            let p = gbt::softmax(&z, K);
            for c in 0..K {
                let e = (p[c] - f64::from(u8::from(y[i] == c))) / n as f64;
                gb[c] += e;
                for j in 0..d {
                    gw[j * K + c] += e * row[j];
                }
            }
        }
        for (g, w) in gw.iter_mut().zip(&model.weights) {
            *g += cfg.l2 * w;
        }
        let gmax = gw.iter().chain(&gb).fold(0.0f64, |m, g| m.max(g.abs()));
        model.iterations = it;
        if gmax < cfg.tol {
            model.converged = true;
            break;
        }
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= step * g;
        }
        for c in 0..K {
            model.bias[c] -= step * gb[c];
        }
        model.iterations = it + 1;
    }
    Ok(model)
}

// ---------------------------------------------------------------- Dispatch

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedModel {
    pub cnn: CnnModel<f32>,
    pub tap: Tap,
    pub booster: BoostedEnsemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BaselineModel {
    Cnn {
        model: CnnModel<f32>,
        history: TrainHistory,
    },
    Mlp {
        model: CnnModel<f32>,
        history: TrainHistory,
    },
    GbtAlone {
        ensemble: BoostedEnsemble,
    },
    Adaboost {
        model: AdaBoostModel,
    },
    RandomForest {
        trees: Vec<CartTree>,
    },
    DecisionTree {
        tree: CartTree,
    },
    NaiveBayes {
        model: NaiveBayesModel,
    },
    LogisticRegression {
        model: LogisticModel,
    },
    Fused {
        model: FusedModel,
        history: TrainHistory,
    },
}

impl BaselineModel {
    pub fn method(&self) -> BaselineMethod {
        match self {
            BaselineModel::Cnn { .. } => BaselineMethod::Cnn,
            BaselineModel::Mlp { .. } => BaselineMethod::Mlp,
            BaselineModel::GbtAlone { .. } => BaselineMethod::GbtAlone,
            BaselineModel::Adaboost { .. } => BaselineMethod::Adaboost,
            BaselineModel::RandomForest { .. } => BaselineMethod::RandomForest,
            BaselineModel::DecisionTree { .. } => BaselineMethod::DecisionTree,
            BaselineModel::NaiveBayes { .. } => BaselineMethod::NaiveBayes,
            BaselineModel::LogisticRegression { .. } => BaselineMethod::LogisticRegression,
            BaselineModel::Fused { .. } => BaselineMethod::Fused,
        }
    }

    /// Training history of the network part, if any.
    pub fn history(&self) -> Option<&TrainHistory> {
        match self {
            BaselineModel::Cnn { history, .. }
            | BaselineModel::Mlp { history, .. }
            | BaselineModel::Fused { history, .. } => Some(history),
            _ => None,
        }
    }
}

fn non_empty(train: &FeatureTable) -> Result<()> {
    if train.is_empty() {
        Err(Error::Empty("training table"))
    } else {
        Ok(())
    }
}

fn network_config(base: &CnnConfig, width: usize) -> CnnConfig {
    CnnConfig {
        input_length: width,
        n_classes: K,
        ..base.clone()
    }
}

/// Trains the network stage of `cnn` / `fused` on `train`.
pub fn fit_cnn(
    train: &FeatureTable,
    ctx: &FitContext<'_>,
) -> Result<(CnnModel<f32>, TrainHistory)> {
    let cfg = network_config(ctx.nn, train.n_features());
    let mut model = nn::build_cnn::<f32>(&cfg, rng::derive_seed(ctx.seed, &[0xC11, 0]))?;
    let history = nn::train_cnn(
        &mut model,
        train,
        ctx.val,
        rng::derive_seed(ctx.seed, &[0xC11, 1]),
    )?;
    Ok((model, history))
}

/// Fits the booster on the embeddings of an already-trained network.
pub fn fuse(
    cnn: CnnModel<f32>,
    train: &FeatureTable,
    tap: Tap,
    gbt_cfg: &GbtConfig,
) -> Result<FusedModel> {
    let emb = nn::extract_embeddings(&cnn, train, tap)?;
    let booster = gbt::fit_gbt(&emb, gbt_cfg)?;
    Ok(FusedModel { cnn, tap, booster })
}

pub fn fit_baseline(
    method: BaselineMethod,
    train: &FeatureTable,
    ctx: &FitContext<'_>,
) -> Result<BaselineModel> {
    non_empty(train)?;
    if method.is_discriminative() && train.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::invalid(format!(
            "{method} needs at least two classes in the training set"
        )));
    }
    let b = ctx.baselines;
    Ok(match method {
        BaselineMethod::Cnn => {
            let (model, history) = fit_cnn(train, ctx)?;
            BaselineModel::Cnn { model, history }
        }
        BaselineMethod::Mlp => {
            let cfg = network_config(&ctx.nn.mlp(), train.n_features());
            let mut model = nn::build_cnn::<f32>(&cfg, rng::derive_seed(ctx.seed, &[0x31F, 0]))?;
            let history = nn::train_cnn(
                &mut model,
                train,
                ctx.val,
                rng::derive_seed(ctx.seed, &[0x31F, 1]),
            )?;
            BaselineModel::Mlp { model, history }
        }
        BaselineMethod::GbtAlone => BaselineModel::GbtAlone {
            ensemble: gbt::fit_gbt(train, ctx.gbt)?,
        },
        BaselineMethod::Adaboost => BaselineModel::Adaboost {
            model: fit_adaboost(train, &b.adaboost)?,
        },
        BaselineMethod::RandomForest => BaselineModel::RandomForest {
            trees: fit_random_forest(
                train,
                &b.random_forest,
                rng::derive_seed(ctx.seed, &[0xF0E5]),
            )?,
        },
        BaselineMethod::DecisionTree => BaselineModel::DecisionTree {
            tree: fit_decision_tree(train, &b.decision_tree)?,
        },
        BaselineMethod::NaiveBayes => BaselineModel::NaiveBayes {
            model: fit_naive_bayes(train, &b.naive_bayes)?,
        },
        BaselineMethod::LogisticRegression => BaselineModel::LogisticRegression {
            model: fit_logistic(train, &b.logistic_regression)?,
        },
        BaselineMethod::Fused => {
            let (cnn, history) = fit_cnn(train, ctx)?;
            BaselineModel::Fused {
                model: fuse(cnn, train, ctx.tap, ctx.gbt)?,
                history,
            }
        }
    })
}

fn one_hot(c: usize) -> [f64; K] {
    let mut v = [0.0; K];
    v[c] = 1.0;
    v
}

fn expected_width(model: &BaselineModel) -> Option<usize> {
    match model {
        BaselineModel::Cnn { model, .. } | BaselineModel::Mlp { model, .. } => {
            Some(model.input_length())
        }
        BaselineModel::Fused { model, .. } => Some(model.cnn.input_length()),
        BaselineModel::GbtAlone { ensemble } => Some(ensemble.n_features),
        BaselineModel::NaiveBayes { model } => Some(model.means.len() / K),
        BaselineModel::LogisticRegression { model } => Some(model.weights.len() / K),
        _ => None,
    }
}

/// Class scores (`rows × 3`) and argmax labels, lowest index on ties.
pub fn predict_baseline(
    model: &BaselineModel,
    table: &FeatureTable,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if let Some(w) = expected_width(model) {
        if w != table.n_features() {
            return Err(Error::DimensionMismatch {
                expected: w,
                actual: table.n_features(),
            });
        }
    }
    let rows: Vec<&[f64]> = table.rows().collect();
    let scores: Vec<f64> = match model {
        BaselineModel::Cnn { model, .. } | BaselineModel::Mlp { model, .. } => {
            let emb = nn::extract_embeddings(model, table, Tap::Output)?;
            emb.features().to_vec()
        }
        BaselineModel::GbtAlone { ensemble } => gbt::predict_gbt(ensemble, table)?.0,
        BaselineModel::Fused { model, .. } => {
            let emb = nn::extract_embeddings(&model.cnn, table, model.tap)?;
            gbt::predict_gbt(&model.booster, &emb)?.0
        }
        BaselineModel::DecisionTree { tree } => par::map(&rows, |r| tree.leaf_dist(r)).concat(),
        BaselineModel::RandomForest { trees } => par::map(&rows, |r| {
            let mut votes = [0.0; K];
            for t in trees {
                votes[t.predict_label(r)] += 1.0;
            }
            votes.map(|v| v / trees.len() as f64)
        })
        .concat(),
        BaselineModel::Adaboost { model } => {
            let total: f64 = model.stumps.iter().map(|(_, a)| a).sum();
            par::map(&rows, |r| {
                let mut s = [0.0; K];
                for (stump, alpha) in &model.stumps {
                    s[stump.predict(r)] += alpha;
                }
                if total > 0.0 {
                    s.map(|v| v / total)
                } else {
                    one_hot(model.stumps[0].0.predict(r))
                }
            })
            .concat()
        }
        BaselineModel::NaiveBayes { model } => par::map(&rows, |r| model.scores_row(r)).concat(),
        BaselineModel::LogisticRegression { model } => {
            par::map(&rows, |r| gbt::softmax(&model.logits_row(r), K)).concat()
        }
    };
    let labels = scores.chunks_exact(K).map(argmax).collect();
    Ok((scores, labels))
}
