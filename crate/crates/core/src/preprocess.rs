//! Robust scaling, variance-based importance and PCA.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureTable;
use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};
use crate::par;

const ROW_BLOCK: usize = 8192;

/// Linear-interpolation quantile (`h = (n - 1) p`). Reorders `values`.
pub fn quantile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty() && (0.0..=1.0).contains(&p));
    let h = (values.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let (_, &mut low, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return low;
    }
    let high = upper.iter().copied().fold(f64::INFINITY, f64::min);
    low + frac * (high - low)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub medians: Vec<f64>,
    pub iqrs: Vec<f64>,
    /// True where the IQR is zero; those features are only centered.
    pub degenerate: Vec<bool>,
}

impl ScalerParams {
    pub fn n_features(&self) -> usize {
        self.medians.len()
    }

    fn divisor(&self, j: usize) -> f64 {
        if self.degenerate[j] {
            1.0
        } else {
            self.iqrs[j]
        }
    }
}

pub fn fit_robust_scaler(train: &FeatureTable) -> Result<ScalerParams> {
    if train.n_rows() < 2 {
        return Err(Error::Empty("robust scaler needs at least 2 rows"));
    }
    let stats: Vec<(f64, f64)> = par::map_range(train.n_features(), |j| {
        let mut col = train.column(j);
        let median = quantile(&mut col, 0.5);
        let q1 = quantile(&mut col, 0.25);
        let q3 = quantile(&mut col, 0.75);
        (median, q3 - q1)
    });
    let (medians, iqrs): (Vec<f64>, Vec<f64>) = stats.into_iter().unzip();
    let degenerate = iqrs.iter().map(|&q| q == 0.0).collect();
    Ok(ScalerParams {
        medians,
        iqrs,
        degenerate,
    })
}

/// `x' = (x - median) / IQR`, with divisor 1 on degenerate features.
pub fn apply_scaler(params: &ScalerParams, table: &FeatureTable) -> Result<FeatureTable> {
    let w = table.n_features();
    if w != params.n_features() {
        return Err(Error::DimensionMismatch {
            expected: params.n_features(),
            actual: w,
        });
    }
    let divisors: Vec<f64> = (0..w).map(|j| params.divisor(j)).collect();
    let mut out = table.features().to_vec();
    par::chunks_mut(&mut out, ROW_BLOCK * w, |_, block| {
        for row in block.chunks_exact_mut(w) {
            for ((x, m), d) in row.iter_mut().zip(&params.medians).zip(&divisors) {
                *x = (*x - m) / d;
            }
        }
    });
    table.with_features(table.columns().to_vec(), out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Population variance of each feature.
    pub importances: Vec<f64>,
    pub threshold: f64,
    /// `importance > threshold`.
    pub mask: Vec<bool>,
}

impl ImportanceReport {
    pub fn n_passing(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn column_means(table: &FeatureTable) -> Vec<f64> {
    let w = table.n_features();
    let mut sums = vec![0.0; w];
    for row in table.rows() {
        sums.iter_mut().zip(row).for_each(|(s, x)| *s += x);
    }
    sums.iter().map(|s| s / table.n_rows() as f64).collect()
}

pub fn variance_importance(table: &FeatureTable, threshold: f64) -> Result<ImportanceReport> {
    if table.n_rows() < 2 {
        return Err(Error::Empty("variance importance needs at least 2 rows"));
    }
    let means = column_means(table);
    let w = table.n_features();
    let mut ss = vec![0.0; w];
    for row in table.rows() {
        for ((s, x), m) in ss.iter_mut().zip(row).zip(&means) {
            let d = x - m;
            *s += d * d;
        }
    }
    let importances: Vec<f64> = ss.iter().map(|s| s / table.n_rows() as f64).collect();
    let mask = importances.iter().map(|&v| v > threshold).collect();
    Ok(ImportanceReport {
        importances,
        threshold,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub n_features: usize,
    pub n_components: usize,
    pub means: Vec<f64>,
    /// `n_components × n_features`, row-major, rows orthonormal.
    pub components: Vec<f64>,
    /// Sample variance (n − 1 divisor) along each component, non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Maps scores back to feature space.
    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut x = self.means.clone();
        for (i, s) in scores.iter().enumerate() {
            x.iter_mut()
                .zip(self.component(i))
                .for_each(|(x, c)| *x += s * c);
        }
        x
    }
}

/// Sample covariance of the rows of `table` around `means`.
fn covariance(table: &FeatureTable, means: &[f64]) -> Vec<f64> {
    let w = table.n_features();
    let mut cov = vec![0.0; w * w];
    let mut buf = Vec::with_capacity(ROW_BLOCK * w);
    for block in table.features().chunks(ROW_BLOCK * w) {
        buf.clear();
        for row in block.chunks_exact(w) {
            buf.extend(row.iter().zip(means).map(|(x, m)| x - m));
        }
        let rows = block.len() / w;
        gemm(w, rows, w, &buf, Op::T, &buf, Op::N, 1.0, &mut cov);
    }
    let denom = (table.n_rows() - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    cov
}

/// Top eigenvectors of the sample covariance. Each component's
/// largest-magnitude loading is made positive.
pub fn fit_pca(table: &FeatureTable, n_components: usize) -> Result<PcaModel> {
    let p = table.n_features();
    if n_components == 0 || n_components > p {
        return Err(Error::invalid(format!(
            "n_components must be in 1..={p}, got {n_components}"
        )));
    }
    if table.n_rows() < p || table.n_rows() < 2 {
        return Err(Error::invalid(format!(
            "PCA needs at least as many rows as features ({} < {p})",
            table.n_rows()
        )));
    }
    let means = column_means(table);
    let cov = covariance(table, &means);
    let eig = nalgebra::DMatrix::from_row_slice(p, p, &cov).symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut components = Vec::with_capacity(n_components * p);
    let mut explained_variance = Vec::with_capacity(n_components);
    for &i in &order[..n_components] {
        let v = eig.eigenvectors.column(i);
        let mut pivot = 0;
        for j in 1..p {
            if v[j].abs() > v[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|x| sign * x));
        explained_variance.push(eig.eigenvalues[i].max(0.0));
    }
    Ok(PcaModel {
        n_features: p,
        n_components,
        means,
        components,
        explained_variance,
    })
}

pub fn apply_pca(model: &PcaModel, table: &FeatureTable) -> Result<FeatureTable> {
    let p = table.n_features();
    if p != model.n_features {
        return Err(Error::DimensionMismatch {
            expected: model.n_features,
            actual: p,
        });
    }
    let k = model.n_components;
    let mut scores = vec![0.0; table.n_rows() * k];
    let src = table.features();
    par::chunks_mut(&mut scores, ROW_BLOCK * k, |b, out| {
        let rows = out.len() / k;
        let start = b * ROW_BLOCK * p;
        let centered: Vec<f64> = src[start..start + rows * p]
            .chunks_exact(p)
            .flat_map(|r| r.iter().zip(&model.means).map(|(x, m)| x - m))
            .collect();
        gemm(
            rows,
            p,
            k,
            &centered,
            Op::N,
            &model.components,
            Op::T,
            0.0,
            out,
        );
    });
    let columns = (1..=k).map(|i| format!("pc{i:02}")).collect();
    table.with_features(columns, scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Variance cutoff for the importance stage.
    pub tau: f64,
    /// Fixed PCA size; `None` keeps as many components as features pass `tau`.
    pub n_components: Option<usize>,
    /// Fit preprocessing on the whole table before folding, instead of per
    /// fold on training rows.
    pub paper_faithful: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            tau: 0.5,
            n_components: None,
            paper_faithful: false,
        }
    }
}

pub const PREPROCESSOR_FORMAT_VERSION: u32 = 1;

/// Scaler, importance report and PCA basis frozen from a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPreprocessor {
    pub version: u32,
    pub tau: f64,
    pub scaler: ScalerParams,
    pub importance: ImportanceReport,
    pub pca: PcaModel,
    pub post_pca_importance: ImportanceReport,
}

impl FittedPreprocessor {
    pub fn n_components(&self) -> usize {
        self.pca.n_components
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fp: FittedPreprocessor = serde_json::from_str(&text)?;
        if fp.version != PREPROCESSOR_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported preprocessor version {}",
                fp.version
            )));
        }
        Ok(fp)
    }
}

/// Scale → importance on scaled features → PCA → importance on PCA scores.
pub fn fit_pipeline(train: &FeatureTable, cfg: &PreprocessConfig) -> Result<FittedPreprocessor> {
    let scaler = fit_robust_scaler(train)?;
    let scaled = apply_scaler(&scaler, train)?;
    let importance = variance_importance(&scaled, cfg.tau)?;
    let n_components = match cfg.n_components {
        Some(n) => n,
        None => {
            let n = importance.n_passing();
            if n < 2 {
                return Err(Error::invalid(format!(
                    "only {n} feature(s) exceed the importance cutoff {}",
                    cfg.tau
                )));
            }
            n
        }
    };
    let pca = fit_pca(&scaled, n_components)?;
    let scores = apply_pca(&pca, &scaled)?;
    let post_pca_importance = variance_importance(&scores, cfg.tau)?;
    Ok(FittedPreprocessor {
        version: PREPROCESSOR_FORMAT_VERSION,
        tau: cfg.tau,
        scaler,
        importance,
        pca,
        post_pca_importance,
    })
}

pub fn apply_pipeline(fp: &FittedPreprocessor, table: &FeatureTable) -> Result<FeatureTable> {
    let scaled = apply_scaler(&fp.scaler, table)?;
    apply_pca(&fp.pca, &scaled)
}
