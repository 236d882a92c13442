use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineConfig, BaselineMethod, BaselineModel, FitContext};
use crate::dataset::{materialize_fold, stratified_kfold, FeatureTable, FoldPlan, N_CLASSES};
use crate::error::{Error, Result};
use crate::eval::metrics::{
    confusion_matrix, metrics_from_cm, Averaging, ConfusionMatrix, MetricsReport,
};
use crate::eval::pr::{pr_curve, PrCurve};
use crate::gbt::GbtConfig;
use crate::nn::{CnnConfig, CnnModel, TrainHistory};
use crate::preprocess::{apply_pipeline, fit_pipeline, PreprocessConfig};
use crate::rng;

/// Everything that defines one cross-validated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSpec {
    pub method: BaselineMethod,
    pub k: usize,
    pub seed: u64,
    pub averaging: Averaging,
    pub pr_thresholds: usize,
    pub preprocess: PreprocessConfig,
    pub nn: CnnConfig,
    pub gbt: GbtConfig,
    pub baselines: BaselineConfig,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec {
            method: BaselineMethod::Fused,
            k: 10,
            seed: 0,
            averaging: Averaging::Weighted,
            pr_thresholds: 100,
            preprocess: PreprocessConfig::default(),
            nn: CnnConfig::default(),
            gbt: GbtConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Order-sensitive digest of the test row indices.
    pub test_digest: String,
    pub n_components: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    /// Final-epoch validation accuracy for network methods.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub method: BaselineMethod,
    pub dpi: u8,
    pub k: usize,
    pub seed: u64,
    pub n_rows: usize,
    pub folds: Vec<FoldReport>,
    pub failures: Vec<FoldFailure>,
    /// Arithmetic mean over successful folds.
    pub mean: Option<MetricsReport>,
    /// Sum of the per-fold test confusion matrices.
    pub pooled_confusion: ConfusionMatrix,
    /// One curve per class over the pooled out-of-fold scores.
    pub pr_curves: Vec<PrCurve>,
    pub spec: PipelineSpec,
}

impl CvReport {
    /// Zeroes every wall-clock field so that reports compare byte-for-byte.
    pub fn scrub_timings(&mut self) {
        for f in &mut self.folds {
            f.metrics.train_seconds = 0.0;
        }
        if let Some(m) = &mut self.mean {
            m.train_seconds = 0.0;
        }
    }

    pub fn mean_train_seconds(&self) -> f64 {
        self.mean.as_ref().map_or(f64::NAN, |m| m.train_seconds)
    }
}

fn digest(rows: &[usize]) -> String {
    let h = rows
        .iter()
        .fold(0x9E37_79B9_7F4A_7C15u64, |h, &r| rng::mix64(h ^ r as u64));
    format!("{h:016x}")
}

struct MethodAcc {
    folds: Vec<FoldReport>,
    failures: Vec<FoldFailure>,
    y_true: Vec<usize>,
    scores: Vec<f64>,
}

struct CachedCnn {
    model: CnnModel<f32>,
    history: TrainHistory,
    seconds: f64,
}

fn last_val_acc(model: &BaselineModel) -> Option<f64> {
    model
        .history()
        .and_then(|h| h.epochs.last())
        .map(|e| e.val_acc)
        .filter(|v| v.is_finite())
}

/// Cross-validates every method over one shared fold plan. Preprocessing is
/// fitted once per fold and shared; `cnn` and `fused` share one trained
/// network per fold.
pub fn run_methods(
    table: &FeatureTable,
    plan: &FoldPlan,
    methods: &[BaselineMethod],
    spec: &PipelineSpec,
) -> Result<Vec<CvReport>> {
    if methods.is_empty() {
        return Err(Error::invalid("no methods to evaluate"));
    }
    let mut accs: Vec<MethodAcc> = methods
        .iter()
        .map(|_| MethodAcc {
            folds: Vec::new(),
            failures: Vec::new(),
            y_true: Vec::new(),
            scores: Vec::new(),
        })
        .collect();
    let global = if spec.preprocess.paper_faithful {
        Some(fit_pipeline(table, &spec.preprocess))
    } else {
        None
    };
    for i in 0..plan.k {
        let split = materialize_fold(table, plan, i)?;
        let prepared = (|| {
            let fitted = match &global {
                Some(Ok(f)) => f.clone(),
                Some(Err(e)) => return Err(Error::invalid(e.to_string())),
                None => fit_pipeline(&split.train, &spec.preprocess)?,
            };
            Ok((
                apply_pipeline(&fitted, &split.train)?,
                apply_pipeline(&fitted, &split.val)?,
                apply_pipeline(&fitted, &split.test)?,
                fitted.n_components(),
            ))
        })();
        let (train, val, test, n_components) = match prepared {
            Ok(p) => p,
            Err(e) => {
                for acc in &mut accs {
                    acc.failures.push(FoldFailure {
                        fold: i,
                        stage: "preprocess".into(),
                        message: e.to_string(),
                    });
                }
                continue;
            }
        };
        let ctx = FitContext {
            baselines: &spec.baselines,
            nn: &spec.nn,
            gbt: &spec.gbt,
            tap: spec.nn.tap,
            seed: rng::derive_seed(spec.seed, &[0xF01D, i as u64]),
            val: Some(&val),
        };
        let mut cnn_cache: Option<CachedCnn> = None;
        let y_test = test.label_indices();
        for (m, &method) in methods.iter().enumerate() {
            let fitted = fit_with_cache(method, &train, &ctx, &mut cnn_cache);
            let (model, seconds) = match fitted {
                Ok(f) => f,
                Err(e) => {
                    accs[m].failures.push(FoldFailure {
                        fold: i,
                        stage: "train".into(),
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            let evaluated =
                baselines::predict_baseline(&model, &test).and_then(|(scores, pred)| {
                    let cm = confusion_matrix(&y_test, &pred)?;
                    Ok((scores, cm, metrics_from_cm(&cm)?))
                });
            match evaluated {
                Ok((scores, cm, mut metrics)) => {
                    metrics.train_seconds = seconds;
                    let acc = &mut accs[m];
                    acc.y_true.extend_from_slice(&y_test);
                    acc.scores.extend(scores);
                    acc.folds.push(FoldReport {
                        fold: i,
                        n_train: train.n_rows(),
                        n_val: val.n_rows(),
                        n_test: test.n_rows(),
                        test_digest: digest(&split.indices.test),
                        n_components,
                        confusion: cm,
                        metrics,
                        val_accuracy: last_val_acc(&model),
                    });
                }
                Err(e) => accs[m].failures.push(FoldFailure {
                    fold: i,
                    stage: "evaluate".into(),
                    message: e.to_string(),
                }),
            }
        }
    }
    methods
        .iter()
        .zip(accs)
        .map(|(&method, acc)| {
            let metrics: Vec<MetricsReport> = acc.folds.iter().map(|f| f.metrics.clone()).collect();
            let mut pooled = ConfusionMatrix::default();
            acc.folds.iter().for_each(|f| pooled.add(&f.confusion));
            let pr_curves = if acc.y_true.is_empty() {
                Vec::new()
            } else {
                (0..N_CLASSES)
                    .map(|c| pr_curve(&acc.y_true, &acc.scores, c, spec.pr_thresholds))
                    .collect::<Result<_>>()?
            };
            Ok(CvReport {
                method,
                dpi: table.dpi().day(),
                k: plan.k,
                seed: spec.seed,
                n_rows: table.n_rows(),
                mean: MetricsReport::mean(&metrics),
                folds: acc.folds,
                failures: acc.failures,
                pooled_confusion: pooled,
                pr_curves,
                spec: PipelineSpec {
                    method,
                    ..spec.clone()
                },
            })
        })
        .collect()
}

fn fit_with_cache(
    method: BaselineMethod,
    train: &FeatureTable,
    ctx: &FitContext<'_>,
    cache: &mut Option<CachedCnn>,
) -> Result<(BaselineModel, f64)> {
    let start = Instant::now();
    if !matches!(method, BaselineMethod::Cnn | BaselineMethod::Fused) {
        let model = baselines::fit_baseline(method, train, ctx)?;
        return Ok((model, start.elapsed().as_secs_f64()));
    }
    if cache.is_none() {
        // Runs the shared validation (class count etc.) before training.
        let BaselineModel::Cnn { model, history } =
            baselines::fit_baseline(BaselineMethod::Cnn, train, ctx)?
        else {
            unreachable!("cnn fit returns a cnn model")
        };
        *cache = Some(CachedCnn {
            model,
            history,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let cached = cache.as_ref().expect("filled above");
    if method == BaselineMethod::Cnn {
        let model = BaselineModel::Cnn {
            model: cached.model.clone(),
            history: cached.history.clone(),
        };
        return Ok((model, cached.seconds));
    }
    let fuse_start = Instant::now();
    let fused = baselines::fuse(cached.model.clone(), train, ctx.tap, ctx.gbt)?;
    let seconds = cached.seconds + fuse_start.elapsed().as_secs_f64();
    Ok((
        BaselineModel::Fused {
            model: fused,
            history: cached.history.clone(),
        },
        seconds,
    ))
}

/// k-fold cross-validation of `spec.method` on one table.
pub fn cross_validate(table: &FeatureTable, spec: &PipelineSpec) -> Result<CvReport> {
    let plan = stratified_kfold(table, spec.k, spec.seed)?;
    let mut reports = run_methods(table, &plan, &[spec.method], spec)?;
    Ok(reports.pop().expect("one method"))
}

/// Several methods on one table, all on the same folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub dpi: u8,
    pub k: usize,
    pub seed: u64,
    pub reports: Vec<CvReport>,
}

impl ComparisonReport {
    pub fn scrub_timings(&mut self) {
        self.reports.iter_mut().for_each(CvReport::scrub_timings);
    }
}

pub fn compare_methods(
    table: &FeatureTable,
    methods: &[BaselineMethod],
    spec: &PipelineSpec,
) -> Result<ComparisonReport> {
    let plan = stratified_kfold(table, spec.k, spec.seed)?;
    Ok(ComparisonReport {
        dpi: table.dpi().day(),
        k: spec.k,
        seed: spec.seed,
        reports: run_methods(table, &plan, methods, spec)?,
    })
}
