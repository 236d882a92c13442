//! Metrics, precision-recall curves, cross-validation and report assembly.

mod cv;
mod metrics;
mod pr;
mod report;

pub use cv::{
    compare_methods, cross_validate, run_methods, ComparisonReport, CvReport, FoldFailure,
    FoldReport, PipelineSpec,
};
pub use metrics::{
    binary_metrics, confusion_matrix, exact_metrics, metrics_from_cm, Averaged, Averaging,
    BinaryCounts, ClassMetrics, ConfusionMatrix, ExactMetrics, MetricsReport,
};
pub use pr::{pr_curve, PrCurve, PrPoint};
pub use report::{
    confusion_svg, pr_curves_svg, to_canonical_json, write_comparison_grid, write_confusion_csv,
    write_pr_csv, DpiSummary, GridRow, Table6,
};
