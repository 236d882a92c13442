use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineMethod;
use crate::dataset::{ClassLabel, N_CLASSES};
use crate::error::{Error, Result};
use crate::eval::cv::{ComparisonReport, CvReport};
use crate::eval::metrics::{Averaging, ConfusionMatrix};
use crate::eval::pr::PrCurve;

/// Pretty JSON with object keys in sorted order.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn class_name(c: usize) -> &'static str {
    ClassLabel::from_index(c).map_or("?", ClassLabel::as_str)
}

/// One row of the per-dpi summary; `dpi = None` marks the average row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpiSummary {
    pub dpi: Option<u8>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub train_seconds: f64,
}

/// Per-dpi mean metrics followed by their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table6 {
    pub averaging: Averaging,
    pub rows: Vec<DpiSummary>,
}

impl Table6 {
    pub fn from_reports(reports: &[CvReport], averaging: Averaging) -> Result<Table6> {
        let mut rows = Vec::with_capacity(reports.len() + 1);
        for r in reports {
            let m = r
                .mean
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("dpi {}: every fold failed", r.dpi)))?;
            let a = m.averaged(averaging);
            rows.push(DpiSummary {
                dpi: Some(r.dpi),
                accuracy: m.accuracy,
                precision: a.precision,
                recall: a.recall,
                f1: a.f1,
                train_seconds: m.train_seconds,
            });
        }
        if rows.is_empty() {
            return Err(Error::Empty("per-dpi reports"));
        }
        let n = rows.len() as f64;
        let avg = |g: fn(&DpiSummary) -> f64| rows.iter().map(g).sum::<f64>() / n;
        let average = DpiSummary {
            dpi: None,
            accuracy: avg(|r| r.accuracy),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f1: avg(|r| r.f1),
            train_seconds: avg(|r| r.train_seconds),
        };
        rows.push(average);
        Ok(Table6 { averaging, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dpi,accuracy,precision,recall,f1,train_seconds\n");
        for r in &self.rows {
            let dpi = r.dpi.map_or("average".to_string(), |d| d.to_string());
            let _ = writeln!(
                s,
                "{dpi},{},{},{},{},{}",
                r.accuracy, r.precision, r.recall, r.f1, r.train_seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write(path, &self.to_csv())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub dpi: u8,
    pub method: BaselineMethod,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub train_seconds: f64,
    pub failed_folds: usize,
}

impl ComparisonReport {
    /// Method × {accuracy, precision, recall, f1, train time}; metrics are
    /// NaN for a method whose folds all failed.
    pub fn grid(&self, averaging: Averaging) -> Vec<GridRow> {
        self.reports
            .iter()
            .map(|r| {
                let (acc, a, t) = match &r.mean {
                    Some(m) => (m.accuracy, m.averaged(averaging), m.train_seconds),
                    None => (
                        f64::NAN,
                        crate::eval::Averaged {
                            precision: f64::NAN,
                            recall: f64::NAN,
                            f1: f64::NAN,
                        },
                        f64::NAN,
                    ),
                };
                GridRow {
                    dpi: self.dpi,
                    method: r.method,
                    accuracy: acc,
                    precision: a.precision,
                    recall: a.recall,
                    f1: a.f1,
                    train_seconds: t,
                    failed_folds: r.failures.len(),
                }
            })
            .collect()
    }
}

/// Long-format grid over several dpi:
/// `dpi,method,accuracy,precision,recall,f1,train_seconds,failed_folds`.
pub fn write_comparison_grid(
    path: &Path,
    comparisons: &[ComparisonReport],
    averaging: Averaging,
) -> Result<()> {
    let mut s =
        String::from("dpi,method,accuracy,precision,recall,f1,train_seconds,failed_folds\n");
    for c in comparisons {
        for r in c.grid(averaging) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.dpi,
                r.method,
                r.accuracy,
                r.precision,
                r.recall,
                r.f1,
                r.train_seconds,
                r.failed_folds
            );
        }
    }
    write(path, &s)
}

pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix) -> Result<()> {
    let mut s = String::from("true\\predicted");
    for c in 0..N_CLASSES {
        let _ = write!(s, ",{}", class_name(c));
    }
    s.push('\n');
    for t in 0..N_CLASSES {
        s.push_str(class_name(t));
        for p in 0..N_CLASSES {
            let _ = write!(s, ",{}", cm.counts[t][p]);
        }
        s.push('\n');
    }
    write(path, &s)
}

/// `class,threshold,precision,recall`, one row per curve point.
pub fn write_pr_csv(path: &Path, curves: &[PrCurve]) -> Result<()> {
    let mut s = String::from("class,threshold,precision,recall\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                class_name(c.class),
                p.threshold,
                p.precision,
                p.recall
            );
        }
    }
    write(path, &s)
}

const COLORS: [&str; N_CLASSES] = ["#1f77b4", "#d62728", "#2ca02c"];

/// Precision (y) against recall (x), one polyline per class.
pub fn pr_curves_svg(curves: &[PrCurve], title: &str) -> String {
    let (w, h, m) = (420.0, 360.0, 40.0);
    let x = |r: f64| m + r * (w - 2.0 * m);
    let y = |p: f64| h - m - p * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>",
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        w - 2.0 * m,
        h - 2.0 * m
    );
    for t in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{t}</text>",
            x(t),
            h - m + 14.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t}</text>",
            m - 4.0,
            y(t) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">recall</text>",
        w / 2.0,
        h - 6.0
    );
    let _ = writeln!(s, "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">precision</text>", h / 2.0, h / 2.0);
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[c.class % N_CLASSES];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.recall), y(p.precision)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let ly = m + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\" text-anchor=\"end\">{}</text>",
            w - m - 6.0,
            class_name(c.class)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap with counts, rows = true class.
pub fn confusion_svg(cm: &ConfusionMatrix, title: &str) -> String {
    let cell = 80.0;
    let (ox, oy) = (90.0, 50.0);
    let size = ox + cell * N_CLASSES as f64 + 20.0;
    let max = cm
        .counts
        .iter()
        .flatten()
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">\n",
        oy + cell * N_CLASSES as f64 + 40.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>",
        size / 2.0,
        escape(title)
    );
    for t in 0..N_CLASSES {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            ox - 6.0,
            oy + cell * (t as f64 + 0.5) + 4.0,
            class_name(t)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            ox + cell * (t as f64 + 0.5),
            oy + cell * N_CLASSES as f64 + 16.0,
            class_name(t)
        );
        for p in 0..N_CLASSES {
            let v = cm.counts[t][p];
            let shade = 255 - (200.0 * v as f64 / max).round() as u8;
            let (cx, cy) = (ox + cell * p as f64, oy + cell * t as f64);
            let _ = writeln!(
                s,
                "<rect x=\"{cx}\" y=\"{cy}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"white\"/>"
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v}</text>",
                cx + cell / 2.0,
                cy + cell / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
