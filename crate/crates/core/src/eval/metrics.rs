use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::dataset::N_CLASSES;
use crate::error::{Error, Result};

const K: usize = N_CLASSES;

type Q = Ratio<i128>;

/// `counts[t][p]`: rows of true class `t` predicted as `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..K).map(|c| self.counts[c][c]).sum()
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        (0..K).map(|t| self.counts[t][c]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for t in 0..K {
            for p in 0..K {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    /// One-vs-rest counts for class `c`.
    pub fn binary(&self, c: usize) -> BinaryCounts {
        let tp = self.counts[c][c];
        let fp = self.predicted(c) - tp;
        let fn_ = self.support(c) - tp;
        BinaryCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            actual: y_pred.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= K || p >= K {
            return Err(Error::invalid(format!(
                "label pair ({t}, {p}) outside 0..{K}"
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn q(n: u64, d: u64) -> Q {
    if d == 0 {
        Q::zero()
    } else {
        Q::new(n as i128, d as i128)
    }
}

/// Accuracy, precision, recall and F1 of binary counts, exactly.
/// Zero denominators give 0.
pub fn binary_metrics(c: BinaryCounts) -> [Q; 4] {
    let acc = q(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_);
    let p = q(c.tp, c.tp + c.fp);
    let r = q(c.tp, c.tp + c.fn_);
    let f1 = if (p + r).is_zero() {
        Q::zero()
    } else {
        Q::from_integer(2) * p * r / (p + r)
    };
    [acc, p, r, f1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Per-class values weighted by true-class support.
    #[default]
    Weighted,
    Macro,
    /// Pooled counts; precision = recall = F1 = accuracy.
    Micro,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Averaging::Weighted),
            "macro" => Ok(Averaging::Macro),
            "micro" => Ok(Averaging::Micro),
            _ => Err(Error::invalid(format!("unknown averaging {s:?}"))),
        }
    }
}

/// Metrics in exact rational form.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMetrics {
    pub accuracy: Q,
    /// `[precision, recall, f1]` per class, one-vs-rest.
    pub per_class: [[Q; 3]; K],
    pub per_class_accuracy: [Q; K],
    pub weighted: [Q; 3],
    pub macro_avg: [Q; 3],
    pub micro: [Q; 3],
}

pub fn exact_metrics(cm: &ConfusionMatrix) -> Result<ExactMetrics> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let mut per_class = [[Q::zero(); 3]; K];
    let mut per_class_accuracy = [Q::zero(); K];
    let mut weighted = [Q::zero(); 3];
    let mut macro_avg = [Q::zero(); 3];
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for c in 0..K {
        let b = cm.binary(c);
        let [acc, p, r, f1] = binary_metrics(b);
        per_class[c] = [p, r, f1];
        per_class_accuracy[c] = acc;
        let w = q(cm.support(c), n);
        for m in 0..3 {
            weighted[m] += w * per_class[c][m];
            macro_avg[m] += per_class[c][m] / Q::from_integer(K as i128);
        }
        tp += b.tp;
        fp += b.fp;
        fn_ += b.fn_;
    }
    let [_, mp, mr, mf] = binary_metrics(BinaryCounts { tp, tn: 0, fp, fn_ });
    Ok(ExactMetrics {
        accuracy: q(cm.correct(), n),
        per_class,
        per_class_accuracy,
        weighted,
        macro_avg,
        micro: [mp, mr, mf],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Averaged {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub weighted: Averaged,
    #[serde(rename = "macro")]
    pub macro_avg: Averaged,
    pub micro: Averaged,
    pub per_class: Vec<ClassMetrics>,
    pub train_seconds: f64,
}

fn f(x: Q) -> f64 {
    x.to_f64().expect("finite ratio")
}

fn averaged(v: [Q; 3]) -> Averaged {
    Averaged {
        precision: f(v[0]),
        recall: f(v[1]),
        f1: f(v[2]),
    }
}

/// All averaging modes at once; pick one with [`MetricsReport::averaged`].
pub fn metrics_from_cm(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let e = exact_metrics(cm)?;
    Ok(MetricsReport {
        accuracy: f(e.accuracy),
        weighted: averaged(e.weighted),
        macro_avg: averaged(e.macro_avg),
        micro: averaged(e.micro),
        per_class: (0..K)
            .map(|c| ClassMetrics {
                accuracy: f(e.per_class_accuracy[c]),
                precision: f(e.per_class[c][0]),
                recall: f(e.per_class[c][1]),
                f1: f(e.per_class[c][2]),
                support: cm.support(c),
            })
            .collect(),
        train_seconds: 0.0,
    })
}

impl MetricsReport {
    pub fn averaged(&self, mode: Averaging) -> Averaged {
        match mode {
            Averaging::Weighted => self.weighted,
            Averaging::Macro => self.macro_avg,
            Averaging::Micro => self.micro,
        }
    }

    /// Field-wise arithmetic mean. Supports are summed.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let n = reports.len();
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        let avg = |g: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(g).sum::<f64>() / nf;
        let avg_mode = |m: Averaging| Averaged {
            precision: avg(&|r| r.averaged(m).precision),
            recall: avg(&|r| r.averaged(m).recall),
            f1: avg(&|r| r.averaged(m).f1),
        };
        let k = reports[0].per_class.len();
        Some(MetricsReport {
            accuracy: avg(&|r| r.accuracy),
            weighted: avg_mode(Averaging::Weighted),
            macro_avg: avg_mode(Averaging::Macro),
            micro: avg_mode(Averaging::Micro),
            per_class: (0..k)
                .map(|c| ClassMetrics {
                    accuracy: avg(&|r| r.per_class[c].accuracy),
                    precision: avg(&|r| r.per_class[c].precision),
                    recall: avg(&|r| r.per_class[c].recall),
                    f1: avg(&|r| r.per_class[c].f1),
                    support: reports.iter().map(|r| r.per_class[c].support).sum(),
                })
                .collect(),
            train_seconds: avg(&|r| r.train_seconds),
        })
    }
}
