use serde::{Deserialize, Serialize};

use crate::dataset::N_CLASSES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One class's curve, thresholds descending (so recall is non-decreasing
/// along `points`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: usize,
    pub positives: usize,
    /// Set when the class has no positive rows; `points` is then empty.
    pub empty: bool,
    pub points: Vec<PrPoint>,
}

/// Sweeps the distinct scores of class `c` as thresholds (predict `c` iff
/// `score ≥ threshold`). When there are more than `n_thresholds` distinct
/// scores, evenly spaced ranks are kept, always including the highest and
/// lowest.
pub fn pr_curve(
    y_true: &[usize],
    scores: &[f64],
    class: usize,
    n_thresholds: usize,
) -> Result<PrCurve> {
    if scores.len() != y_true.len() * N_CLASSES {
        return Err(Error::DimensionMismatch {
            expected: y_true.len() * N_CLASSES,
            actual: scores.len(),
        });
    }
    if class >= N_CLASSES || n_thresholds < 2 {
        return Err(Error::invalid(
            "pr_curve needs a valid class and n_thresholds >= 2",
        ));
    }
    let positives = y_true.iter().filter(|&&y| y == class).count();
    if positives == 0 {
        return Ok(PrCurve {
            class,
            positives,
            empty: true,
            points: Vec::new(),
        });
    }
    let mut pairs: Vec<(f64, bool)> = y_true
        .iter()
        .enumerate()
        .map(|(i, &y)| (scores[i * N_CLASSES + class], y == class))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // (threshold, tp, predicted) at every distinct score
    let mut steps: Vec<(f64, usize, usize)> = Vec::new();
    let mut tp = 0;
    for (i, &(s, pos)) in pairs.iter().enumerate() {
        tp += usize::from(pos);
        if i + 1 == pairs.len() || pairs[i + 1].0 != s {
            steps.push((s, tp, i + 1));
        }
    }
    let m = steps.len();
    let keep: Vec<usize> = if m <= n_thresholds {
        (0..m).collect()
    } else {
        let mut idx: Vec<usize> = (0..n_thresholds)
            .map(|i| ((i as f64) * (m - 1) as f64 / (n_thresholds - 1) as f64).round() as usize)
            .collect();
        idx.dedup();
        idx
    };
    let points = keep
        .into_iter()
        .map(|i| {
            let (t, tp, pred) = steps[i];
            PrPoint {
                threshold: t,
                precision: tp as f64 / pred as f64,
                recall: tp as f64 / positives as f64,
            }
        })
        .collect();
    Ok(PrCurve {
        class,
        positives,
        empty: false,
        points,
    })
}
