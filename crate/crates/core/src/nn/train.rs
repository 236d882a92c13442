use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureTable;
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::nn::model::{argmax, CnnModel, Tap, Workspace};
use crate::nn::optim::{optimizer_step, OptimizerState};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `NaN` when no validation table was given.
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    /// CSV with header `epoch,train_loss,train_acc,val_acc,seconds`.
    /// With `timings = false` every duration is written as 0.
    pub fn write_csv(&self, path: &Path, timings: bool) -> Result<()> {
        let mut out = String::from("epoch,train_loss,train_acc,val_acc,seconds\n");
        for e in &self.epochs {
            let secs = if timings { e.seconds } else { 0.0 };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_acc, secs
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Copies a table's features into the network precision.
pub fn table_to_real<T: Real>(table: &FeatureTable) -> Vec<T> {
    table.features().iter().map(|&v| T::of(v)).collect()
}

fn check_input<T: Real>(model: &CnnModel<T>, table: &FeatureTable) -> Result<()> {
    if table.n_features() != model.input_length() {
        return Err(Error::DimensionMismatch {
            expected: model.input_length(),
            actual: table.n_features(),
        });
    }
    Ok(())
}

/// Mean cross-entropy and accuracy on a table.
pub fn evaluate<T: Real>(model: &CnnModel<T>, table: &FeatureTable) -> Result<(f64, f64)> {
    check_input(model, table)?;
    if table.is_empty() {
        return Err(Error::Empty("evaluation table"));
    }
    let (loss, correct) = model.loss(&table_to_real::<T>(table), &table.label_indices())?;
    Ok((loss, correct as f64 / table.n_rows() as f64))
}

/// Mini-batch training with the optimizer, learning rate, batch size and
/// epoch count from the model's config. Rows are reshuffled every epoch from
/// a stream derived from `seed`.
pub fn train_cnn<T: Real>(
    model: &mut CnnModel<T>,
    train: &FeatureTable,
    val: Option<&FeatureTable>,
    seed: u64,
) -> Result<TrainHistory> {
    check_input(model, train)?;
    if let Some(v) = val {
        check_input(model, v)?;
    }
    if train.is_empty() {
        return Err(Error::Empty("training table"));
    }
    let cfg = model.config.clone();
    let x = table_to_real::<T>(train);
    let y = train.label_indices();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut opt = OptimizerState::new(cfg.optimizer, &sizes);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.n_rows()).collect();
    let mut ws = Workspace::new();
    let val = val
        .filter(|v| !v.is_empty())
        .map(|v| (table_to_real::<T>(v), v.label_indices()));
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng::stream(seed, &[0xE90C, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let g = model.batch_gradient_with(&mut ws, &x, &y, batch)?;
            loss_sum += g.loss * batch.len() as f64;
            correct += g.correct;
            optimizer_step(
                &mut opt,
                &mut model.params_mut(),
                &g.grads,
                cfg.learning_rate,
            )?;
        }
        let val_acc = match &val {
            Some((vx, vy)) => {
                let f = model.forward_with(&mut ws, vx, vy.len())?;
                let k = model.n_classes();
                let hits = f
                    .probs
                    .chunks_exact(k)
                    .zip(vy)
                    .filter(|(p, &y)| argmax(p) == y)
                    .count();
                hits as f64 / vy.len() as f64
            }
            None => f64::NAN,
        };
        let n = train.n_rows() as f64;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

/// Activations at `tap` for every row, as a new table with the same labels.
/// Columns are `cnn_p01..` for probabilities and `cnn_h01..` for the last
/// hidden layer.
pub fn extract_embeddings<T: Real>(
    model: &CnnModel<T>,
    table: &FeatureTable,
    tap: Tap,
) -> Result<FeatureTable> {
    check_input(model, table)?;
    let f = model.forward(&table_to_real::<T>(table), table.n_rows())?;
    let (prefix, width, values) = match tap {
        Tap::Output => ("cnn_p", model.n_classes(), f.probs),
        Tap::Penultimate => ("cnn_h", f.penultimate_width, f.penultimate),
    };
    let values = values.into_iter().map(Real::f64).collect();
    FeatureTable::with_prefix(prefix, width, values, table.labels().to_vec(), table.dpi())
}
