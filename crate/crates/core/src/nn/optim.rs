use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;

/// Update rules. Hyperparameters follow the common Keras defaults, except
/// Adam's epsilon which is 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Nadam,
    Adadelta,
    Adamax,
    Adagrad,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::Sgd,
        OptimizerKind::Rmsprop,
        OptimizerKind::Nadam,
        OptimizerKind::Adadelta,
        OptimizerKind::Adamax,
        OptimizerKind::Adagrad,
        OptimizerKind::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Nadam => "nadam",
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::Adamax => "adamax",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown optimizer {s:?}"))
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EPS: f64 = 1e-7;
const RMS_RHO: f64 = 0.9;
const ADADELTA_RHO: f64 = 0.95;
const ADAGRAD_INIT: f64 = 0.1;

/// Per-tensor moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let init = if kind == OptimizerKind::Adagrad {
            ADAGRAD_INIT
        } else {
            0.0
        };
        OptimizerState {
            kind,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::of(init); n]).collect(),
        }
    }
}

/// Applies one update in place. Rejects non-finite gradients before touching
/// any parameter or state.
pub fn optimizer_step<T: Real>(
    state: &mut OptimizerState<T>,
    params: &mut [&mut [T]],
    grads: &[Vec<T>],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::DimensionMismatch {
            expected: state.first.len(),
            actual: grads.len(),
        });
    }
    for (t, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || g.len() != state.first[t].len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                actual: g.len(),
            });
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: format!("param[{t}]"),
                index: i,
                value: g[i].f64(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let kind = state.kind;
    let c = |v: f64| T::of(v);
    let lr_t = c(lr);
    let one = T::one();
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        match kind {
            OptimizerKind::Sgd => {
                for (p, &g) in p.iter_mut().zip(g) {
                    *p -= lr_t * g;
                }
            }
            OptimizerKind::Rmsprop => {
                let (rho, eps) = (c(RMS_RHO), c(EPS));
                for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = rho * *v + (one - rho) * g * g;
                    *p -= lr_t * g / (v.sqrt() + eps);
                }
            }
            OptimizerKind::Adagrad => {
                let eps = c(EPS);
                for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v += g * g;
                    *p -= lr_t * g / (v.sqrt() + eps);
                }
            }
            OptimizerKind::Adadelta => {
                // second: running E[g²]; first: running E[Δx²].
                let (rho, eps) = (c(ADADELTA_RHO), c(EPS));
                for (((p, &g), v), m) in p.iter_mut().zip(g).zip(v.iter_mut()).zip(m.iter_mut()) {
                    *v = rho * *v + (one - rho) * g * g;
                    let dx = (*m + eps).sqrt() / (*v + eps).sqrt() * g;
                    *m = rho * *m + (one - rho) * dx * dx;
                    *p -= lr_t * dx;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (c(BETA1), c(BETA2), c(ADAM_EPS));
                let bc1 = c(1.0 - BETA1.powi(t));
                let bc2 = c(1.0 - BETA2.powi(t));
                for (((p, &g), v), m) in p.iter_mut().zip(g).zip(v.iter_mut()).zip(m.iter_mut()) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= lr_t * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                }
            }
            OptimizerKind::Adamax => {
                let (b1, b2, eps) = (c(BETA1), c(BETA2), c(EPS));
                let step = c(lr / (1.0 - BETA1.powi(t)));
                for (((p, &g), u), m) in p.iter_mut().zip(g).zip(v.iter_mut()).zip(m.iter_mut()) {
                    *m = b1 * *m + (one - b1) * g;
                    *u = (b2 * *u).max(g.abs());
                    *p -= step * *m / (*u + eps);
                }
            }
            OptimizerKind::Nadam => {
                let (b1, b2, eps) = (c(BETA1), c(BETA2), c(EPS));
                let bc1_next = c(1.0 - BETA1.powi(t + 1));
                let bc1 = c(1.0 - BETA1.powi(t));
                let bc2 = c(1.0 - BETA2.powi(t));
                for (((p, &g), v), m) in p.iter_mut().zip(g).zip(v.iter_mut()).zip(m.iter_mut()) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = b1 * *m / bc1_next + (one - b1) * g / bc1;
                    *p -= lr_t * m_hat / ((*v / bc2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = OptimizerState::<f64>::new(OptimizerKind::Adam, &[2]);
        let mut p = vec![1.0, -1.0];
        optimizer_step(&mut s, &mut [p.as_mut_slice()], &[vec![0.5, -2.0]], 0.01).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn rejects_nan_without_mutating() {
        let mut s = OptimizerState::<f32>::new(OptimizerKind::Sgd, &[1, 1]);
        let mut a = vec![1.0f32];
        let mut b = vec![2.0f32];
        let err = optimizer_step(
            &mut s,
            &mut [&mut a, &mut b],
            &[vec![0.1], vec![f32::NAN]],
            0.1,
        );
        assert!(matches!(
            err,
            Err(Error::NonFiniteGradient { index: 0, .. })
        ));
        assert_eq!((a[0], b[0], s.step), (1.0, 2.0, 0));
    }

    #[test]
    fn names_round_trip() {
        for k in OptimizerKind::ALL {
            assert_eq!(k.name().parse::<OptimizerKind>().unwrap(), k);
        }
    }
}
