//! A small 1-D convolutional network written against plain GEMM kernels.
//!
//! Layout is channels-last throughout: a sample's activation after a conv
//! layer is `[position][channel]`, so flattening is free and every layer is a
//! single matrix product (convolutions go through im2col).

mod model;
mod optim;
mod train;

pub use model::{
    build_cnn, gradient_check, Activation, BatchGradient, CnnConfig, CnnModel, Forward,
    GradCheckReport, Layer, Tap, Workspace,
};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use train::{
    evaluate, extract_embeddings, table_to_real, train_cnn, EpochRecord, TrainHistory,
};
