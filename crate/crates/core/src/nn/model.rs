use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_column_sums, add_row_bias, gemm, Op, Real};
use crate::nn::optim::OptimizerKind;
use crate::par;
use crate::rng;

/// Rows per forward/backward work unit. Fixed, so gradient sums are reduced
/// in the same order regardless of thread count.
pub(crate) const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// No nonlinearity; used to check gradients on purely linear maps.
    Identity,
}

/// Which activations to export as features for a downstream model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    /// Softmax probabilities.
    #[default]
    Output,
    /// Last hidden dense layer (after activation).
    Penultimate,
}

impl std::str::FromStr for Tap {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "output" => Ok(Tap::Output),
            "penultimate" => Ok(Tap::Penultimate),
            _ => Err(format!(
                "unknown tap {s:?} (expected output or penultimate)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub input_length: usize,
    pub conv_filters: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    pub dense_widths: Vec<usize>,
    pub n_classes: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub tap: Tap,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            input_length: 51,
            conv_filters: vec![64, 128, 256],
            kernel_size: 3,
            stride: 2,
            dense_widths: vec![256, 128, 64],
            n_classes: 3,
            activation: Activation::Relu,
            learning_rate: 0.001,
            epochs: 20,
            batch_size: 1024,
            optimizer: OptimizerKind::Adam,
            tap: Tap::Output,
        }
    }
}

impl CnnConfig {
    /// Dense-only variant with the same head and training settings.
    pub fn mlp(&self) -> CnnConfig {
        CnnConfig {
            conv_filters: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("cnn config: {m}")));
        if self.input_length == 0 {
            return bad("input_length must be positive");
        }
        if !self.conv_filters.is_empty() && (self.kernel_size == 0 || self.stride == 0) {
            return bad("kernel_size and stride must be positive");
        }
        if self
            .conv_filters
            .iter()
            .chain(&self.dense_widths)
            .any(|&w| w == 0)
        {
            return bad("filter counts and dense widths must be positive");
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        Ok(())
    }
}

/// Stride-`s` convolution with "same" padding: `out_len = ceil(in_len / s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Conv1d<T: Real> {
    pub in_len: usize,
    pub out_len: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    /// `(kernel · in_ch) × out_ch`, tap-major then input channel.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv1d<T> {
    fn new(in_len: usize, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let out_len = in_len.div_ceil(stride);
        let pad_total = ((out_len - 1) * stride + kernel).saturating_sub(in_len);
        Conv1d {
            in_len,
            out_len,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad_left: pad_total / 2,
            weight: vec![T::zero(); kernel * in_ch * out_ch],
            bias: vec![T::zero(); out_ch],
        }
    }

    fn patch(&self) -> usize {
        self.kernel * self.in_ch
    }

    /// Writes the `(rows · out_len) × patch` patch matrix of `x` into `cols`.
    fn im2col(&self, x: &[T], rows: usize, cols: &mut Vec<T>) {
        let (c, patch) = (self.in_ch, self.patch());
        cols.resize(rows * self.out_len * patch, T::zero());
        for b in 0..rows {
            let xb = &x[b * self.in_len * c..(b + 1) * self.in_len * c];
            for o in 0..self.out_len {
                let dst = &mut cols[(b * self.out_len + o) * patch..][..patch];
                for k in 0..self.kernel {
                    let pos = (o * self.stride + k) as isize - self.pad_left as isize;
                    let tap = &mut dst[k * c..(k + 1) * c];
                    if pos >= 0 && (pos as usize) < self.in_len {
                        let p = pos as usize;
                        tap.copy_from_slice(&xb[p * c..(p + 1) * c]);
                    } else {
                        tap.fill(T::zero());
                    }
                }
            }
        }
    }

    /// Scatters patch gradients back onto the input layout, into `dx`.
    fn col2im(&self, dcols: &[T], rows: usize, dx: &mut Vec<T>) {
        let (c, patch) = (self.in_ch, self.patch());
        dx.clear();
        dx.resize(rows * self.in_len * c, T::zero());
        for b in 0..rows {
            let dxb = &mut dx[b * self.in_len * c..(b + 1) * self.in_len * c];
            for o in 0..self.out_len {
                let src = &dcols[(b * self.out_len + o) * patch..][..patch];
                for k in 0..self.kernel {
                    let pos = (o * self.stride + k) as isize - self.pad_left as isize;
                    if pos >= 0 && (pos as usize) < self.in_len {
                        let p = pos as usize;
                        for (d, &s) in dxb[p * c..(p + 1) * c]
                            .iter_mut()
                            .zip(&src[k * c..(k + 1) * c])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Dense<T: Real> {
    pub n_in: usize,
    pub n_out: usize,
    /// `n_in × n_out`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", bound = "")]
pub enum Layer<T: Real> {
    Conv(Conv1d<T>),
    Dense(Dense<T>),
}

impl<T: Real> Layer<T> {
    pub fn in_size(&self) -> usize {
        match self {
            Layer::Conv(c) => c.in_len * c.in_ch,
            Layer::Dense(d) => d.n_in,
        }
    }

    pub fn out_size(&self) -> usize {
        match self {
            Layer::Conv(c) => c.out_len * c.out_ch,
            Layer::Dense(d) => d.n_out,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            Layer::Conv(c) => c.patch(),
            Layer::Dense(d) => d.n_in,
        }
    }

    fn weight(&self) -> &[T] {
        match self {
            Layer::Conv(c) => &c.weight,
            Layer::Dense(d) => &d.weight,
        }
    }

    fn bias(&self) -> &[T] {
        match self {
            Layer::Conv(c) => &c.bias,
            Layer::Dense(d) => &d.bias,
        }
    }

    fn tensors_mut(&mut self) -> (&mut Vec<T>, &mut Vec<T>) {
        match self {
            Layer::Conv(c) => (&mut c.weight, &mut c.bias),
            Layer::Dense(d) => (&mut d.weight, &mut d.bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CnnModel<T: Real = f32> {
    pub config: CnnConfig,
    pub seed: u64,
    pub layers: Vec<Layer<T>>,
}

/// Builds the layer stack and draws He-uniform weights
/// (`U(±√(6 / fan_in))`) from `seed`; biases start at zero.
pub fn build_cnn<T: Real>(cfg: &CnnConfig, seed: u64) -> Result<CnnModel<T>> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let (mut len, mut ch) = (cfg.input_length, 1);
    for &f in &cfg.conv_filters {
        let conv = Conv1d::new(len, ch, f, cfg.kernel_size, cfg.stride);
        len = conv.out_len;
        ch = f;
        layers.push(Layer::Conv(conv));
    }
    let mut width = len * ch;
    for &n_out in cfg
        .dense_widths
        .iter()
        .chain(std::iter::once(&cfg.n_classes))
    {
        layers.push(Layer::Dense(Dense {
            n_in: width,
            n_out,
            weight: vec![T::zero(); width * n_out],
            bias: vec![T::zero(); n_out],
        }));
        width = n_out;
    }
    for (i, layer) in layers.iter_mut().enumerate() {
        let limit = (6.0 / layer.fan_in() as f64).sqrt();
        let mut r = rng::stream(seed, &[0x1A1E, i as u64]);
        let (w, _) = layer.tensors_mut();
        w.iter_mut()
            .for_each(|v| *v = T::of(r.random_range(-limit..limit)));
    }
    Ok(CnnModel {
        config: cfg.clone(),
        seed,
        layers,
    })
}

/// Output of a forward pass over `rows` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    pub rows: usize,
    /// `rows × n_classes`.
    pub logits: Vec<T>,
    /// `rows × n_classes`, each row on the probability simplex.
    pub probs: Vec<T>,
    /// Output of the last hidden layer, `rows × penultimate_width`.
    pub penultimate: Vec<T>,
    pub penultimate_width: usize,
}

/// Summed gradient of the mean cross-entropy over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient<T> {
    /// One tensor per parameter, ordered as [`CnnModel::params`].
    pub grads: Vec<Vec<T>>,
    /// Mean loss over the batch.
    pub loss: f64,
    pub correct: usize,
}

/// Buffers for one chunk of rows, kept between calls so repeated passes do
/// not fault in fresh memory.
#[derive(Debug, Default)]
struct Scratch<T> {
    rows: usize,
    labels: Vec<usize>,
    /// Input of every layer, then the logits.
    acts: Vec<Vec<T>>,
    /// im2col matrices; unused for dense layers.
    cols: Vec<Vec<T>>,
    delta: Vec<T>,
    spare: Vec<T>,
    grads: Vec<Vec<T>>,
}

/// Reusable per-chunk buffers for [`CnnModel::forward_with`] and
/// [`CnnModel::batch_gradient_with`].
#[derive(Debug, Default)]
pub struct Workspace<T> {
    slots: Vec<Scratch<T>>,
}

impl<T: Real> Workspace<T> {
    pub fn new() -> Self {
        Workspace { slots: Vec::new() }
    }

    /// Runs `job` on chunks `0..n_chunks`, as many at once as there are
    /// worker threads, then passes each result to `sink` in chunk order.
    fn in_waves<R, J, S>(&mut self, n_layers: usize, n_chunks: usize, job: J, mut sink: S)
    where
        R: Send,
        J: Fn(usize, &mut Scratch<T>) -> R + Sync + Send,
        S: FnMut(usize, R, &Scratch<T>),
    {
        let width = par::threads().clamp(1, n_chunks.max(1));
        if self.slots.len() < width {
            self.slots.resize_with(width, Scratch::default);
        }
        for s in &mut self.slots {
            s.acts.resize_with(n_layers + 1, Vec::new);
            s.cols.resize_with(n_layers, Vec::new);
        }
        let mut start = 0;
        while start < n_chunks {
            let n = width.min(n_chunks - start);
            let results = par::map_mut(&mut self.slots[..n], |i, s| job(start + i, s));
            for (i, r) in results.into_iter().enumerate() {
                sink(start + i, r, &self.slots[i]);
            }
            start += n;
        }
    }
}

fn softmax_in_place<T: Real>(values: &mut [T], k: usize) {
    for row in values.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> CnnModel<T> {
    pub fn input_length(&self) -> usize {
        self.config.input_length
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    /// Input size followed by every layer's output size (flattened).
    pub fn shape_chain(&self) -> Vec<usize> {
        std::iter::once(self.input_length())
            .chain(self.layers.iter().map(Layer::out_size))
            .collect()
    }

    /// Sequence length after each conv layer.
    pub fn conv_lengths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.out_len),
                Layer::Dense(_) => None,
            })
            .collect()
    }

    pub fn dense_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some(d.n_out),
                Layer::Conv(_) => None,
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Weight and bias of every layer, in layer order.
    pub fn params(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight(), l.bias()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let (w, b) = l.tensors_mut();
                [w.as_mut_slice(), b.as_mut_slice()]
            })
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let kind = match l {
                    Layer::Conv(_) => "conv",
                    Layer::Dense(_) => "dense",
                };
                [format!("{i}.{kind}.weight"), format!("{i}.{kind}.bias")]
            })
            .collect()
    }

    fn activate(&self, out: &mut [T]) {
        if self.config.activation == Activation::Relu {
            out.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            });
        }
    }

    /// Runs the layers over `s.acts[0]` (`s.rows` samples), filling the
    /// remaining activations.
    fn forward_into(&self, s: &mut Scratch<T>) {
        let rows = s.rows;
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = s.acts.split_at_mut(l + 1);
            let (input, out) = (&head[l], &mut tail[0]);
            out.resize(rows * layer.out_size(), T::zero());
            match layer {
                Layer::Conv(c) => {
                    let col = &mut s.cols[l];
                    c.im2col(input, rows, col);
                    gemm(
                        rows * c.out_len,
                        c.patch(),
                        c.out_ch,
                        col,
                        Op::N,
                        &c.weight,
                        Op::N,
                        T::zero(),
                        out,
                    );
                    add_row_bias(out, &c.bias);
                }
                Layer::Dense(d) => {
                    gemm(
                        rows,
                        d.n_in,
                        d.n_out,
                        input,
                        Op::N,
                        &d.weight,
                        Op::N,
                        T::zero(),
                        out,
                    );
                    add_row_bias(out, &d.bias);
                }
            }
            if l + 1 < n_layers {
                self.activate(out);
            }
        }
    }

    fn check_width(&self, len: usize, rows: usize) -> Result<()> {
        if len != rows * self.input_length() {
            return Err(Error::DimensionMismatch {
                expected: rows * self.input_length(),
                actual: len,
            });
        }
        Ok(())
    }

    /// Forward pass over a row-major `rows × input_length` batch.
    pub fn forward(&self, batch: &[T], rows: usize) -> Result<Forward<T>> {
        self.forward_with(&mut Workspace::new(), batch, rows)
    }

    /// [`forward`](Self::forward) reusing the buffers in `ws`.
    pub fn forward_with(
        &self,
        ws: &mut Workspace<T>,
        batch: &[T],
        rows: usize,
    ) -> Result<Forward<T>> {
        self.check_width(batch.len(), rows)?;
        let k = self.n_classes();
        let n_layers = self.layers.len();
        let pen_width = self.layers[n_layers - 1].in_size();
        let width = self.input_length();
        let mut logits = Vec::with_capacity(rows * k);
        let mut penultimate = Vec::with_capacity(rows * pen_width);
        ws.in_waves(
            n_layers,
            rows.div_ceil(CHUNK_ROWS),
            |c, s| {
                let start = c * CHUNK_ROWS;
                s.rows = CHUNK_ROWS.min(rows - start);
                s.acts[0].clear();
                s.acts[0].extend_from_slice(&batch[start * width..(start + s.rows) * width]);
                self.forward_into(s);
            },
            |_, (), s| {
                logits.extend_from_slice(&s.acts[n_layers]);
                penultimate.extend_from_slice(&s.acts[n_layers - 1]);
            },
        );
        let mut probs = logits.clone();
        softmax_in_place(&mut probs, k);
        Ok(Forward {
            rows,
            logits,
            probs,
            penultimate,
            penultimate_width: pen_width,
        })
    }

    /// Mean cross-entropy and correct count over `rows` of `x`.
    pub fn loss(&self, x: &[T], labels: &[usize]) -> Result<(f64, usize)> {
        let rows = labels.len();
        let f = self.forward(x, rows)?;
        let k = self.n_classes();
        let mut loss = 0.0;
        let mut correct = 0;
        for (i, row) in f.probs.chunks_exact(k).enumerate() {
            let y = labels[i];
            if y >= k {
                return Err(Error::invalid(format!("label {y} outside 0..{k}")));
            }
            loss -= row[y].f64().max(f64::MIN_POSITIVE).ln();
            correct += usize::from(argmax(row) == y);
        }
        Ok((loss / rows.max(1) as f64, correct))
    }

    /// Accumulates the gradient of `scale ·` summed cross-entropy into
    /// `s.grads`, after [`forward_into`](Self::forward_into).
    fn backward_into(&self, s: &mut Scratch<T>, scale: f64) -> (f64, usize) {
        let rows = s.rows;
        let k = self.n_classes();
        let n_layers = self.layers.len();
        if s.grads.len() != 2 * n_layers {
            s.grads = self.zero_grads();
        } else {
            s.grads.iter_mut().for_each(|g| g.fill(T::zero()));
        }
        let mut loss = 0.0;
        let mut correct = 0;
        let sc = T::of(scale);
        let delta = &mut s.delta;
        delta.clear();
        delta.extend_from_slice(&s.acts[n_layers]);
        softmax_in_place(delta, k);
        for (row, &y) in delta.chunks_exact_mut(k).zip(&s.labels) {
            loss -= row[y].f64().max(f64::MIN_POSITIVE).ln();
            correct += usize::from(argmax(row) == y);
            row[y] -= T::one();
            row.iter_mut().for_each(|v| *v *= sc);
        }

        for l in (0..n_layers).rev() {
            if l + 1 < n_layers && self.config.activation == Activation::Relu {
                for (d, &a) in s.delta.iter_mut().zip(&s.acts[l + 1]) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            let input = &s.acts[l];
            let (gw, rest) = s.grads[2 * l..].split_at_mut(1);
            let (gw, gb) = (&mut gw[0], &mut rest[0]);
            match &self.layers[l] {
                Layer::Dense(d) => {
                    gemm(
                        d.n_in,
                        rows,
                        d.n_out,
                        input,
                        Op::T,
                        &s.delta,
                        Op::N,
                        T::one(),
                        gw,
                    );
                    add_column_sums(&s.delta, gb);
                    if l > 0 {
                        s.spare.resize(rows * d.n_in, T::zero());
                        gemm(
                            rows,
                            d.n_out,
                            d.n_in,
                            &s.delta,
                            Op::N,
                            &d.weight,
                            Op::T,
                            T::zero(),
                            &mut s.spare,
                        );
                        std::mem::swap(&mut s.delta, &mut s.spare);
                    }
                }
                Layer::Conv(c) => {
                    let col = &s.cols[l];
                    let m = rows * c.out_len;
                    gemm(
                        c.patch(),
                        m,
                        c.out_ch,
                        col,
                        Op::T,
                        &s.delta,
                        Op::N,
                        T::one(),
                        gw,
                    );
                    add_column_sums(&s.delta, gb);
                    if l > 0 {
                        s.spare.resize(m * c.patch(), T::zero());
                        gemm(
                            m,
                            c.out_ch,
                            c.patch(),
                            &s.delta,
                            Op::N,
                            &c.weight,
                            Op::T,
                            T::zero(),
                            &mut s.spare,
                        );
                        c.col2im(&s.spare, rows, &mut s.delta);
                    }
                }
            }
        }
        (loss, correct)
    }

    fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params()
            .iter()
            .map(|p| vec![T::zero(); p.len()])
            .collect()
    }

    /// Gradient of the mean cross-entropy over the selected rows of `x`
    /// (row-major, `input_length` wide).
    pub fn batch_gradient(
        &self,
        x: &[T],
        labels: &[usize],
        rows: &[usize],
    ) -> Result<BatchGradient<T>> {
        self.batch_gradient_with(&mut Workspace::new(), x, labels, rows)
    }

    /// [`batch_gradient`](Self::batch_gradient) reusing the buffers in `ws`.
    pub fn batch_gradient_with(
        &self,
        ws: &mut Workspace<T>,
        x: &[T],
        labels: &[usize],
        rows: &[usize],
    ) -> Result<BatchGradient<T>> {
        let width = self.input_length();
        if x.len() != labels.len() * width {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * width,
                actual: x.len(),
            });
        }
        if rows.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let k = self.n_classes();
        if let Some(&y) = rows.iter().map(|&r| &labels[r]).find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {y} outside 0..{k}")));
        }
        let scale = 1.0 / rows.len() as f64;
        let mut grads: Vec<Vec<T>> = Vec::new();
        let mut loss = 0.0;
        let mut correct = 0;
        ws.in_waves(
            self.layers.len(),
            rows.len().div_ceil(CHUNK_ROWS),
            |c, s| {
                let idx = &rows[c * CHUNK_ROWS..rows.len().min((c + 1) * CHUNK_ROWS)];
                s.rows = idx.len();
                s.acts[0].clear();
                s.labels.clear();
                for &r in idx {
                    s.acts[0].extend_from_slice(&x[r * width..(r + 1) * width]);
                    s.labels.push(labels[r]);
                }
                self.forward_into(s);
                self.backward_into(s, scale)
            },
            |c, (l, n), s| {
                if c == 0 {
                    grads = s.grads.clone();
                } else {
                    for (acc, part) in grads.iter_mut().zip(&s.grads) {
                        acc.iter_mut().zip(part).for_each(|(a, &p)| *a += p);
                    }
                }
                loss += l;
                correct += n;
            },
        );
        Ok(BatchGradient {
            grads,
            loss: loss * scale,
            correct,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            precision: T::NAME.to_string(),
            shape_chain: self.shape_chain(),
            model: self.clone(),
        };
        fs::write(path, serde_json::to_string(&doc)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ModelFile<T> = serde_json::from_str(&text)?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION || doc.precision != T::NAME {
            return Err(Error::invalid(format!(
                "unsupported model file ({} v{} {})",
                doc.format, doc.version, doc.precision
            )));
        }
        Ok(doc.model)
    }
}

const MODEL_FORMAT: &str = "meaflow-cnn";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct ModelFile<T: Real> {
    format: String,
    version: u32,
    precision: String,
    shape_chain: Vec<usize>,
    model: CnnModel<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor, named as in
    /// [`CnnModel::param_names`].
    pub per_tensor: Vec<(String, f64)>,
    pub n_params: usize,
}

/// Denominator floor for the relative error, so parameters whose true
/// gradient is ~0 are compared in absolute terms.
const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Compares analytic gradients with central differences on every parameter.
pub fn gradient_check(
    model: &CnnModel<f64>,
    x: &[f64],
    labels: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    let rows: Vec<usize> = (0..labels.len()).collect();
    let analytic = model.batch_gradient(x, labels, &rows)?.grads;
    let mut probe = model.clone();
    let names = model.param_names();
    let mut per_tensor = Vec::with_capacity(names.len());
    let mut max_rel_error: f64 = 0.0;
    for (t, name) in names.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..analytic[t].len() {
            let orig = probe.params()[t][i];
            probe.params_mut()[t][i] = orig + eps;
            let (plus, _) = probe.loss(x, labels)?;
            probe.params_mut()[t][i] = orig - eps;
            let (minus, _) = probe.loss(x, labels)?;
            probe.params_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
        }
        max_rel_error = max_rel_error.max(worst);
        per_tensor.push((name, worst));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
        n_params: model.n_params(),
    })
}
