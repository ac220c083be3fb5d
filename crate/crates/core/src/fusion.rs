//! Additive–subtractive fusion and the two-layer prediction head.
//!
//! The merged vector is `[f + f̂ ; f − f̂]`. The head is
//! `relu(W1·x + b1)` followed by `W2·h + b2`; the first `m` outputs are class
//! logits (softmax), and in fully supervised mode the next `4m` outputs are
//! the per-class box offsets `dx, dy, dw, dh`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CenError, Result};
use crate::geometry::BoundingBox;
use crate::tensorops::FeatureVector;

/// Width of the first fully connected layer.
pub const DEFAULT_HIDDEN: usize = 512;

/// `[f + f̂ ; f − f̂]`.
pub fn fuse(f: &FeatureVector, f_hat: &FeatureVector) -> Result<FeatureVector> {
    if f.len() != f_hat.len() {
        return Err(CenError::ShapeMismatch(format!("cannot fuse vectors of length {} and {}", f.len(), f_hat.len())));
    }
    let mut out = Vec::with_capacity(2 * f.len());
    out.extend(f.data.iter().zip(&f_hat.data).map(|(a, b)| a + b));
    out.extend(f.data.iter().zip(&f_hat.data).map(|(a, b)| a - b));
    Ok(FeatureVector::new(out))
}

/// Recovers `(f, f̂)` from a fused vector.
pub fn unfuse(merged: &FeatureVector) -> Result<(FeatureVector, FeatureVector)> {
    if !merged.len().is_multiple_of(2) {
        return Err(CenError::ShapeMismatch(format!("fused vector has odd length {}", merged.len())));
    }
    let (sum, diff) = merged.data.split_at(merged.len() / 2);
    let f = sum.iter().zip(diff).map(|(s, d)| (s + d) / 2.0).collect();
    let f_hat = sum.iter().zip(diff).map(|(s, d)| (s - d) / 2.0).collect();
    Ok((FeatureVector::new(f), FeatureVector::new(f_hat)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    FullySupervised,
    WeaklySupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub num_classes: usize,
    /// Length of the vector fed to the first layer.
    pub input_len: usize,
    pub hidden: usize,
    pub mode: HeadMode,
}

impl HeadConfig {
    pub fn new(num_classes: usize, input_len: usize, hidden: usize, mode: HeadMode) -> Result<Self> {
        if num_classes == 0 || input_len == 0 || hidden == 0 {
            return Err(CenError::InvalidParameter(format!(
                "head dimensions must be positive (m={num_classes}, input={input_len}, hidden={hidden})"
            )));
        }
        Ok(Self { num_classes, input_len, hidden, mode })
    }

    /// Head over fused features built from pooled vectors of `feature_len`.
    pub fn fused(num_classes: usize, feature_len: usize, mode: HeadMode) -> Result<Self> {
        Self::new(num_classes, 2 * feature_len, DEFAULT_HIDDEN, mode)
    }

    pub fn output_len(&self) -> usize {
        match self.mode {
            HeadMode::FullySupervised => 5 * self.num_classes,
            HeadMode::WeaklySupervised => self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadWeights {
    pub fn zeros(config: &HeadConfig) -> Self {
        Self {
            w1: Array2::zeros((config.hidden, config.input_len)),
            b1: Array1::zeros(config.hidden),
            w2: Array2::zeros((config.output_len(), config.hidden)),
            b2: Array1::zeros(config.output_len()),
        }
    }

    /// Uniform in `±1/√fan_in` per layer, deterministic in `seed`.
    pub fn init(config: &HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let w = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound));
            let b = Array1::from_shape_simple_fn(rows, || rng.gen_range(-bound..=bound));
            (w, b)
        };
        let (w1, b1) = layer(config.hidden, config.input_len);
        let (w2, b2) = layer(config.output_len(), config.hidden);
        Self { w1, b1, w2, b2 }
    }

    /// Checks the tensors against `config` and for finiteness.
    pub fn check(&self, config: &HeadConfig) -> Result<()> {
        let expect = [
            ("W1", self.w1.dim(), (config.hidden, config.input_len)),
            ("b1", (self.b1.len(), 1), (config.hidden, 1)),
            ("W2", self.w2.dim(), (config.output_len(), config.hidden)),
            ("b2", (self.b2.len(), 1), (config.output_len(), 1)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(CenError::ShapeMismatch(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        let all = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(CenError::InvalidParameter("non-finite head weight".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub probs: Vec<f64>,
    /// Per-class offsets; empty in weakly supervised mode.
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub dw: Vec<f64>,
    pub dh: Vec<f64>,
}

impl HeadOutput {
    /// `(index, probability)` of the most likely class, lowest index on ties.
    pub fn best_class(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (j, &p) in self.probs.iter().enumerate() {
            if p > best.1 {
                best = (j, p);
            }
        }
        best
    }
}

fn check_input(merged: &[f64], config: &HeadConfig) -> Result<()> {
    if merged.len() != config.input_len {
        return Err(CenError::ShapeMismatch(format!(
            "head input has length {}, expected {}",
            merged.len(),
            config.input_len
        )));
    }
    Ok(())
}

fn softmax(logits: ArrayView1<f64>) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

struct Forward {
    pre: Array1<f64>,
    hidden: Array1<f64>,
    raw: Array1<f64>,
}

fn forward(x: ArrayView1<f64>, w: &HeadWeights) -> Forward {
    let pre = w.w1.dot(&x) + &w.b1;
    let hidden = pre.mapv(|v| v.max(0.0));
    let raw = w.w2.dot(&hidden) + &w.b2;
    Forward { pre, hidden, raw }
}

fn split_output(raw: &Array1<f64>, config: &HeadConfig) -> HeadOutput {
    let m = config.num_classes;
    let probs = softmax(raw.slice(s![..m]));
    let part = |k: usize| match config.mode {
        HeadMode::FullySupervised => raw.slice(s![m * k..m * (k + 1)]).to_vec(),
        HeadMode::WeaklySupervised => Vec::new(),
    };
    HeadOutput { probs, dx: part(1), dy: part(2), dw: part(3), dh: part(4) }
}

pub fn head_forward(merged: &FeatureVector, weights: &HeadWeights, config: &HeadConfig) -> Result<HeadOutput> {
    check_input(&merged.data, config)?;
    weights.check(config)?;
    let fwd = forward(ArrayView1::from(&merged.data), weights);
    Ok(split_output(&fwd.raw, config))
}

/// Gradient of a scalar loss with respect to the head output.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadUpstream {
    /// `∂L/∂probs` and, in fully supervised mode, `∂L/∂(dx, dy, dw, dh)`
    /// laid out as `4m` values in that order (empty when absent).
    Output { d_probs: Vec<f64>, d_offsets: Vec<f64> },
    /// Softmax cross-entropy against `label`, plus optional offset gradients.
    CrossEntropy { label: Label, d_offsets: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub input: Array1<f64>,
}

/// Reverse-mode gradients of the head for a single input.
pub fn head_backward(
    merged: &FeatureVector,
    weights: &HeadWeights,
    config: &HeadConfig,
    upstream: &HeadUpstream,
) -> Result<HeadGrads> {
    check_input(&merged.data, config)?;
    weights.check(config)?;
    let m = config.num_classes;
    let x = ArrayView1::from(&merged.data);
    let fwd = forward(x, weights);
    let probs = softmax(fwd.raw.slice(s![..m]));
    let mut d_raw = Array1::zeros(config.output_len());
    let d_offsets = match upstream {
        HeadUpstream::Output { d_probs, d_offsets } => {
            if d_probs.len() != m {
                return Err(CenError::ShapeMismatch(format!(
                    "probability gradient has length {}, expected {m}",
                    d_probs.len()
                )));
            }
            let inner: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
            for j in 0..m {
                d_raw[j] = probs[j] * (d_probs[j] - inner);
            }
            d_offsets
        }
        HeadUpstream::CrossEntropy { label, d_offsets } => {
            let target = label.target(m)?;
            for j in 0..m {
                d_raw[j] = probs[j] - target[j];
            }
            d_offsets
        }
    };
    if !d_offsets.is_empty() {
        if config.mode != HeadMode::FullySupervised || d_offsets.len() != 4 * m {
            return Err(CenError::ShapeMismatch(format!(
                "offset gradient of length {} does not fit a {:?} head with {m} classes",
                d_offsets.len(),
                config.mode
            )));
        }
        d_raw.slice_mut(s![m..]).assign(&ArrayView1::from(d_offsets));
    }
    let d_w2 = outer(&d_raw, &fwd.hidden);
    let d_hidden = weights.w2.t().dot(&d_raw);
    let d_pre = &d_hidden * &fwd.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let d_w1 = outer(&d_pre, &x.to_owned());
    let d_input = weights.w1.t().dot(&d_pre);
    Ok(HeadGrads { w1: d_w1, b1: d_pre, w2: d_w2, b2: d_raw, input: d_input })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Box update from the offsets of the most likely class.
///
/// Returns the refined box, the 1-based class id and its probability.
pub fn apply_offsets(b: &BoundingBox, out: &HeadOutput) -> Result<(BoundingBox, u32, f64)> {
    let (j, p) = out.best_class();
    if out.dx.len() != out.probs.len() {
        return Err(CenError::ShapeMismatch("head output carries no box offsets".into()));
    }
    let refined = BoundingBox {
        x: b.w * out.dx[j] + b.x,
        y: b.h * out.dy[j] + b.y,
        w: b.w * out.dw[j].exp(),
        h: b.h * out.dh[j].exp(),
    };
    Ok((refined, j as u32 + 1, p))
}

/// Training label for one proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    /// 1-based disease class.
    Disease(u32),
    /// Proposal matching no lesion; trained towards the uniform distribution.
    Background,
}

impl Label {
    fn target(&self, m: usize) -> Result<Vec<f64>> {
        match *self {
            Label::Disease(c) if c >= 1 && (c as usize) <= m => {
                let mut t = vec![0.0; m];
                t[c as usize - 1] = 1.0;
                Ok(t)
            }
            Label::Disease(c) => Err(CenError::InvalidParameter(format!("class {c} outside 1..={m}"))),
            Label::Background => Ok(vec![1.0 / m as f64; m]),
        }
    }
}

/// One training example. Without `f_hat` the head sees the proposal
/// features alone.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub f: FeatureVector,
    pub f_hat: Option<FeatureVector>,
    pub label: Label,
    /// Regression targets `(dx, dy, dw, dh)` for disease examples.
    pub offsets: Option<[f64; 4]>,
}

impl TrainingExample {
    pub fn input(&self) -> Result<FeatureVector> {
        match &self.f_hat {
            Some(fh) => fuse(&self.f, fh),
            None => Ok(self.f.clone()),
        }
    }
}

/// Regression targets that map `proposal` onto `target` under [`apply_offsets`].
pub fn offset_targets(proposal: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    [
        (target.x - proposal.x) / proposal.w,
        (target.y - proposal.y) / proposal.h,
        (target.w / proposal.w).ln(),
        (target.h / proposal.h).ln(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Heavy-ball momentum; 0 gives plain gradient descent.
    pub momentum: f64,
    /// Weight of the smooth-L1 offset loss.
    pub offset_weight: f64,
    pub seed: u64,
    /// Start from zero weights instead of the seeded uniform init.
    pub zero_init: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 0.1, momentum: 0.0, offset_weight: 1.0, seed: 0, zero_init: false }
    }
}

fn smooth_l1(v: f64) -> (f64, f64) {
    if v.abs() < 1.0 {
        (0.5 * v * v, v)
    } else {
        (v.abs() - 0.5, v.signum())
    }
}

/// Batched design matrix, targets and offset masks.
struct Batch {
    x: Array2<f64>,
    targets: Array2<f64>,
    /// Per example: class index and offsets when regression applies.
    regress: Vec<Option<(usize, [f64; 4])>>,
}

fn build_batch(data: &[TrainingExample], config: &HeadConfig) -> Result<Batch> {
    let m = config.num_classes;
    let mut x = Array2::zeros((data.len(), config.input_len));
    let mut targets = Array2::zeros((data.len(), m));
    let mut regress = Vec::with_capacity(data.len());
    for (i, ex) in data.iter().enumerate() {
        let input = ex.input()?;
        check_input(&input.data, config)?;
        x.row_mut(i).assign(&ArrayView1::from(&input.data));
        targets.row_mut(i).assign(&Array1::from(ex.label.target(m)?));
        regress.push(match (ex.label, ex.offsets, config.mode) {
            (Label::Disease(c), Some(o), HeadMode::FullySupervised) => Some((c as usize - 1, o)),
            _ => None,
        });
    }
    Ok(Batch { x, targets, regress })
}

struct BatchGrads {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

/// Mean loss and its gradients over the whole batch.
fn batch_loss(batch: &Batch, w: &HeadWeights, config: &HeadConfig, offset_weight: f64) -> (f64, BatchGrads) {
    let n = batch.x.nrows() as f64;
    let m = config.num_classes;
    let pre = batch.x.dot(&w.w1.t()) + &w.b1;
    let hidden = pre.mapv(|v| v.max(0.0));
    let raw = hidden.dot(&w.w2.t()) + &w.b2;
    let mut d_raw = Array2::zeros(raw.raw_dim());
    let mut loss = 0.0;
    for (i, row) in raw.outer_iter().enumerate() {
        let probs = softmax(row.slice(s![..m]));
        for j in 0..m {
            let t = batch.targets[[i, j]];
            if t > 0.0 {
                loss -= t * probs[j].max(1e-300).ln();
            }
            d_raw[[i, j]] = (probs[j] - t) / n;
        }
        if let Some((c, target)) = batch.regress[i] {
            for (k, tv) in target.iter().enumerate() {
                let col = m * (k + 1) + c;
                let (l, g) = smooth_l1(row[col] - tv);
                loss += offset_weight * l;
                d_raw[[i, col]] = offset_weight * g / n;
            }
        }
    }
    let d_w2 = d_raw.t().dot(&hidden);
    let d_b2 = d_raw.sum_axis(Axis(0));
    let mut d_pre = d_raw.dot(&w.w2);
    d_pre.zip_mut_with(&pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0
        }
    });
    let d_w1 = d_pre.t().dot(&batch.x);
    let d_b1 = d_pre.sum_axis(Axis(0));
    (loss / n, BatchGrads { w1: d_w1, b1: d_b1, w2: d_w2, b2: d_b2 })
}

/// Full-batch training outcome.
#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub weights: HeadWeights,
    /// Loss before each update; entry 0 is the loss at initialization.
    pub losses: Vec<f64>,
}

impl TrainedHead {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Full-batch gradient descent on softmax cross-entropy, plus smooth-L1 on
/// the true class's offsets in fully supervised mode.
pub fn train_head(data: &[TrainingExample], config: &HeadConfig, params: &TrainParams) -> Result<TrainedHead> {
    if data.is_empty() {
        return Err(CenError::EmptyDataset);
    }
    if !(params.learning_rate > 0.0) {
        return Err(CenError::InvalidParameter(format!(
            "learning rate must be positive, got {}",
            params.learning_rate
        )));
    }
    let batch = build_batch(data, config)?;
    let mut w = if params.zero_init { HeadWeights::zeros(config) } else { HeadWeights::init(config, params.seed) };
    let mut velocity: Option<BatchGrads> = None;
    let mut losses = Vec::with_capacity(params.epochs + 1);
    for epoch in 0..=params.epochs {
        let (loss, g) = batch_loss(&batch, &w, config, params.offset_weight);
        if !loss.is_finite() {
            return Err(CenError::Diverged { epoch, loss });
        }
        losses.push(loss);
        if epoch == params.epochs {
            break;
        }
        let step = match velocity.take() {
            Some(mut v) if params.momentum > 0.0 => {
                let mu = params.momentum;
                v.w1 = v.w1 * mu + &g.w1;
                v.b1 = v.b1 * mu + &g.b1;
                v.w2 = v.w2 * mu + &g.w2;
                v.b2 = v.b2 * mu + &g.b2;
                v
            }
            _ => g,
        };
        let lr = params.learning_rate;
        w.w1.scaled_add(-lr, &step.w1);
        w.b1.scaled_add(-lr, &step.b1);
        w.w2.scaled_add(-lr, &step.w2);
        w.b2.scaled_add(-lr, &step.b2);
        if params.momentum > 0.0 {
            velocity = Some(step);
        }
    }
    Ok(TrainedHead { weights: w, losses })
}
