//! Small classifiers over flat parameter vectors, their losses, and the SGD
//! stepper used both for inner trajectories and for evaluation training.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::ad::{self, Graph, Mat, Node, ScalarFunction, NONE};
use crate::math;
use crate::rng;
use crate::{Error, Result};

/// Output channels of the tinyconv convolution.
pub const CONV_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Linear,
    Mlp,
    TinyConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub kind: ArchKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub activation: Activation,
    /// `(height, width)` of single-channel inputs; tinyconv only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<(usize, usize)>,
}

/// Location of one weight or bias tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSlot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub fan_in: usize,
    pub bias: bool,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl ArchDescriptor {
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        ArchDescriptor {
            kind: ArchKind::Linear,
            input_dim,
            hidden: Vec::new(),
            classes,
            activation: Activation::Relu,
            image: None,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        ArchDescriptor {
            kind: ArchKind::Mlp,
            input_dim,
            hidden: hidden.to_vec(),
            classes,
            activation: Activation::Relu,
            image: None,
        }
    }

    pub fn tinyconv(height: usize, width: usize, classes: usize) -> Self {
        ArchDescriptor {
            kind: ArchKind::TinyConv,
            input_dim: height * width,
            hidden: Vec::new(),
            classes,
            activation: Activation::Relu,
            image: Some((height, width)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("architecture needs at least 2 classes"));
        }
        if self.input_dim == 0 {
            return Err(Error::contract("input_dim must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::contract("hidden layer widths must be positive"));
        }
        match self.kind {
            ArchKind::Linear if !self.hidden.is_empty() => {
                Err(Error::contract("linear model takes no hidden layers"))
            }
            ArchKind::Mlp if self.hidden.is_empty() => {
                Err(Error::contract("mlp needs at least one hidden layer"))
            }
            ArchKind::TinyConv => match self.image {
                Some((h, w)) if h * w == self.input_dim && h > 0 && w > 0 => Ok(()),
                _ => Err(Error::contract("tinyconv needs an image shape matching input_dim")),
            },
            _ => Ok(()),
        }
    }

    /// Weight/bias tensors in parameter order.
    pub fn slots(&self) -> Vec<TensorSlot> {
        let mut dims: Vec<(usize, usize)> = Vec::new();
        match self.kind {
            ArchKind::Linear => dims.push((self.input_dim, self.classes)),
            ArchKind::Mlp => {
                let mut prev = self.input_dim;
                for &h in &self.hidden {
                    dims.push((prev, h));
                    prev = h;
                }
                dims.push((prev, self.classes));
            }
            ArchKind::TinyConv => {
                dims.push((9, CONV_CHANNELS));
                dims.push((CONV_CHANNELS, self.classes));
            }
        }
        let mut out = Vec::with_capacity(dims.len() * 2);
        let mut offset = 0;
        for (fan_in, fan_out) in dims {
            out.push(TensorSlot {
                offset,
                rows: fan_in,
                cols: fan_out,
                fan_in,
                bias: false,
            });
            offset += fan_in * fan_out;
            out.push(TensorSlot {
                offset,
                rows: 1,
                cols: fan_out,
                fan_in,
                bias: true,
            });
            offset += fan_out;
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.slots().iter().map(|s| s.len()).sum()
    }

    /// Width of the penultimate representation.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            ArchKind::Linear => self.input_dim,
            ArchKind::Mlp => *self.hidden.last().unwrap_or(&self.input_dim),
            ArchKind::TinyConv => CONV_CHANNELS,
        }
    }

    /// Records the forward pass of `x` (`n x input_dim`) under `theta` (`1 x P`).
    pub fn forward(&self, g: &mut Graph, theta: Node, x: Node) -> Forward {
        let slots = self.slots();
        let tensors: Vec<Node> = slots
            .iter()
            .map(|s| g.slice(theta, s.offset, s.rows, s.cols))
            .collect();
        let mut tensors = tensors.into_iter();
        let mut next = || tensors.next().expect("slot count matches architecture");
        let features = match self.kind {
            ArchKind::Linear => x,
            ArchKind::Mlp => {
                let mut h = x;
                for _ in &self.hidden {
                    let (w, b) = (next(), next());
                    let z = g.matmul(h, w);
                    let z = g.add_row(z, b);
                    h = g.relu(z);
                }
                h
            }
            ArchKind::TinyConv => {
                let (height, width) = self.image.expect("validated tinyconv");
                let n = g.shape(x).0;
                let (w, b) = (next(), next());
                let patches = g.gather(x, im2col_index(n, height, width), n * height * width, 9);
                let z = g.matmul(patches, w);
                let z = g.add_row(z, b);
                let a = g.relu(z);
                let per_image = height * width * CONV_CHANNELS;
                let flat = g.slice(a, 0, n, per_image);
                let pool = g.constant(pool_matrix(height * width));
                g.matmul(flat, pool)
            }
        };
        let (w, b) = (next(), next());
        let z = g.matmul(features, w);
        let logits = g.add_row(z, b);
        Forward { features, logits }
    }
}

/// Node handles produced by [`ArchDescriptor::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub features: Node,
    pub logits: Node,
}

// 3x3 same-padded patches; row (i*H*W + r*W + c), column (dr*3 + dc).
fn im2col_index(n: usize, h: usize, w: usize) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(n * h * w * 9);
    for i in 0..n {
        for r in 0..h {
            for c in 0..w {
                for dr in 0..3 {
                    for dc in 0..3 {
                        let (rr, cc) = (r as isize + dr - 1, c as isize + dc - 1);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            idx.push(NONE);
                        } else {
                            idx.push((i * h * w + rr as usize * w + cc as usize) as u32);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

fn pool_matrix(positions: usize) -> Mat {
    let mut m = Mat::zeros(positions * CONV_CHANNELS, CONV_CHANNELS);
    let inv = 1.0 / positions as f64;
    for p in 0..positions {
        for ch in 0..CONV_CHANNELS {
            m.data[(p * CONV_CHANNELS + ch) * CONV_CHANNELS + ch] = inv;
        }
    }
    m
}

/// `-Σ_i coeffs[i] · log softmax(logits_i)[labels[i]]`.
pub fn weighted_cross_entropy(g: &mut Graph, logits: Node, labels: &[usize], coeffs: &[f64]) -> Node {
    let (n, c) = g.shape(logits);
    assert_eq!(n, labels.len());
    assert_eq!(n, coeffs.len());
    let mut pick = Mat::zeros(n, c);
    for (i, (&y, &w)) in labels.iter().zip(coeffs).enumerate() {
        pick.data[i * c + y] = w;
    }
    let ls = g.log_softmax_rows(logits);
    let pick = g.constant(pick);
    let s = g.dot(ls, pick);
    g.neg(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: ArchDescriptor,
    pub theta: ad::ParamVector,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitDistribution {
    /// Weights `U(±sqrt(6/fan_in))`, biases `U(±1/sqrt(fan_in))`.
    #[default]
    KaimingUniform,
    Normal { sigma: f64 },
}


pub fn init_model(arch: &ArchDescriptor, dist: InitDistribution, seed: u64) -> ModelState {
    let mut r = rng::stream(seed, rng::INIT);
    let mut theta = vec![0.0; arch.num_params()];
    match dist {
        InitDistribution::KaimingUniform => {
            for slot in arch.slots() {
                let fan_in = slot.fan_in.max(1) as f64;
                let bound = if slot.bias {
                    1.0 / math::sqrt(fan_in)
                } else {
                    math::sqrt(6.0 / fan_in)
                };
                let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                for v in &mut theta[slot.range()] {
                    *v = u.sample(&mut r);
                }
            }
        }
        InitDistribution::Normal { sigma } => {
            if sigma > 0.0 {
                let nd = Normal::new(0.0, sigma).expect("finite sigma");
                for v in &mut theta {
                    *v = nd.sample(&mut r);
                }
            }
        }
    }
    ModelState {
        arch: arch.clone(),
        theta: theta.into(),
        seed,
    }
}

/// Weighted training loss `Σ_i w_i ℓ(θ; x_i, y_i)` as a function of θ.
pub struct WeightedLoss<'a> {
    pub arch: &'a ArchDescriptor,
    pub x: &'a Mat,
    pub labels: &'a [usize],
    pub weights: &'a [f64],
}

impl<'a> WeightedLoss<'a> {
    pub fn new(arch: &'a ArchDescriptor, x: &'a Mat, labels: &'a [usize], weights: &'a [f64]) -> Result<Self> {
        if x.rows != labels.len() || x.rows != weights.len() {
            return Err(Error::contract(alloc::format!(
                "batch sizes disagree: {} inputs, {} labels, {} weights",
                x.rows,
                labels.len(),
                weights.len()
            )));
        }
        if x.cols != arch.input_dim {
            return Err(Error::contract("input width does not match architecture"));
        }
        if labels.iter().any(|&y| y >= arch.classes) {
            return Err(Error::contract("label out of range for architecture"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::contract("instance weights must be non-negative"));
        }
        Ok(WeightedLoss {
            arch,
            x,
            labels,
            weights,
        })
    }
}

impl ScalarFunction for WeightedLoss<'_> {
    fn dim(&self) -> usize {
        self.arch.num_params()
    }

    fn build(&self, g: &mut Graph, theta: Node) -> Node {
        let x = g.constant(self.x.clone());
        let f = self.arch.forward(g, theta, x);
        weighted_cross_entropy(g, f.logits, self.labels, self.weights)
    }
}

/// Training loss plus `(l2/2)·‖θ‖²`.
pub struct Regularized<F> {
    pub inner: F,
    pub l2: f64,
}

impl<F: ScalarFunction> ScalarFunction for Regularized<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn build(&self, g: &mut Graph, theta: Node) -> Node {
        let l = self.inner.build(g, theta);
        if self.l2 == 0.0 {
            return l;
        }
        let sq = g.dot(theta, theta);
        let r = g.scale(sq, 0.5 * self.l2);
        g.add(l, r)
    }
}

pub fn weighted_loss(model: &ModelState, x: &Mat, labels: &[usize], weights: &[f64]) -> Result<f64> {
    let f = WeightedLoss::new(&model.arch, x, labels, weights)?;
    ad::eval(&f, model.theta.as_slice())
}

/// Mean loss; the uniform-weight case of [`weighted_loss`].
pub fn mean_loss(model: &ModelState, x: &Mat, labels: &[usize]) -> Result<f64> {
    let w = vec![1.0 / labels.len() as f64; labels.len()];
    weighted_loss(model, x, labels, &w)
}

pub fn logits(model: &ModelState, x: &Mat) -> Mat {
    let mut g = Graph::new();
    let t = g.constant(Mat::row(model.theta.0.clone()));
    let xn = g.constant(x.clone());
    let f = model.arch.forward(&mut g, t, xn);
    g.value(f.logits).clone()
}

pub fn predict(model: &ModelState, x: &Mat) -> Vec<usize> {
    let l = logits(model, x);
    (0..l.rows)
        .map(|i| {
            let row = &l.data[i * l.cols..(i + 1) * l.cols];
            // first maximal index
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(model: &ModelState, x: &Mat, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predict(model, x).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn vanilla(lr: f64) -> Self {
        SgdConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    /// Momentum 0.9 and weight decay 5e-4, the from-scratch evaluation recipe.
    pub fn evaluation(lr: f64) -> Self {
        SgdConfig {
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::contract("sgd lr must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract("sgd momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::contract("sgd weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// In-place step: `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`.
pub fn sgd_update(theta: &mut [f64], grad: &[f64], cfg: &SgdConfig, velocity: &mut [f64]) {
    for ((t, g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *t;
        *t -= cfg.lr * *v;
    }
}

pub fn sgd_step(
    model: &ModelState,
    grad: &[f64],
    cfg: &SgdConfig,
    velocity: &[f64],
) -> Result<(ModelState, Vec<f64>)> {
    let dim = model.theta.dim();
    if grad.len() != dim || velocity.len() != dim {
        return Err(Error::contract("sgd_step dimension mismatch"));
    }
    let mut next = model.clone();
    let mut v = velocity.to_vec();
    sgd_update(&mut next.theta.0, grad, cfg, &mut v);
    Ok((next, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum TrainMethod {
    /// Full-batch SGD; `l2` acts as weight decay.
    Sgd { lr: f64, momentum: f64, steps: usize },
    /// Damped Newton iterations with a dense Hessian; small models only.
    Newton { iterations: usize, tol: f64 },
}

/// Deterministic trainer for `Σ w_i ℓ_i + (l2/2)‖θ‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    #[serde(flatten)]
    pub method: TrainMethod,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub init: InitDistribution,
}

pub fn train(
    arch: &ArchDescriptor,
    cfg: &TrainerConfig,
    x: &Mat,
    labels: &[usize],
    weights: &[f64],
    seed: u64,
) -> Result<ModelState> {
    let mut model = init_model(arch, cfg.init, seed);
    let loss = WeightedLoss::new(arch, x, labels, weights)?;
    match cfg.method {
        TrainMethod::Sgd { lr, momentum, steps } => {
            let sgd = SgdConfig {
                lr,
                momentum,
                weight_decay: cfg.l2,
            };
            sgd.validate()?;
            let mut v = vec![0.0; model.theta.dim()];
            for _ in 0..steps {
                let g = ad::grad(&loss, model.theta.as_slice())?;
                sgd_update(&mut model.theta.0, &g, &sgd, &mut v);
            }
        }
        TrainMethod::Newton { iterations, tol } => {
            let f = Regularized { inner: loss, l2: cfg.l2 };
            for it in 0..iterations {
                let (val, g) = ad::value_and_grad(&f, model.theta.as_slice())?;
                if math::norm(&g) <= tol {
                    break;
                }
                let h = ad::hessian(&f, model.theta.as_slice())?;
                let step = crate::linalg::solve_columns(h, &g)?;
                // backtracking keeps the iteration monotone on flat logistic tails
                let mut alpha = 1.0;
                loop {
                    let cand: Vec<f64> = model
                        .theta
                        .0
                        .iter()
                        .zip(&step)
                        .map(|(t, s)| t - alpha * s)
                        .collect();
                    let cv = ad::eval(&f, &cand)?;
                    if cv <= val || alpha < 1e-8 {
                        model.theta.0 = cand;
                        break;
                    }
                    alpha *= 0.5;
                }
                if it + 1 == iterations {
                    break;
                }
            }
        }
    }
    Ok(model)
}

/// Shuffled index permutation from the given stream.
pub(crate) fn permutation(n: usize, r: &mut rng::Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
