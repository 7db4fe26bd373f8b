//! Statistic-matching distillation objective.
//!
//! The objective sums a discrepancy between a statistic of the synthetic set
//! and the same statistic of the real set, evaluated at every state of an
//! inner training trajectory, and averages over draws of the initial model.
//! Statistics are recorded on the autodiff graph so the objective can be
//! differentiated with respect to the synthetic inputs, the parameters, or
//! both.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ad::{Graph, Mat, Node};
use crate::data::{SyntheticSet, WeightedDataset};
use crate::models::{self, ArchDescriptor, InitDistribution, ModelState, SgdConfig, WeightedLoss};
use crate::par::{self, Parallelism};
use crate::{ad, math, rng};
use crate::{Error, Result};

/// Longest trajectory that may be differentiated end to end.
pub const MAX_UNROLL_STEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StatisticKind {
    Gradient {
        #[serde(default)]
        layerwise: bool,
    },
    FeatureMean,
    PredictionLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DiscrepancyKind {
    LayerCosine,
    SquaredL2,
    /// Plug-in MMD² with an RBF kernel `exp(-‖p-q‖²/(2σ²))`; `None` picks σ as
    /// the median pairwise distance of the pooled points.
    MmdRbf {
        #[serde(default)]
        bandwidth: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchScope {
    /// Statistics computed class by class, discrepancies summed over classes.
    #[default]
    PerClass,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub stat: StatisticKind,
    pub disc: DiscrepancyKind,
    #[serde(default)]
    pub scope: MatchScope,
}

impl MatchSpec {
    pub fn gradient_matching() -> Self {
        MatchSpec {
            stat: StatisticKind::Gradient { layerwise: true },
            disc: DiscrepancyKind::LayerCosine,
            scope: MatchScope::PerClass,
        }
    }

    pub fn validate(&self, arch: &ArchDescriptor) -> Result<()> {
        if let DiscrepancyKind::MmdRbf { bandwidth: Some(b) } = self.disc {
            if !(b > 0.0) {
                return Err(Error::contract("mmd bandwidth must be positive"));
            }
        }
        if let DiscrepancyKind::MmdRbf { .. } = self.disc {
            let lens = group_block_lens(arch, self.stat);
            if lens.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::contract(
                    "mmd treats statistic blocks as points and needs equal block sizes",
                ));
            }
        }
        Ok(())
    }
}

/// Which dataset drives the inner trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerSet {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub s_inner: InnerSet,
    pub steps: usize,
    pub inner_sgd: SgdConfig,
    #[serde(default)]
    pub init: InitDistribution,
    #[serde(default = "one")]
    pub init_samples: usize,
    /// Differentiate through the synthetic-set trajectory instead of holding
    /// it fixed. Synthetic inner set only, at most [`MAX_UNROLL_STEPS`].
    #[serde(default)]
    pub unroll: bool,
}

fn one() -> usize {
    1
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        self.inner_sgd.validate()?;
        if self.init_samples == 0 {
            return Err(Error::contract("init_samples must be at least 1"));
        }
        if self.unroll && (self.s_inner != InnerSet::Synthetic || self.steps > MAX_UNROLL_STEPS) {
            return Err(Error::contract(alloc::format!(
                "unroll needs the synthetic inner set and at most {MAX_UNROLL_STEPS} steps"
            )));
        }
        Ok(())
    }

    /// Trajectory indices at which statistics are matched: states after each
    /// update `1..=steps`, or the initial state when `steps == 0`.
    pub fn match_points(&self) -> core::ops::RangeInclusive<usize> {
        if self.steps == 0 {
            0..=0
        } else {
            1..=self.steps
        }
    }

    /// Seed of the `k`-th initialization draw.
    pub fn draw_seed(seed: u64, k: usize) -> u64 {
        rng::derive(seed, k as u64)
    }
}

/// A statistic value: one block per (group, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub blocks: Vec<Vec<f64>>,
    pub step: usize,
}

impl Statistic {
    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }

    pub fn same_structure(&self, other: &Statistic) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.len() == b.len())
    }
}

/// Rows that contribute to one statistic group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Class(usize),
    All,
}

impl Group {
    fn contains(self, label: usize) -> bool {
        match self {
            Group::All => true,
            Group::Class(c) => c == label,
        }
    }

    fn index(self) -> usize {
        match self {
            Group::All => 0,
            Group::Class(c) => c,
        }
    }
}

/// Block sizes of a single group's statistic.
pub fn group_block_lens(arch: &ArchDescriptor, stat: StatisticKind) -> Vec<usize> {
    match stat {
        StatisticKind::Gradient { layerwise: true } => arch.slots().iter().map(|s| s.len()).collect(),
        StatisticKind::Gradient { layerwise: false } => vec![arch.num_params()],
        StatisticKind::FeatureMean => vec![arch.feature_dim()],
        StatisticKind::PredictionLoss => vec![1],
    }
}

/// Real-side batch with the multipliers applied to each row's statistic.
#[derive(Debug, Clone)]
pub struct RealBatch<'a> {
    pub x: &'a Mat,
    pub labels: &'a [usize],
    pub coeffs: Vec<f64>,
    pub groups: Vec<Group>,
    /// Weight mass per group slot (class index, or slot 0 for global scope).
    pub norms: Vec<f64>,
}

impl<'a> RealBatch<'a> {
    /// Group masses taken from `weights`; coefficients are `w_i / mass`.
    pub fn renormalized(scope: MatchScope, classes: usize, x: &'a Mat, labels: &'a [usize], weights: &[f64]) -> Self {
        let norms = group_mass(scope, classes, labels, weights);
        Self::with_norms(scope, x, labels, weights, norms)
    }

    /// Coefficients `w_i / norms[group(i)]` with externally fixed masses. Groups
    /// with zero mass are left out of the statistic.
    pub fn with_norms(scope: MatchScope, x: &'a Mat, labels: &'a [usize], weights: &[f64], norms: Vec<f64>) -> Self {
        let groups: Vec<Group> = match scope {
            MatchScope::Global => vec![Group::All],
            MatchScope::PerClass => (0..norms.len()).map(Group::Class).collect(),
        }
        .into_iter()
        .filter(|g| norms[g.index()] > 0.0)
        .collect();
        let coeffs = labels
            .iter()
            .zip(weights)
            .map(|(&y, &w)| {
                let slot = match scope {
                    MatchScope::Global => 0,
                    MatchScope::PerClass => y,
                };
                if norms[slot] > 0.0 {
                    w / norms[slot]
                } else {
                    0.0
                }
            })
            .collect();
        RealBatch {
            x,
            labels,
            coeffs,
            groups,
            norms,
        }
    }

    pub fn slot_of(&self, label: usize) -> usize {
        if self.groups.contains(&Group::All) {
            0
        } else {
            label
        }
    }
}

pub fn group_mass(scope: MatchScope, classes: usize, labels: &[usize], weights: &[f64]) -> Vec<f64> {
    match scope {
        MatchScope::Global => vec![weights.iter().sum()],
        MatchScope::PerClass => {
            let mut m = vec![0.0; classes];
            for (&y, &w) in labels.iter().zip(weights) {
                m[y] += w;
            }
            m
        }
    }
}

/// Uniform synthetic coefficients: `1/ipc` per class, or `1/M` globally.
pub fn synthetic_coeffs(scope: MatchScope, s: &SyntheticSet) -> Vec<f64> {
    let c = match scope {
        MatchScope::PerClass => 1.0 / s.ipc as f64,
        MatchScope::Global => 1.0 / s.len() as f64,
    };
    vec![c; s.len()]
}

/// Records the statistic of `(x, labels)` weighted by `coeffs` for each group.
#[allow(clippy::too_many_arguments)]
pub fn record_statistic(
    g: &mut Graph,
    arch: &ArchDescriptor,
    stat: StatisticKind,
    theta: Node,
    x: Node,
    labels: &[usize],
    coeffs: &[f64],
    groups: &[Group],
) -> Vec<Node> {
    let fwd = arch.forward(g, theta, x);
    let masked = |grp: Group| -> Vec<f64> {
        labels
            .iter()
            .zip(coeffs)
            .map(|(&y, &c)| if grp.contains(y) { c } else { 0.0 })
            .collect()
    };
    let mut blocks = Vec::new();
    for &grp in groups {
        let cw = masked(grp);
        match stat {
            StatisticKind::Gradient { layerwise } => {
                let loss = models::weighted_cross_entropy(g, fwd.logits, labels, &cw);
                let gr = g.grad(loss, &[theta])[0];
                if layerwise {
                    for s in arch.slots() {
                        blocks.push(g.slice(gr, s.offset, 1, s.len()));
                    }
                } else {
                    blocks.push(gr);
                }
            }
            StatisticKind::FeatureMean => {
                let row = g.constant(Mat::row(cw));
                blocks.push(g.matmul(row, fwd.features));
            }
            StatisticKind::PredictionLoss => {
                blocks.push(models::weighted_cross_entropy(g, fwd.logits, labels, &cw));
            }
        }
    }
    blocks
}

/// Diagnostics raised while evaluating a discrepancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiscrepancyDiag {
    /// Blocks whose cosine term was dropped because a side had zero norm.
    pub zero_norm_blocks: usize,
}

/// Pair of points whose distance is the (upper) median pairwise distance, or
/// `None` when that distance is zero or there is a single point.
fn median_pair(points: &[&[f64]]) -> Option<(usize, usize)> {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push((math::norm(&math::sub(points[i], points[j])), i, j));
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (m, i, j) = d[d.len() / 2];
    (m > 0.0).then_some((i, j))
}

/// Records `D(a, b)` on the graph.
pub fn record_discrepancy(
    g: &mut Graph,
    kind: DiscrepancyKind,
    a: &[Node],
    b: &[Node],
    diag: &mut DiscrepancyDiag,
) -> Result<Node> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| g.shape(*x) != g.shape(*y)) {
        return Err(Error::contract("statistics have different block structure"));
    }
    let mut terms = Vec::new();
    match kind {
        DiscrepancyKind::SquaredL2 => {
            for (&x, &y) in a.iter().zip(b) {
                let d = g.sub(x, y);
                terms.push(g.dot(d, d));
            }
        }
        DiscrepancyKind::LayerCosine => {
            for (&x, &y) in a.iter().zip(b) {
                let xx = g.dot(x, x);
                let yy = g.dot(y, y);
                if g.scalar(xx) == 0.0 || g.scalar(yy) == 0.0 {
                    diag.zero_norm_blocks += 1;
                    continue;
                }
                // 1 - cos(x, y) written as half the squared distance of the unit
                // vectors: nonnegative and exactly zero for identical blocks
                let (r, c) = g.shape(x);
                let nx = g.sqrt(xx);
                let ny = g.sqrt(yy);
                let nx = g.broadcast_all(nx, r, c);
                let ny = g.broadcast_all(ny, r, c);
                let ux = g.div(x, nx);
                let uy = g.div(y, ny);
                let d = g.sub(ux, uy);
                let sq = g.dot(d, d);
                terms.push(g.scale(sq, 0.5));
            }
        }
        DiscrepancyKind::MmdRbf { bandwidth } => {
            let len = a.first().map(|n| g.value(*n).len()).unwrap_or(0);
            if a.iter().chain(b).any(|n| g.value(*n).len() != len) {
                return Err(Error::contract("mmd needs equally sized statistic blocks"));
            }
            // -1/(2σ²); a median-heuristic σ stays on the graph so the
            // derivative accounts for it
            let gamma = match bandwidth {
                Some(s) => g.constant_scalar(-1.0 / (2.0 * s * s)),
                None => {
                    let nodes: Vec<Node> = a.iter().chain(b).copied().collect();
                    let vals: Vec<Vec<f64>> = nodes.iter().map(|n| g.value(*n).data.clone()).collect();
                    let refs: Vec<&[f64]> = vals.iter().map(|v| v.as_slice()).collect();
                    match median_pair(&refs) {
                        Some((i, j)) => {
                            let d = g.sub(nodes[i], nodes[j]);
                            let sq = g.dot(d, d);
                            let inv = g.recip(sq);
                            g.scale(inv, -0.5)
                        }
                        None => g.constant_scalar(-0.5),
                    }
                }
            };
            let kernel_mean = |g: &mut Graph, p: &[Node], q: &[Node]| -> Node {
                let mut acc: Option<Node> = None;
                for &u in p {
                    for &v in q {
                        let d = g.sub(u, v);
                        let sq = g.dot(d, d);
                        let s = g.mul(sq, gamma);
                        let k = g.exp(s);
                        acc = Some(match acc {
                            Some(prev) => g.add(prev, k),
                            None => k,
                        });
                    }
                }
                let total = acc.expect("non-empty point sets");
                g.scale(total, 1.0 / (p.len() * q.len()) as f64)
            };
            if a.is_empty() {
                return Ok(g.constant_scalar(0.0));
            }
            let kaa = kernel_mean(g, a, a);
            let kbb = kernel_mean(g, b, b);
            let kab = kernel_mean(g, a, b);
            let kab2 = g.scale(kab, 2.0);
            let s = g.add(kaa, kbb);
            terms.push(g.sub(s, kab2));
        }
    }
    let mut total = match terms.first() {
        Some(t) => *t,
        None => return Ok(g.constant_scalar(0.0)),
    };
    for t in &terms[1..] {
        total = g.add(total, *t);
    }
    Ok(total)
}

/// Discrepancy value with its gradients in both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyEval {
    pub value: f64,
    pub grad_a: Statistic,
    pub grad_b: Statistic,
    pub diag: DiscrepancyDiag,
}

pub fn discrepancy(kind: DiscrepancyKind, a: &Statistic, b: &Statistic) -> Result<DiscrepancyEval> {
    if !a.same_structure(b) {
        return Err(Error::contract("statistics have different block structure"));
    }
    let mut g = Graph::new();
    let an: Vec<Node> = a.blocks.iter().map(|v| g.param(Mat::row(v.clone()))).collect();
    let bn: Vec<Node> = b.blocks.iter().map(|v| g.param(Mat::row(v.clone()))).collect();
    let mut diag = DiscrepancyDiag::default();
    let d = record_discrepancy(&mut g, kind, &an, &bn, &mut diag)?;
    let wrt: Vec<Node> = an.iter().chain(&bn).copied().collect();
    let grads = g.grad(d, &wrt);
    g.check()?;
    let collect = |ns: &[Node]| ns.iter().map(|n| g.value(*n).data.clone()).collect::<Vec<_>>();
    Ok(DiscrepancyEval {
        value: g.scalar(d),
        grad_a: Statistic {
            blocks: collect(&grads[..an.len()]),
            step: a.step,
        },
        grad_b: Statistic {
            blocks: collect(&grads[an.len()..]),
            step: b.step,
        },
        diag,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_statistic(
    arch: &ArchDescriptor,
    stat: StatisticKind,
    theta: &[f64],
    x: &Mat,
    labels: &[usize],
    coeffs: &[f64],
    groups: &[Group],
    step: usize,
) -> Result<Statistic> {
    let mut g = Graph::new();
    let t = g.constant(Mat::row(theta.to_vec()));
    let xn = g.constant(x.clone());
    let blocks = record_statistic(&mut g, arch, stat, t, xn, labels, coeffs, groups);
    g.check()?;
    Ok(Statistic {
        blocks: blocks.iter().map(|n| g.value(*n).data.clone()).collect(),
        step,
    })
}

/// Real statistic over `batch`, with the batch weights renormalized to unit
/// mass (per class under per-class scope).
pub fn stat_real(spec: &MatchSpec, model: &ModelState, ds: &WeightedDataset, batch: &[usize]) -> Result<Statistic> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if batch.iter().any(|&i| i >= ds.len()) {
        return Err(Error::contract("batch index out of range"));
    }
    let x = ds.rows(batch);
    let labels = ds.labels(batch);
    let w: Vec<f64> = batch.iter().map(|&i| ds.w[i]).collect();
    let real = RealBatch::renormalized(spec.scope, ds.class_count, &x, &labels, &w);
    evaluate_statistic(
        &model.arch,
        spec.stat,
        model.theta.as_slice(),
        &x,
        &labels,
        &real.coeffs,
        &real.groups,
        0,
    )
}

/// Synthetic statistic with uniform weights over the synthetic set.
pub fn stat_syn(spec: &MatchSpec, model: &ModelState, s: &SyntheticSet) -> Result<Statistic> {
    let groups = all_groups(spec.scope, s.class_count);
    evaluate_statistic(
        &model.arch,
        spec.stat,
        model.theta.as_slice(),
        &s.x,
        &s.y,
        &synthetic_coeffs(spec.scope, s),
        &groups,
        0,
    )
}

pub fn all_groups(scope: MatchScope, classes: usize) -> Vec<Group> {
    match scope {
        MatchScope::Global => vec![Group::All],
        MatchScope::PerClass => (0..classes).map(Group::Class).collect(),
    }
}

/// Weighted data that drives the inner trajectory.
#[derive(Debug, Clone, Copy)]
pub struct InnerData<'a> {
    pub x: &'a Mat,
    pub labels: &'a [usize],
    pub weights: &'a [f64],
}

/// Parameter states `θ_0..θ_steps` of full-batch SGD on `data` from `θ_0` drawn
/// with `seed`.
pub fn trajectory_on(
    arch: &ArchDescriptor,
    cfg: &TrajectoryConfig,
    data: InnerData<'_>,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let theta0 = models::init_model(arch, cfg.init, seed).theta.0;
    let loss = WeightedLoss::new(arch, data.x, data.labels, data.weights)?;
    let mut states = Vec::with_capacity(cfg.steps + 1);
    let mut theta = theta0;
    let mut v = vec![0.0; theta.len()];
    states.push(theta.clone());
    for _ in 0..cfg.steps {
        let gr = ad::grad(&loss, &theta)?;
        models::sgd_update(&mut theta, &gr, &cfg.inner_sgd, &mut v);
        states.push(theta.clone());
    }
    Ok(states)
}

fn inner_data<'a>(cfg: &TrajectoryConfig, s: &'a SyntheticSet, syn_w: &'a [f64], ds: &'a WeightedDataset, real_w: &'a [f64]) -> InnerData<'a> {
    match cfg.s_inner {
        InnerSet::Synthetic => InnerData {
            x: &s.x,
            labels: &s.y,
            weights: syn_w,
        },
        InnerSet::Real => InnerData {
            x: &ds.x,
            labels: &ds.y,
            weights: real_w,
        },
    }
}

pub fn run_inner_trajectory(
    arch: &ArchDescriptor,
    cfg: &TrajectoryConfig,
    s: &SyntheticSet,
    ds: &WeightedDataset,
    seed: u64,
) -> Result<Vec<ModelState>> {
    cfg.validate()?;
    let syn_w = vec![1.0 / s.len() as f64; s.len()];
    let states = trajectory_on(arch, cfg, inner_data(cfg, s, &syn_w, ds, &ds.w), seed)?;
    Ok(states
        .into_iter()
        .map(|t| ModelState {
            arch: arch.clone(),
            theta: t.into(),
            seed,
        })
        .collect())
}

/// Objective value and its gradient with respect to the synthetic inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    /// Row-major `M x d`.
    pub grad_x: Vec<f64>,
    pub diag: DiscrepancyDiag,
}

/// Discrepancy at a fixed parameter state, differentiated in the synthetic inputs.
fn matched_term(
    arch: &ArchDescriptor,
    spec: &MatchSpec,
    theta: &[f64],
    s: &SyntheticSet,
    real: &RealBatch<'_>,
    want_grad: bool,
) -> Result<(f64, Vec<f64>, DiscrepancyDiag)> {
    let mut g = Graph::new();
    let t = g.constant(Mat::row(theta.to_vec()));
    let xs = if want_grad {
        g.param(s.x.clone())
    } else {
        g.constant(s.x.clone())
    };
    let xr = g.constant(real.x.clone());
    let a = record_statistic(&mut g, arch, spec.stat, t, xs, &s.y, &synthetic_coeffs(spec.scope, s), &real.groups);
    let b = record_statistic(&mut g, arch, spec.stat, t, xr, real.labels, &real.coeffs, &real.groups);
    let mut diag = DiscrepancyDiag::default();
    let d = record_discrepancy(&mut g, spec.disc, &a, &b, &mut diag)?;
    let grad = if want_grad {
        let gx = g.grad(d, &[xs])[0];
        g.value(gx).data.clone()
    } else {
        Vec::new()
    };
    g.check()?;
    Ok((g.scalar(d), grad, diag))
}

/// Unrolled variant: the synthetic-set trajectory is recorded on the graph so
/// the gradient also flows through the parameter updates.
fn unrolled_draw(
    arch: &ArchDescriptor,
    cfg: &TrajectoryConfig,
    spec: &MatchSpec,
    s: &SyntheticSet,
    real: &RealBatch<'_>,
    seed: u64,
) -> Result<(f64, Vec<f64>, DiscrepancyDiag)> {
    let mut g = Graph::new();
    let xs = g.param(s.x.clone());
    let xr = g.constant(real.x.clone());
    let theta0 = models::init_model(arch, cfg.init, seed).theta.0;
    let mut theta = g.constant(Mat::row(theta0));
    let p = arch.num_params();
    let mut vel = g.constant(Mat::zeros(1, p));
    let inner_w = vec![1.0 / s.len() as f64; s.len()];
    let sc = synthetic_coeffs(spec.scope, s);
    let sgd = cfg.inner_sgd;
    let mut diag = DiscrepancyDiag::default();
    let mut total: Option<Node> = None;
    let mut add_term = |g: &mut Graph, theta: Node, diag: &mut DiscrepancyDiag| -> Result<()> {
        let a = record_statistic(g, arch, spec.stat, theta, xs, &s.y, &sc, &real.groups);
        let b = record_statistic(g, arch, spec.stat, theta, xr, real.labels, &real.coeffs, &real.groups);
        let d = record_discrepancy(g, spec.disc, &a, &b, diag)?;
        total = Some(match total {
            Some(t) => g.add(t, d),
            None => d,
        });
        Ok(())
    };
    if cfg.steps == 0 {
        add_term(&mut g, theta, &mut diag)?;
    }
    for _ in 0..cfg.steps {
        let fwd = arch.forward(&mut g, theta, xs);
        let loss = models::weighted_cross_entropy(&mut g, fwd.logits, &s.y, &inner_w);
        let gr = g.grad(loss, &[theta])[0];
        let mv = g.scale(vel, sgd.momentum);
        let mut nv = g.add(mv, gr);
        if sgd.weight_decay != 0.0 {
            let wd = g.scale(theta, sgd.weight_decay);
            nv = g.add(nv, wd);
        }
        vel = nv;
        let step = g.scale(vel, sgd.lr);
        theta = g.sub(theta, step);
        add_term(&mut g, theta, &mut diag)?;
    }
    let total = total.expect("at least one matching point");
    let gx = g.grad(total, &[xs])[0];
    g.check()?;
    Ok((g.scalar(total), g.value(gx).data.clone(), diag))
}

/// Objective over one initialization draw.
#[allow(clippy::too_many_arguments)]
pub(crate) fn objective_draw(
    arch: &ArchDescriptor,
    cfg: &TrajectoryConfig,
    spec: &MatchSpec,
    s: &SyntheticSet,
    real: &RealBatch<'_>,
    inner: InnerData<'_>,
    seed: u64,
    want_grad: bool,
) -> Result<(f64, Vec<f64>, DiscrepancyDiag)> {
    if cfg.unroll {
        return unrolled_draw(arch, cfg, spec, s, real, seed);
    }
    let states = trajectory_on(arch, cfg, inner, seed)?;
    let mut value = 0.0;
    let mut grad = if want_grad { vec![0.0; s.x.len()] } else { Vec::new() };
    let mut diag = DiscrepancyDiag::default();
    for t in cfg.match_points() {
        let (v, gx, dg) = matched_term(arch, spec, &states[t], s, real, want_grad)?;
        value += v;
        if want_grad {
            math::axpy(1.0, &gx, &mut grad);
        }
        diag.zero_norm_blocks += dg.zero_norm_blocks;
    }
    Ok((value, grad, diag))
}

/// Monte-Carlo objective over `cfg.init_samples` draws, reduced in draw order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn objective_with(
    arch: &ArchDescriptor,
    cfg: &TrajectoryConfig,
    spec: &MatchSpec,
    s: &SyntheticSet,
    real: &RealBatch<'_>,
    inner: InnerData<'_>,
    seed: u64,
    want_grad: bool,
    par: Parallelism,
) -> Result<ObjectiveEval> {
    let draws: Vec<usize> = (0..cfg.init_samples).collect();
    let results = par::try_map(par, &draws, |&k| {
        objective_draw(arch, cfg, spec, s, real, inner, TrajectoryConfig::draw_seed(seed, k), want_grad)
    })?;
    let inv = 1.0 / cfg.init_samples as f64;
    let mut out = ObjectiveEval {
        value: 0.0,
        grad_x: if want_grad { vec![0.0; s.x.len()] } else { Vec::new() },
        diag: DiscrepancyDiag::default(),
    };
    for (v, gx, dg) in results {
        out.value += inv * v;
        if want_grad {
            math::axpy(inv, &gx, &mut out.grad_x);
        }
        out.diag.zero_norm_blocks += dg.zero_norm_blocks;
    }
    Ok(out)
}

/// The distillation objective `M(S; D)` and its gradient in the synthetic inputs.
pub fn objective(
    s: &SyntheticSet,
    ds: &WeightedDataset,
    arch: &ArchDescriptor,
    cfg: &TrajectoryConfig,
    spec: &MatchSpec,
    seed: u64,
) -> Result<ObjectiveEval> {
    objective_par(s, ds, arch, cfg, spec, seed, Parallelism::Threads)
}

pub fn objective_par(
    s: &SyntheticSet,
    ds: &WeightedDataset,
    arch: &ArchDescriptor,
    cfg: &TrajectoryConfig,
    spec: &MatchSpec,
    seed: u64,
    par: Parallelism,
) -> Result<ObjectiveEval> {
    cfg.validate()?;
    spec.validate(arch)?;
    if s.dim() != ds.dim() || s.class_count != ds.class_count {
        return Err(Error::contract("synthetic and real sets disagree in shape"));
    }
    let real = RealBatch::renormalized(spec.scope, ds.class_count, &ds.x, &ds.y, &ds.w);
    let syn_w = vec![1.0 / s.len() as f64; s.len()];
    let inner = inner_data(cfg, s, &syn_w, ds, &ds.w);
    objective_with(arch, cfg, spec, s, &real, inner, seed, true, par)
}

/// Per-step matching quantities shared by the influence estimators.
#[derive(Debug, Clone)]
pub(crate) struct StepQuantities {
    pub theta: Vec<f64>,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

pub(crate) fn step_quantities(
    arch: &ArchDescriptor,
    spec: &MatchSpec,
    theta: &[f64],
    s: &SyntheticSet,
    real: &RealBatch<'_>,
) -> Result<StepQuantities> {
    let a = evaluate_statistic(arch, spec.stat, theta, &s.x, &s.y, &synthetic_coeffs(spec.scope, s), &real.groups, 0)?;
    let b = evaluate_statistic(arch, spec.stat, theta, real.x, real.labels, &real.coeffs, &real.groups, 0)?;
    let d = discrepancy(spec.disc, &a, &b)?;
    Ok(StepQuantities {
        theta: theta.to_vec(),
        grad_a: d.grad_a.flat(),
        grad_b: d.grad_b.flat(),
    })
}

/// `∇_θ [⟨Φ_syn(θ), u⟩ + ⟨Φ_real(θ), v⟩]`, i.e. `J_synᵀu + J_realᵀv`.
pub(crate) fn statistic_vjp(
    arch: &ArchDescriptor,
    spec: &MatchSpec,
    theta: &[f64],
    s: &SyntheticSet,
    real: &RealBatch<'_>,
    u: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let t = g.param(Mat::row(theta.to_vec()));
    let xs = g.constant(s.x.clone());
    let xr = g.constant(real.x.clone());
    let a = record_statistic(&mut g, arch, spec.stat, t, xs, &s.y, &synthetic_coeffs(spec.scope, s), &real.groups);
    let b = record_statistic(&mut g, arch, spec.stat, t, xr, real.labels, &real.coeffs, &real.groups);
    let mut acc: Option<Node> = None;
    let mut off = 0;
    for (&an, &bn) in a.iter().zip(&b) {
        let len = g.value(an).len();
        let (r, c) = g.shape(an);
        let uc = g.constant(Mat::new(r, c, u[off..off + len].to_vec()));
        let vc = g.constant(Mat::new(r, c, v[off..off + len].to_vec()));
        let su = g.dot(an, uc);
        let sv = g.dot(bn, vc);
        let s2 = g.add(su, sv);
        acc = Some(match acc {
            Some(p) => g.add(p, s2),
            None => s2,
        });
        off += len;
    }
    let Some(total) = acc else {
        return Ok(vec![0.0; theta.len()]);
    };
    let gr = g.grad(total, &[t])[0];
    g.check()?;
    Ok(g.value(gr).data.clone())
}

/// Single-instance statistic `φ(z; θ)` for one group's block layout.
pub(crate) fn instance_statistic(
    arch: &ArchDescriptor,
    stat: StatisticKind,
    theta: &[f64],
    x: &[f64],
    label: usize,
) -> Result<Vec<f64>> {
    let xm = Mat::new(1, x.len(), x.to_vec());
    let s = evaluate_statistic(arch, stat, theta, &xm, &[label], &[1.0], &[Group::All], 0)?;
    Ok(s.flat())
}
