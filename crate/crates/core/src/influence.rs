//! Influence scores: inverse-HVP solvers, the classical influence function with
//! its leave-one-out oracle, and the influence of each real instance on the
//! distillation objective split into an explicit part (through the real-side
//! statistic) and an implicit part (through the inner trajectory).
//!
//! Sign convention: a positive score means upweighting the instance increases
//! the metric or objective.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ad::{self, Graph, Mat, Node, ScalarFunction};
use crate::data::{SyntheticSet, WeightedDataset};
use crate::matching::{
    self, Group, InnerData, InnerSet, MatchSpec, RealBatch, TrajectoryConfig,
};
use crate::models::{self, ArchDescriptor, ModelState, TrainerConfig, WeightedLoss};
use crate::par::{self, Parallelism};
use crate::{linalg, math};
use crate::{Error, Result};

/// Largest system the dense oracle will assemble.
pub const DENSE_MAX_DIM: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    #[default]
    Cg,
    Lissa,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LissaConfig {
    /// Must exceed the largest eigenvalue of the damped operator.
    pub scale: f64,
    pub depth: usize,
    pub repeats: usize,
}

impl Default for LissaConfig {
    fn default() -> Self {
        LissaConfig {
            scale: 10.0,
            depth: 100,
            repeats: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HvpSolverConfig {
    pub method: SolverMethod,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub lissa: LissaConfig,
}

impl Default for HvpSolverConfig {
    fn default() -> Self {
        HvpSolverConfig {
            method: SolverMethod::Cg,
            damping: 0.01,
            tol: 1e-10,
            max_iter: 1000,
            lissa: LissaConfig::default(),
        }
    }
}

impl HvpSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::contract("solver damping must be finite and non-negative"));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::contract("solver tol and max_iter must be positive"));
        }
        if self.method == SolverMethod::Lissa
            && (!(self.lissa.scale > 0.0) || self.lissa.depth == 0 || self.lissa.repeats == 0)
        {
            return Err(Error::contract("lissa scale, depth and repeats must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverDiag {
    /// `‖(H+λI)x − g‖ / ‖g‖` (0 when `g = 0`).
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SolverDiag {
    fn merge(&mut self, other: SolverDiag) {
        self.residual = self.residual.max(other.residual);
        self.iterations += other.iterations;
        self.converged &= other.converged;
    }

    fn trivial() -> Self {
        SolverDiag {
            residual: 0.0,
            iterations: 0,
            converged: true,
        }
    }
}

fn damped(hvp: &impl Fn(&[f64]) -> Result<Vec<f64>>, lambda: f64, v: &[f64]) -> Result<Vec<f64>> {
    let mut hv = hvp(v)?;
    if hv.len() != v.len() {
        return Err(Error::contract("hvp returned a vector of the wrong size"));
    }
    math::axpy(lambda, v, &mut hv);
    Ok(hv)
}

fn relative_residual(hvp: &impl Fn(&[f64]) -> Result<Vec<f64>>, lambda: f64, x: &[f64], g: &[f64]) -> Result<f64> {
    let gn = math::norm(g);
    if gn == 0.0 {
        return Ok(0.0);
    }
    let ax = damped(hvp, lambda, x)?;
    Ok(math::norm(&math::sub(&ax, g)) / gn)
}

/// Solves `(H + λI) x = g` given only products with `H`.
pub fn solve_inverse_hvp(
    hvp: impl Fn(&[f64]) -> Result<Vec<f64>>,
    g: &[f64],
    cfg: &HvpSolverConfig,
) -> Result<(Vec<f64>, SolverDiag)> {
    cfg.validate()?;
    if !math::all_finite(g) {
        return Err(Error::contract("right-hand side is not finite"));
    }
    let n = g.len();
    let lambda = cfg.damping;
    match cfg.method {
        SolverMethod::Dense => {
            if n > DENSE_MAX_DIM {
                return Err(Error::contract(alloc::format!(
                    "dense solve limited to dimension {DENSE_MAX_DIM}, got {n}"
                )));
            }
            let mut cols = Vec::with_capacity(n);
            let mut e = vec![0.0; n];
            for i in 0..n {
                e[i] = 1.0;
                cols.push(damped(&hvp, lambda, &e)?);
                e[i] = 0.0;
            }
            let x = linalg::solve_columns(cols, g)?;
            let residual = relative_residual(&hvp, lambda, &x, g)?;
            Ok((
                x,
                SolverDiag {
                    residual,
                    iterations: n,
                    converged: true,
                },
            ))
        }
        SolverMethod::Cg => {
            let gn = math::norm(g);
            let mut x = vec![0.0; n];
            if gn == 0.0 {
                return Ok((x, SolverDiag::trivial()));
            }
            let mut r = g.to_vec();
            let mut p = r.clone();
            let mut rr = math::dot(&r, &r);
            let mut iterations = 0;
            let mut converged = false;
            for k in 0..cfg.max_iter {
                let ap = damped(&hvp, lambda, &p)?;
                let curv = math::dot(&p, &ap);
                if !(curv > 0.0) {
                    return Err(Error::Solver {
                        iteration: k,
                        message: "non-positive curvature; operator is not positive definite".into(),
                    });
                }
                let alpha = rr / curv;
                math::axpy(alpha, &p, &mut x);
                math::axpy(-alpha, &ap, &mut r);
                iterations = k + 1;
                let rr_new = math::dot(&r, &r);
                if math::sqrt(rr_new) <= cfg.tol * gn {
                    converged = true;
                    break;
                }
                let beta = rr_new / rr;
                for (pi, ri) in p.iter_mut().zip(&r) {
                    *pi = ri + beta * *pi;
                }
                rr = rr_new;
            }
            let residual = relative_residual(&hvp, lambda, &x, g)?;
            Ok((
                x,
                SolverDiag {
                    residual,
                    iterations,
                    converged,
                },
            ))
        }
        SolverMethod::Lissa => {
            // x_{k+1} = g + (I − A/scale) x_k, then x / scale; A = H + λI.
            let LissaConfig { scale, depth, repeats } = cfg.lissa;
            let mut acc = vec![0.0; n];
            for _ in 0..repeats {
                let mut cur = g.to_vec();
                for _ in 0..depth {
                    let ac = damped(&hvp, lambda, &cur)?;
                    for i in 0..n {
                        cur[i] = g[i] + cur[i] - ac[i] / scale;
                    }
                    if !math::all_finite(&cur) {
                        return Err(Error::Solver {
                            iteration: depth,
                            message: "lissa recursion diverged; increase scale".into(),
                        });
                    }
                }
                math::axpy(1.0 / (scale * repeats as f64), &cur, &mut acc);
            }
            let residual = relative_residual(&hvp, lambda, &acc, g)?;
            Ok((
                acc,
                SolverDiag {
                    residual,
                    iterations: depth * repeats,
                    converged: residual <= cfg.tol,
                },
            ))
        }
    }
}

/// Downstream metric `M(θ)`.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricSpec {
    /// Mean cross-entropy on a held-out set.
    TestLoss { x: Mat, labels: Vec<usize> },
    /// Matching discrepancy between a synthetic set and the real set at θ.
    DistillObjective {
        synthetic: SyntheticSet,
        real: WeightedDataset,
        spec: MatchSpec,
    },
}

/// A [`MetricSpec`] bound to an architecture.
pub struct MetricFn<'a> {
    pub metric: &'a MetricSpec,
    pub arch: &'a ArchDescriptor,
}

impl ScalarFunction for MetricFn<'_> {
    fn dim(&self) -> usize {
        self.arch.num_params()
    }

    fn build(&self, g: &mut Graph, theta: Node) -> Node {
        match self.metric {
            MetricSpec::TestLoss { x, labels } => {
                let xn = g.constant(x.clone());
                let f = self.arch.forward(g, theta, xn);
                let w = vec![1.0 / labels.len() as f64; labels.len()];
                models::weighted_cross_entropy(g, f.logits, labels, &w)
            }
            MetricSpec::DistillObjective { synthetic, real, spec } => {
                let rb = RealBatch::renormalized(spec.scope, real.class_count, &real.x, &real.y, &real.w);
                let xs = g.constant(synthetic.x.clone());
                let xr = g.constant(real.x.clone());
                let sc = matching::synthetic_coeffs(spec.scope, synthetic);
                let a = matching::record_statistic(g, self.arch, spec.stat, theta, xs, &synthetic.y, &sc, &rb.groups);
                let b = matching::record_statistic(g, self.arch, spec.stat, theta, xr, &real.y, &rb.coeffs, &rb.groups);
                let mut diag = matching::DiscrepancyDiag::default();
                match matching::record_discrepancy(g, spec.disc, &a, &b, &mut diag) {
                    Ok(d) => d,
                    // structure was validated by `MetricSpec::validate`
                    Err(_) => g.constant_scalar(f64::NAN),
                }
            }
        }
    }
}

impl MetricSpec {
    pub fn validate(&self, arch: &ArchDescriptor) -> Result<()> {
        match self {
            MetricSpec::TestLoss { x, labels } => {
                if labels.is_empty() || x.rows != labels.len() || x.cols != arch.input_dim {
                    return Err(Error::contract("test-loss metric has inconsistent shapes"));
                }
                if labels.iter().any(|&y| y >= arch.classes) {
                    return Err(Error::contract("test-loss label out of range"));
                }
            }
            MetricSpec::DistillObjective { synthetic, real, spec } => {
                synthetic.validate()?;
                real.validate()?;
                spec.validate(arch)?;
                if synthetic.dim() != arch.input_dim || real.dim() != arch.input_dim {
                    return Err(Error::contract("objective metric inputs do not match architecture"));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, model: &ModelState) -> Result<f64> {
        ad::eval(&MetricFn { metric: self, arch: &model.arch }, model.theta.as_slice())
    }
}

/// Gradient of the loss of the single instance `j` at θ.
pub fn instance_grad(arch: &ArchDescriptor, ds: &WeightedDataset, j: usize, theta: &[f64]) -> Result<Vec<f64>> {
    let x = Mat::new(1, ds.dim(), ds.row(j).to_vec());
    let y = [ds.y[j]];
    let f = WeightedLoss::new(arch, &x, &y, &[1.0])?;
    ad::grad(&f, theta)
}

fn check_index(ds: &WeightedDataset, j: usize) -> Result<()> {
    if j >= ds.len() {
        return Err(Error::contract(alloc::format!(
            "instance index {j} out of range for {} instances",
            ds.len()
        )));
    }
    Ok(())
}

/// `M(θ_{D∖{z_j}}) − M(θ_D)`, both trained from `seed` with uniform weights.
pub fn loo_effect(
    trainer: &TrainerConfig,
    arch: &ArchDescriptor,
    ds: &WeightedDataset,
    j: usize,
    metric: &MetricSpec,
    seed: u64,
) -> Result<f64> {
    let full = train_uniform(trainer, arch, ds, seed)?;
    loo_effect_from(trainer, arch, ds, j, metric, seed, &full)
}

/// [`loo_effect`] with the full-data model already trained.
pub fn loo_effect_from(
    trainer: &TrainerConfig,
    arch: &ArchDescriptor,
    ds: &WeightedDataset,
    j: usize,
    metric: &MetricSpec,
    seed: u64,
    full: &ModelState,
) -> Result<f64> {
    if ds.len() < 2 {
        return Err(Error::contract("leave-one-out needs at least two instances"));
    }
    check_index(ds, j)?;
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| i != j).collect();
    let reduced = ds.subset(&keep)?;
    let loo = train_uniform(trainer, arch, &reduced, seed)?;
    Ok(metric.eval(&loo)? - metric.eval(full)?)
}

/// Trains on `ds` with uniform weights `1/N`.
pub fn train_uniform(trainer: &TrainerConfig, arch: &ArchDescriptor, ds: &WeightedDataset, seed: u64) -> Result<ModelState> {
    let w = vec![1.0 / ds.len() as f64; ds.len()];
    models::train(arch, trainer, &ds.x, &ds.y, &w, seed)
}

/// Shared part of the classical score: `q = (H + λI)⁻¹ ∇M(θ*)`, with `H` the
/// Hessian of the uniformly weighted training loss.
#[derive(Debug, Clone)]
pub struct ClassicalContext {
    pub q: Vec<f64>,
    pub diag: SolverDiag,
}

impl ClassicalContext {
    pub fn new(model: &ModelState, ds: &WeightedDataset, metric: &MetricSpec, cfg: &HvpSolverConfig) -> Result<Self> {
        metric.validate(&model.arch)?;
        let theta = model.theta.as_slice();
        let grad_m = ad::grad(&MetricFn { metric, arch: &model.arch }, theta)?;
        let w = vec![1.0 / ds.len() as f64; ds.len()];
        let loss = WeightedLoss::new(&model.arch, &ds.x, &ds.y, &w)?;
        let (q, diag) = solve_inverse_hvp(|v| ad::hvp(&loss, theta, v), &grad_m, cfg)?;
        Ok(ClassicalContext { q, diag })
    }

    pub fn score(&self, model: &ModelState, ds: &WeightedDataset, j: usize) -> Result<f64> {
        check_index(ds, j)?;
        let gj = instance_grad(&model.arch, ds, j, model.theta.as_slice())?;
        Ok(-math::dot(&self.q, &gj))
    }
}

/// `−⟨∇M(θ*), (H+λI)⁻¹ ∇ℓ(θ*; z_j)⟩`; divided by `N` it estimates `−ΔM` of
/// leaving `z_j` out.
pub fn classical_influence(
    model: &ModelState,
    ds: &WeightedDataset,
    j: usize,
    metric: &MetricSpec,
    cfg: &HvpSolverConfig,
) -> Result<f64> {
    check_index(ds, j)?;
    ClassicalContext::new(model, ds, metric, cfg)?.score(model, ds, j)
}

/// How the trajectory derivative `dθ_t/dε` is obtained for the real inner set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImplicitMode {
    /// Unrolled for a single inner step, stationary otherwise.
    #[default]
    Auto,
    /// Forward-mode recursion through every SGD step; exact, one HVP per step
    /// and instance.
    Unrolled,
    /// Stationary-point derivative `−(H_T + λI)⁻¹ ∇ℓ(θ_T; z_j)` reused at
    /// every matching point.
    Stationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceMode {
    /// Real-statistic term only.
    Explicit,
    /// Explicit plus trajectory term.
    Full,
    /// Classical influence on the matching discrepancy of a model trained on
    /// the real set.
    Classical,
}

impl InfluenceMode {
    /// Mode implied by the inner set: the synthetic trajectory does not depend
    /// on the real weights, so only the explicit term exists.
    pub fn for_inner(set: InnerSet) -> Self {
        match set {
            InnerSet::Synthetic => InfluenceMode::Explicit,
            InnerSet::Real => InfluenceMode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    pub trajectory: TrajectoryConfig,
    pub spec: MatchSpec,
    #[serde(default)]
    pub solver: HvpSolverConfig,
    #[serde(default)]
    pub implicit: ImplicitMode,
    /// Trainer for the classical mode.
    #[serde(default)]
    pub trainer: Option<TrainerConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub index: usize,
    pub total: f64,
    pub explicit_term: f64,
    pub implicit_term: f64,
    /// Contribution of each matching point, averaged over initialization draws.
    pub per_step: Vec<f64>,
    pub solver: SolverDiag,
    /// The stationary-point derivative stood in for the exact trajectory one.
    pub stationary_approx: bool,
}

struct StepContext {
    theta: Vec<f64>,
    grad_b: Vec<f64>,
    /// `J_synᵀ∇₁D + J_realᵀ∇₂D` (full mode only).
    r: Vec<f64>,
    /// `(H_T + λI)⁻¹ r` (stationary mode only).
    q: Vec<f64>,
}

struct DrawContext {
    states: Vec<Vec<f64>>,
    steps: Vec<StepContext>,
}

/// Quantities shared by every instance's distillation influence: trajectory
/// states, discrepancy gradients, and solved trajectory-side vectors.
pub struct DistillInfluenceContext<'a> {
    arch: &'a ArchDescriptor,
    cfg: &'a InfluenceConfig,
    ds: &'a WeightedDataset,
    real: RealBatch<'a>,
    mode: InfluenceMode,
    stationary: bool,
    block_len: usize,
    draws: Vec<DrawContext>,
    diag: SolverDiag,
}

fn implicit_is_stationary(cfg: &InfluenceConfig) -> bool {
    match cfg.implicit {
        ImplicitMode::Auto => cfg.trajectory.steps > 1,
        ImplicitMode::Unrolled => false,
        ImplicitMode::Stationary => true,
    }
}

fn inner_data<'a>(
    cfg: &TrajectoryConfig,
    s: &'a SyntheticSet,
    syn_w: &'a [f64],
    ds: &'a WeightedDataset,
    real_w: &'a [f64],
) -> InnerData<'a> {
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

fn check_problem(s: &SyntheticSet, ds: &WeightedDataset, arch: &ArchDescriptor, cfg: &InfluenceConfig) -> Result<()> {
    cfg.trajectory.validate()?;
    cfg.spec.validate(arch)?;
    cfg.solver.validate()?;
    if cfg.trajectory.unroll {
        return Err(Error::contract("influence assumes a frozen synthetic trajectory; disable unroll"));
    }
    if s.dim() != ds.dim() || s.class_count != ds.class_count || ds.dim() != arch.input_dim {
        return Err(Error::contract("synthetic set, real set and architecture disagree in shape"));
    }
    Ok(())
}

impl<'a> DistillInfluenceContext<'a> {
    pub fn new(
        s: &'a SyntheticSet,
        ds: &'a WeightedDataset,
        arch: &'a ArchDescriptor,
        cfg: &'a InfluenceConfig,
        mode: InfluenceMode,
        par: Parallelism,
    ) -> Result<Self> {
        check_problem(s, ds, arch, cfg)?;
        if mode == InfluenceMode::Classical {
            return Err(Error::contract("classical mode has its own context"));
        }
        let full = mode == InfluenceMode::Full && cfg.trajectory.s_inner == InnerSet::Real;
        let stationary = full && implicit_is_stationary(cfg);
        let real = RealBatch::renormalized(cfg.spec.scope, ds.class_count, &ds.x, &ds.y, &ds.w);
        let block_len = matching::group_block_lens(arch, cfg.spec.stat).iter().sum();
        let syn_w = vec![1.0 / s.len() as f64; s.len()];
        let draw_ids: Vec<usize> = (0..cfg.trajectory.init_samples).collect();
        let traj = cfg.trajectory;
        let results = par::try_map(par, &draw_ids, |&k| -> Result<(DrawContext, SolverDiag)> {
            let seed = TrajectoryConfig::draw_seed(cfg.seed, k);
            let states = matching::trajectory_on(arch, &traj, inner_data(&traj, s, &syn_w, ds, &ds.w), seed)?;
            let mut diag = SolverDiag::trivial();
            let mut steps = Vec::new();
            for t in traj.match_points() {
                let q = matching::step_quantities(arch, &cfg.spec, &states[t], s, &real)?;
                let r = if full {
                    matching::statistic_vjp(arch, &cfg.spec, &states[t], s, &real, &q.grad_a, &q.grad_b)?
                } else {
                    Vec::new()
                };
                steps.push(StepContext {
                    theta: q.theta,
                    grad_b: q.grad_b,
                    r,
                    q: Vec::new(),
                });
            }
            if stationary {
                let end = &states[traj.steps];
                let loss = WeightedLoss::new(arch, &ds.x, &ds.y, &ds.w)?;
                let solver = HvpSolverConfig {
                    damping: cfg.solver.damping + traj.inner_sgd.weight_decay,
                    ..cfg.solver
                };
                for st in &mut steps {
                    let (q, d) = solve_inverse_hvp(|v| ad::hvp(&loss, end, v), &st.r, &solver)?;
                    st.q = q;
                    diag.merge(d);
                }
            }
            Ok((DrawContext { states, steps }, diag))
        })?;
        let mut diag = SolverDiag::trivial();
        let mut draws = Vec::with_capacity(results.len());
        for (d, sd) in results {
            diag.merge(sd);
            draws.push(d);
        }
        Ok(DistillInfluenceContext {
            arch,
            cfg,
            ds,
            real,
            mode,
            stationary,
            block_len,
            draws,
            diag,
        })
    }

    fn group_range(&self, label: usize) -> Option<core::ops::Range<usize>> {
        let slot = self.real.slot_of(label);
        let gi = self.real.groups.iter().position(|g| match g {
            Group::All => true,
            Group::Class(c) => *c == label,
        })?;
        let norm = self.real.norms[slot];
        if norm > 0.0 {
            Some(gi * self.block_len..(gi + 1) * self.block_len)
        } else {
            None
        }
    }

    fn explicit_at(&self, theta: &[f64], grad_b: &[f64], j: usize) -> Result<f64> {
        let y = self.ds.y[j];
        let Some(range) = self.group_range(y) else {
            return Ok(0.0);
        };
        let phi = matching::instance_statistic(self.arch, self.cfg.spec.stat, theta, self.ds.row(j), y)?;
        let norm = self.real.norms[self.real.slot_of(y)];
        Ok(math::dot(&grad_b[range], &phi) / norm)
    }

    /// Tangents `dθ_t/dε` for `t = 0..=steps` by forward recursion through the
    /// SGD updates on the weighted real loss.
    fn unrolled_tangents(&self, states: &[Vec<f64>], j: usize) -> Result<Vec<Vec<f64>>> {
        let sgd = self.cfg.trajectory.inner_sgd;
        let loss = WeightedLoss::new(self.arch, &self.ds.x, &self.ds.y, &self.ds.w)?;
        let p = self.arch.num_params();
        let mut u = vec![0.0; p];
        let mut nu = vec![0.0; p];
        let mut out = Vec::with_capacity(states.len());
        out.push(u.clone());
        for theta in &states[..states.len() - 1] {
            let hu = ad::hvp(&loss, theta, &u)?;
            let gj = instance_grad(self.arch, self.ds, j, theta)?;
            for i in 0..p {
                nu[i] = sgd.momentum * nu[i] + hu[i] + gj[i] + sgd.weight_decay * u[i];
                u[i] -= sgd.lr * nu[i];
            }
            out.push(u.clone());
        }
        Ok(out)
    }

    pub fn record(&self, j: usize) -> Result<InfluenceRecord> {
        check_index(self.ds, j)?;
        let full = self.mode == InfluenceMode::Full && self.cfg.trajectory.s_inner == InnerSet::Real;
        let points: Vec<usize> = self.cfg.trajectory.match_points().collect();
        let inv = 1.0 / self.draws.len() as f64;
        let mut per_step = vec![0.0; points.len()];
        let mut explicit_term = 0.0;
        let mut implicit_term = 0.0;
        for draw in &self.draws {
            let tangents = if full && !self.stationary {
                self.unrolled_tangents(&draw.states, j)?
            } else {
                Vec::new()
            };
            let end_grad = if self.stationary {
                instance_grad(self.arch, self.ds, j, &draw.states[self.cfg.trajectory.steps])?
            } else {
                Vec::new()
            };
            for (k, (&t, st)) in points.iter().zip(&draw.steps).enumerate() {
                let e = self.explicit_at(&st.theta, &st.grad_b, j)?;
                let i = if !full {
                    0.0
                } else if self.stationary {
                    -math::dot(&st.q, &end_grad)
                } else {
                    math::dot(&st.r, &tangents[t])
                };
                explicit_term += inv * e;
                implicit_term += inv * i;
                per_step[k] += inv * (e + i);
            }
        }
        Ok(InfluenceRecord {
            index: j,
            total: explicit_term + implicit_term,
            explicit_term,
            implicit_term,
            per_step,
            solver: self.diag,
            stationary_approx: self.stationary,
        })
    }
}

/// Explicit term of the distillation influence of instance `j` and its
/// per-matching-point contributions.
pub fn distill_influence_explicit(
    s: &SyntheticSet,
    ds: &WeightedDataset,
    arch: &ArchDescriptor,
    cfg: &InfluenceConfig,
    j: usize,
) -> Result<(f64, Vec<f64>)> {
    check_index(ds, j)?;
    let ctx = DistillInfluenceContext::new(s, ds, arch, cfg, InfluenceMode::Explicit, Parallelism::Sequential)?;
    let r = ctx.record(j)?;
    Ok((r.total, r.per_step))
}

/// Explicit plus trajectory term for instance `j`.
pub fn distill_influence_full(
    s: &SyntheticSet,
    ds: &WeightedDataset,
    arch: &ArchDescriptor,
    cfg: &InfluenceConfig,
    j: usize,
) -> Result<InfluenceRecord> {
    check_index(ds, j)?;
    DistillInfluenceContext::new(s, ds, arch, cfg, InfluenceMode::Full, Parallelism::Sequential)?.record(j)
}

/// Central difference of the objective under `w ± εe_j`, with class masses
/// held at their unperturbed values and the inner trajectory re-run when it
/// is driven by the real set. Test and validation oracle.
pub fn fd_objective_influence_oracle(
    s: &SyntheticSet,
    ds: &WeightedDataset,
    arch: &ArchDescriptor,
    cfg: &InfluenceConfig,
    j: usize,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    check_index(ds, j)?;
    check_problem(s, ds, arch, cfg)?;
    let norms = matching::group_mass(cfg.spec.scope, ds.class_count, &ds.y, &ds.w);
    let syn_w = vec![1.0 / s.len() as f64; s.len()];
    let eval = |delta: f64| -> Result<f64> {
        let mut w = ds.w.clone();
        w[j] += delta;
        let real = RealBatch::with_norms(cfg.spec.scope, &ds.x, &ds.y, &w, norms.clone());
        let inner = inner_data(&cfg.trajectory, s, &syn_w, ds, &w);
        let ev = matching::objective_with(arch, &cfg.trajectory, &cfg.spec, s, &real, inner, cfg.seed, false, Parallelism::Sequential)?;
        Ok(ev.value)
    };
    Ok((eval(eps)? - eval(-eps)?) / (2.0 * eps))
}

/// One record per real instance, in instance order.
pub fn score_all(
    ds: &WeightedDataset,
    s: &SyntheticSet,
    arch: &ArchDescriptor,
    mode: InfluenceMode,
    cfg: &InfluenceConfig,
    par: Parallelism,
) -> Result<Vec<InfluenceRecord>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    match mode {
        InfluenceMode::Classical => {
            let (model, metric) = classical_setup(ds, s, arch, cfg)?;
            let ctx = ClassicalContext::new(&model, ds, &metric, &cfg.solver)?;
            par::try_map(par, &idx, |&j| classical_record(&ctx, &model, ds, j))
        }
        _ => {
            let ctx = DistillInfluenceContext::new(s, ds, arch, cfg, mode, par)?;
            par::try_map(par, &idx, |&j| ctx.record(j))
        }
    }
}

/// The model and metric that classical mode scores against: a model trained
/// on the real set, and the matching discrepancy at its parameters.
pub fn classical_setup(
    ds: &WeightedDataset,
    s: &SyntheticSet,
    arch: &ArchDescriptor,
    cfg: &InfluenceConfig,
) -> Result<(ModelState, MetricSpec)> {
    check_problem(s, ds, arch, cfg)?;
    let trainer = cfg
        .trainer
        .ok_or_else(|| Error::contract("classical mode needs a trainer configuration"))?;
    let model = train_uniform(&trainer, arch, ds, cfg.seed)?;
    let metric = MetricSpec::DistillObjective {
        synthetic: s.clone(),
        real: ds.clone(),
        spec: cfg.spec,
    };
    Ok((model, metric))
}

fn classical_record(ctx: &ClassicalContext, model: &ModelState, ds: &WeightedDataset, j: usize) -> Result<InfluenceRecord> {
    let score = ctx.score(model, ds, j)?;
    Ok(InfluenceRecord {
        index: j,
        total: score,
        explicit_term: 0.0,
        implicit_term: score,
        per_step: vec![score],
        solver: ctx.diag,
        stationary_approx: true,
    })
}

/// Per-instance classical record, computed the same way [`score_all`] does.
pub fn classical_record_for(
    ds: &WeightedDataset,
    s: &SyntheticSet,
    arch: &ArchDescriptor,
    cfg: &InfluenceConfig,
    j: usize,
) -> Result<InfluenceRecord> {
    check_index(ds, j)?;
    let (model, metric) = classical_setup(ds, s, arch, cfg)?;
    let ctx = ClassicalContext::new(&model, ds, &metric, &cfg.solver)?;
    classical_record(&ctx, &model, ds, j)
}
