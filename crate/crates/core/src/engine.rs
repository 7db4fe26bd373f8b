//! Outer loops: influence-weighted distillation, from-scratch evaluation of a
//! synthetic set, the four-way ablation and the temperature sweep.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{init_synthetic, InitMode, SyntheticSet, WeightedDataset};
use crate::influence::{self, HvpSolverConfig, ImplicitMode, InfluenceConfig, InfluenceMode, InfluenceRecord};
use crate::matching::{self, InnerData, InnerSet, MatchSpec, RealBatch, TrajectoryConfig};
use crate::models::{self, ArchDescriptor, InitDistribution, SgdConfig};
use crate::par::{self, Parallelism};
use crate::weighting::{self, WeightPolicy};
use crate::{math, rng};
use crate::{Error, Result};

/// Keep fraction of the prune-then-distill baseline.
pub const PRUNE_KEEP_FRACTION: f64 = 0.9;

fn default_refresh() -> usize {
    50
}

fn default_momentum() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub arch: ArchDescriptor,
    pub trajectory: TrajectoryConfig,
    pub spec: MatchSpec,
    pub ipc: usize,
    pub init_mode: InitMode,
    /// Initial learning rate carried by the synthetic set.
    pub synthetic_lr: f64,
    pub outer_steps: usize,
    /// Step size for the synthetic inputs.
    pub outer_lr: f64,
    /// Step size for the synthetic learning rate; only a statistic that
    /// depends on it would move it, so with the current statistics it stays put.
    pub lr_outer_lr: f64,
    #[serde(default = "default_momentum")]
    pub outer_momentum: f64,
    pub batch_size: usize,
    pub policy: WeightPolicy,
    #[serde(default = "default_refresh")]
    pub influence_refresh: usize,
    #[serde(default)]
    pub solver: HvpSolverConfig,
    #[serde(default)]
    pub implicit: ImplicitMode,
    #[serde(default)]
    pub seed: u64,
}

impl DistillConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        self.arch.validate()?;
        self.trajectory.validate()?;
        self.spec.validate(&self.arch)?;
        self.solver.validate()?;
        self.policy.validate(n)?;
        if self.ipc == 0 {
            return Err(Error::contract("ipc must be positive"));
        }
        if self.outer_steps == 0 {
            return Err(Error::contract("outer_steps must be at least 1"));
        }
        if !(self.outer_lr >= 0.0 && self.outer_lr.is_finite()) || !(self.lr_outer_lr >= 0.0) {
            return Err(Error::contract("outer learning rates must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.outer_momentum) {
            return Err(Error::contract("outer_momentum must lie in [0, 1)"));
        }
        if !(self.synthetic_lr > 0.0) {
            return Err(Error::contract("synthetic_lr must be positive"));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::contract(alloc::format!(
                "batch_size must lie in 1..={n}, got {}",
                self.batch_size
            )));
        }
        if self.influence_refresh == 0 {
            return Err(Error::contract("influence_refresh must be at least 1"));
        }
        Ok(())
    }

    fn influence_config(&self, seed: u64) -> InfluenceConfig {
        InfluenceConfig {
            trajectory: self.trajectory,
            spec: self.spec,
            solver: self.solver,
            implicit: self.implicit,
            trainer: None,
            seed,
        }
    }

    fn influence_mode(&self) -> InfluenceMode {
        InfluenceMode::for_inner(self.trajectory.s_inner)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefreshLog {
    pub step: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Largest weight divided by the uniform weight.
    pub max_weight_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Weighted matching objective at each outer step, before the update.
    pub objective: Vec<f64>,
    pub refreshes: Vec<RefreshLog>,
    pub synthetic: SyntheticSet,
    /// Cosine blocks skipped for zero norm, summed over the run.
    pub zero_norm_blocks: usize,
    pub eval: Option<EvalSummary>,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    rng::derive(seed, step as u64)
}

fn sample_batch(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, rng::BATCH);
    let mut idx = models::permutation(n, &mut r);
    idx.truncate(size);
    idx
}

/// Distills `ds` under `cfg` (Algorithm 1). Weights come from the configured
/// policy; the uniform policy skips influence scoring altogether.
pub fn distill(ds: &WeightedDataset, cfg: &DistillConfig, par: Parallelism) -> Result<RunReport> {
    distill_with_weights(ds, cfg, par, |s, step| {
        if !cfg.policy.needs_scores() {
            return Ok((vec![1.0 / ds.len() as f64; ds.len()], None));
        }
        let records = score_against(ds, s, cfg, step, par)?;
        let infl: Vec<f64> = records.iter().map(|r| r.total).collect();
        let w = cfg.policy.weights(&infl)?;
        Ok((w, Some(infl)))
    })
}

/// Influence of every real instance on the objective at the current synthetic set.
pub fn score_against(
    ds: &WeightedDataset,
    s: &SyntheticSet,
    cfg: &DistillConfig,
    step: usize,
    par: Parallelism,
) -> Result<Vec<InfluenceRecord>> {
    let icfg = cfg.influence_config(rng::derive(cfg.seed ^ 0x1f, step as u64));
    influence::score_all(ds, s, &cfg.arch, cfg.influence_mode(), &icfg, par)
}

/// [`distill`] with an arbitrary weight source, called at every refresh with
/// the current synthetic set and step; it returns global weights and,
/// optionally, the scores they came from.
pub fn distill_with_weights<F>(ds: &WeightedDataset, cfg: &DistillConfig, par: Parallelism, mut weights_at: F) -> Result<RunReport>
where
    F: FnMut(&SyntheticSet, usize) -> Result<(Vec<f64>, Option<Vec<f64>>)>,
{
    ds.validate()?;
    cfg.validate(ds.len())?;
    if ds.dim() != cfg.arch.input_dim || ds.class_count != cfg.arch.classes {
        return Err(Error::contract("dataset does not match the architecture"));
    }
    let mut s = init_synthetic(ds, cfg.ipc, cfg.init_mode, cfg.seed)?.with_lr(cfg.synthetic_lr);
    let mut velocity = vec![0.0; s.x.len()];
    let mut objective = Vec::with_capacity(cfg.outer_steps);
    let mut refreshes = Vec::new();
    let mut zero_norm_blocks = 0;
    let mut global = vec![1.0 / ds.len() as f64; ds.len()];
    for step in 0..cfg.outer_steps {
        let fail = |e: Error, objective: &[f64]| Error::Outer {
            step,
            last_objective: objective.last().copied(),
            source: Box::new(e),
        };
        let seed = step_seed(cfg.seed, step);
        let batch = sample_batch(ds.len(), cfg.batch_size, seed);
        if step % cfg.influence_refresh == 0 {
            let (w, scores) = weights_at(&s, step).map_err(|e| fail(e, &objective))?;
            if w.len() != ds.len() || !math::all_finite(&w) {
                return Err(fail(Error::contract("weight source returned an invalid vector"), &objective));
            }
            if let Some(sc) = scores {
                let max_w = w.iter().copied().fold(0.0, f64::max);
                refreshes.push(RefreshLog {
                    step,
                    mean: math::mean(&sc),
                    std: math::std_dev(&sc),
                    min: sc.iter().copied().fold(f64::INFINITY, f64::min),
                    max: sc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    max_weight_ratio: max_w * ds.len() as f64,
                });
            }
            global = w;
        }
        let x = ds.rows(&batch);
        let y = ds.labels(&batch);
        let bw = weighting::batch_weights(&global, &batch);
        let real = RealBatch::renormalized(cfg.spec.scope, ds.class_count, &x, &y, &bw);
        let syn_w = vec![1.0 / s.len() as f64; s.len()];
        let inner = match cfg.trajectory.s_inner {
            InnerSet::Synthetic => InnerData {
                x: &s.x,
                labels: &s.y,
                weights: &syn_w,
            },
            InnerSet::Real => InnerData {
                x: &ds.x,
                labels: &ds.y,
                weights: &ds.w,
            },
        };
        let ev = matching::objective_with(&cfg.arch, &cfg.trajectory, &cfg.spec, &s, &real, inner, seed, true, par)
            .map_err(|e| fail(e, &objective))?;
        if !ev.value.is_finite() || !math::all_finite(&ev.grad_x) {
            return Err(fail(
                Error::Numerical {
                    node: 0,
                    op: "objective",
                },
                &objective,
            ));
        }
        objective.push(ev.value);
        zero_norm_blocks += ev.diag.zero_norm_blocks;
        for ((v, g), xv) in velocity.iter_mut().zip(&ev.grad_x).zip(s.x.data.iter_mut()) {
            *v = cfg.outer_momentum * *v + g;
            *xv -= cfg.outer_lr * *v;
        }
    }
    Ok(RunReport {
        objective,
        refreshes,
        synthetic: s,
        zero_norm_blocks,
        eval: None,
    })
}

fn default_repeats() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub arch: ArchDescriptor,
    pub epochs: usize,
    /// Momentum and weight decay of the from-scratch trainer; its learning rate
    /// is taken from the synthetic set unless `lr` overrides it.
    #[serde(default = "eval_sgd")]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_repeats")]
    pub n_repeats: usize,
    #[serde(default)]
    pub init: InitDistribution,
    #[serde(default)]
    pub seed: u64,
}

fn eval_sgd() -> SgdConfig {
    SgdConfig::evaluation(0.0)
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.sgd.validate()?;
        if self.n_repeats == 0 {
            return Err(Error::contract("n_repeats must be at least 1"));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0) {
                return Err(Error::contract("evaluation lr must be positive"));
            }
        }
        Ok(())
    }
}

/// Trains `n_repeats` fresh models full-batch on the synthetic set and reports
/// test accuracy.
pub fn evaluate(s: &SyntheticSet, test: &WeightedDataset, cfg: &EvalConfig, par: Parallelism) -> Result<EvalSummary> {
    cfg.validate()?;
    s.validate()?;
    if s.is_empty() {
        return Err(Error::contract("cannot evaluate an empty synthetic set"));
    }
    if s.dim() != cfg.arch.input_dim || test.dim() != cfg.arch.input_dim {
        return Err(Error::contract("evaluation inputs do not match the architecture"));
    }
    let sgd = SgdConfig {
        lr: cfg.lr.unwrap_or(s.lr),
        ..cfg.sgd
    };
    let w = vec![1.0 / s.len() as f64; s.len()];
    let repeats: Vec<usize> = (0..cfg.n_repeats).collect();
    let accuracies = par::try_map(par, &repeats, |&r| -> Result<f64> {
        let mut model = models::init_model(&cfg.arch, cfg.init, rng::derive(cfg.seed, r as u64));
        let loss = models::WeightedLoss::new(&cfg.arch, &s.x, &s.y, &w)?;
        let mut v = vec![0.0; model.theta.dim()];
        for _ in 0..cfg.epochs {
            let g = crate::ad::grad(&loss, model.theta.as_slice())?;
            models::sgd_update(&mut model.theta.0, &g, &sgd, &mut v);
        }
        Ok(models::accuracy(&model, &test.x, &test.y))
    })?;
    Ok(EvalSummary {
        mean: math::mean(&accuracies),
        std: math::std_dev(&accuracies),
        accuracies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    RandomSelect,
    InfluenceSelect,
    PruneThenDistill,
    Iwd,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::RandomSelect,
        AblationMode::InfluenceSelect,
        AblationMode::PruneThenDistill,
        AblationMode::Iwd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::RandomSelect => "random-select",
            AblationMode::InfluenceSelect => "influence-select",
            AblationMode::PruneThenDistill => "prune-then-distill",
            AblationMode::Iwd => "iwd",
        }
    }
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub ipc: usize,
    /// Softmax temperature when the row's method used one.
    pub tau: Option<f64>,
    pub seed: u64,
    pub accuracy: f64,
}

fn tau_of(p: &WeightPolicy) -> Option<f64> {
    match p {
        WeightPolicy::Softmax { tau } => Some(*tau),
        _ => None,
    }
}

/// Seed of the `r`-th repetition; shared by every mode.
pub fn repetition_seed(base: u64, r: usize) -> u64 {
    rng::derive(base, 0xAB1A_0000 + r as u64)
}

fn with_seed(cfg: &DistillConfig, seed: u64) -> DistillConfig {
    DistillConfig { seed, ..cfg.clone() }
}

fn eval_with_seed(cfg: &EvalConfig, seed: u64) -> EvalConfig {
    EvalConfig {
        seed: rng::derive(seed, 0xE7A1),
        ..cfg.clone()
    }
}

/// Per-class picks of the `ipc` highest-benefit instances.
fn stratified_top(ds: &WeightedDataset, benefit: &[f64], ipc: usize) -> Result<Vec<Vec<usize>>> {
    (0..ds.class_count)
        .map(|c| {
            let members = ds.indices_of_class(c);
            let sub: Vec<f64> = members.iter().map(|&i| benefit[i]).collect();
            if ipc > members.len() {
                return Err(Error::contract(alloc::format!("class {c} has fewer than {ipc} instances")));
            }
            Ok(weighting::select_top_k(&sub, ipc)?.into_iter().map(|k| members[k]).collect())
        })
        .collect()
}

fn stratified_random(ds: &WeightedDataset, ipc: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut r = rng::stream(seed, rng::SELECT);
    (0..ds.class_count)
        .map(|c| {
            let members = ds.indices_of_class(c);
            if ipc > members.len() {
                return Err(Error::contract(alloc::format!("class {c} has fewer than {ipc} instances")));
            }
            let order = models::permutation(members.len(), &mut r);
            Ok(order[..ipc].iter().map(|&k| members[k]).collect())
        })
        .collect()
}

/// Runs one ablation mode for one repetition seed and returns the mean
/// evaluation accuracy.
pub fn run_mode(
    ds: &WeightedDataset,
    test: &WeightedDataset,
    distill_cfg: &DistillConfig,
    eval_cfg: &EvalConfig,
    mode: AblationMode,
    seed: u64,
    par: Parallelism,
) -> Result<f64> {
    let dcfg = with_seed(distill_cfg, seed);
    let ecfg = eval_with_seed(eval_cfg, seed);
    let scores = || -> Result<Vec<f64>> {
        let s0 = init_synthetic(ds, dcfg.ipc, dcfg.init_mode, dcfg.seed)?.with_lr(dcfg.synthetic_lr);
        let records = score_against(ds, &s0, &dcfg, 0, par)?;
        Ok(weighting::benefit(&records.iter().map(|r| r.total).collect::<Vec<_>>()))
    };
    let s = match mode {
        AblationMode::RandomSelect => {
            let picks = stratified_random(ds, dcfg.ipc, seed)?;
            SyntheticSet::from_selection(ds, &picks, dcfg.synthetic_lr)?
        }
        AblationMode::InfluenceSelect => {
            let picks = stratified_top(ds, &scores()?, dcfg.ipc)?;
            SyntheticSet::from_selection(ds, &picks, dcfg.synthetic_lr)?
        }
        AblationMode::PruneThenDistill => {
            let keep = weighting::prune_fraction(&scores()?, PRUNE_KEEP_FRACTION)?;
            let kept = ds.subset(&keep)?;
            let cfg = DistillConfig {
                policy: WeightPolicy::Uniform,
                batch_size: dcfg.batch_size.min(kept.len()),
                ..dcfg.clone()
            };
            distill(&kept, &cfg, par)?.synthetic
        }
        AblationMode::Iwd => distill(ds, &dcfg, par)?.synthetic,
    };
    Ok(evaluate(&s, test, &ecfg, par)?.mean)
}

/// Every mode under every repetition seed; rows ordered by seed, then mode.
pub fn run_ablation(
    ds: &WeightedDataset,
    test: &WeightedDataset,
    distill_cfg: &DistillConfig,
    eval_cfg: &EvalConfig,
    modes: &[AblationMode],
    seeds: usize,
    par: Parallelism,
) -> Result<Vec<ComparisonRow>> {
    if modes.is_empty() || seeds == 0 {
        return Err(Error::contract("ablation needs at least one mode and one seed"));
    }
    distill_cfg.validate(ds.len())?;
    eval_cfg.validate()?;
    let jobs: Vec<(usize, AblationMode)> = (0..seeds).flat_map(|r| modes.iter().map(move |&m| (r, m))).collect();
    par::try_map(par, &jobs, |&(r, mode)| {
        let seed = repetition_seed(distill_cfg.seed, r);
        let accuracy = run_mode(ds, test, distill_cfg, eval_cfg, mode, seed, par)?;
        Ok(ComparisonRow {
            mode: mode.name().into(),
            ipc: distill_cfg.ipc,
            tau: if mode == AblationMode::Iwd { tau_of(&distill_cfg.policy) } else { None },
            seed,
            accuracy,
        })
    })
}

/// Distill-and-evaluate at each temperature of `grid` under shared seeds.
/// Rows are ordered by temperature, then seed.
pub fn tau_sweep(
    ds: &WeightedDataset,
    test: &WeightedDataset,
    distill_cfg: &DistillConfig,
    eval_cfg: &EvalConfig,
    grid: &[f64],
    seeds: usize,
    par: Parallelism,
) -> Result<Vec<ComparisonRow>> {
    if grid.is_empty() || seeds == 0 {
        return Err(Error::contract("tau sweep needs a non-empty grid and at least one seed"));
    }
    for &tau in grid {
        WeightPolicy::Softmax { tau }.validate(ds.len())?;
    }
    eval_cfg.validate()?;
    let jobs: Vec<(f64, usize)> = grid.iter().flat_map(|&t| (0..seeds).map(move |r| (t, r))).collect();
    par::try_map(par, &jobs, |&(tau, r)| {
        let seed = repetition_seed(distill_cfg.seed, r);
        let cfg = DistillConfig {
            policy: WeightPolicy::Softmax { tau },
            ..distill_cfg.clone()
        };
        let accuracy = run_mode(ds, test, &cfg, eval_cfg, AblationMode::Iwd, seed, par)?;
        Ok(ComparisonRow {
            mode: AblationMode::Iwd.name().into(),
            ipc: cfg.ipc,
            tau: Some(tau),
            seed,
            accuracy,
        })
    })
}

/// Mean accuracy per key, in order of first appearance.
pub fn mean_by<K: PartialEq + Clone>(rows: &[ComparisonRow], key: impl Fn(&ComparisonRow) -> K) -> Vec<(K, f64)> {
    let mut keys: Vec<K> = Vec::new();
    for r in rows {
        let k = key(r);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|k| {
            let accs: Vec<f64> = rows.iter().filter(|r| key(r) == k).map(|r| r.accuracy).collect();
            (k, math::mean(&accs))
        })
        .collect()
}
