//! Subcommands. Each one loads and validates its config completely, then
//! computes, then writes its artifacts into the output directory.
//!
//! Artifacts never contain paths or timings, so reruns with the same config
//! produce identical bytes wherever they are written.

use std::fs;
use std::path::{Path, PathBuf};

use iwd_core::data::{init_synthetic, SyntheticSet};
use iwd_core::engine::{self, ComparisonRow, EvalSummary, RunReport};
use iwd_core::influence::{self, ClassicalContext, HvpSolverConfig, InfluenceConfig, InfluenceMode, MetricSpec, SolverDiag};
use iwd_core::par::{self, Parallelism};
use iwd_core::stats;
use iwd_core::{math, rng, weighting};
use serde::Serialize;

use crate::config::{self, Loaded};
use crate::error::{CliError, Result};
use crate::{io, svg};

const PAR: Parallelism = Parallelism::Threads;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Distill,
    Influence,
    Evaluate,
    Ablate,
    TauSweep,
    LooOracle,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Runs one subcommand and returns the artifacts it wrote.
pub fn run(cmd: Command, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let mut loaded = config::load(&opts.config)?;
    loaded.apply_seed(opts.seed);
    let out = loaded.output_dir(opts.out.as_deref())?;
    match cmd {
        Command::Distill => distill(&loaded, &out),
        Command::Influence => influence(&loaded, &out),
        Command::Evaluate => evaluate(&loaded, &out),
        Command::Ablate => ablate(&loaded, &out),
        Command::TauSweep => tau_sweep(&loaded, &out),
        Command::LooOracle => loo_oracle(&loaded, &out),
    }
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn num(v: f64) -> String {
    v.to_string()
}

fn distill(loaded: &Loaded, out: &Path) -> Result<Vec<PathBuf>> {
    let td = config::build_training(loaded)?;
    let d = config::require(&loaded.config.distill, "distill")?;
    config::validate_distill(d, &td.train)?;
    let eval = match (&loaded.config.eval, &loaded.config.test_dataset) {
        (Some(e), Some(_)) => {
            config::validate_eval(e, &td.train)?;
            Some((e, config::build_test(loaded, &td.train)?))
        }
        _ => None,
    };

    let mut report = engine::distill(&td.train, d, PAR)?;
    if let Some((e, test)) = &eval {
        report.eval = Some(engine::evaluate(&report.synthetic, test, e, PAR)?);
    }

    create_dir(out)?;
    let (meta, bin) = io::write_synthetic(out, "synthetic", &report.synthetic)?;
    let report_path = out.join("run_report.json");
    io::write_json(&report_path, &report)?;
    let csv_path = out.join("objective.csv");
    io::write_csv(
        &csv_path,
        &["step", "objective"],
        report.objective.iter().enumerate().map(|(t, v)| vec![t.to_string(), num(*v)]),
    )?;
    let curve = out.join("curve.svg");
    io::write_bytes(&curve, objective_chart(&report).as_bytes())?;
    Ok(vec![meta, bin, report_path, csv_path, curve])
}

fn objective_chart(report: &RunReport) -> String {
    let s = svg::Series {
        name: "objective",
        points: report.objective.iter().enumerate().map(|(t, v)| (t as f64, *v)).collect(),
    };
    svg::line_chart(&[s], "matching objective", "outer step", "objective", false)
}

/// Location and spread of a set of scores.
#[derive(Debug, Clone, Serialize)]
struct ScoreSummary {
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
}

impl ScoreSummary {
    fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        Some(ScoreSummary {
            mean: math::mean(v),
            std: math::std_dev(v),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
struct Histogram {
    lo: f64,
    hi: f64,
    counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct InfluenceSummary {
    n: usize,
    mode: InfluenceMode,
    scores: Option<ScoreSummary>,
    histogram: Histogram,
    flipped: usize,
    /// Scores and weights of flipped and clean instances, when the config
    /// injected label noise.
    flipped_scores: Option<ScoreSummary>,
    clean_scores: Option<ScoreSummary>,
    mean_weight_flipped: Option<f64>,
    mean_weight_clean: Option<f64>,
    solver: SolverDiag,
}

/// Synthetic set the influence scores are taken against: the configured file,
/// or the distillation starting point.
fn scoring_set(loaded: &Loaded, out: &Path, td: &config::TrainingData) -> Result<SyntheticSet> {
    let d = config::require(&loaded.config.distill, "distill")?;
    match &loaded.config.synthetic {
        Some(_) => {
            let p = loaded.synthetic_path(out);
            if !p.is_file() {
                return Err(CliError::config("synthetic", format!("{} does not exist", p.display())));
            }
            let s = io::read_synthetic(&p)?;
            if s.dim() != td.train.dim() || s.class_count != td.train.class_count {
                return Err(CliError::config("synthetic", "synthetic set does not match the dataset"));
            }
            Ok(s)
        }
        None => Ok(init_synthetic(&td.train, d.ipc, d.init_mode, d.seed)?.with_lr(d.synthetic_lr)),
    }
}

fn influence(loaded: &Loaded, out: &Path) -> Result<Vec<PathBuf>> {
    let td = config::build_training(loaded)?;
    let d = config::require(&loaded.config.distill, "distill")?;
    config::validate_distill(d, &td.train)?;
    let sec = loaded.config.influence.clone().unwrap_or_default();
    let mode = config::validate_influence(&sec, d)?;
    let s = scoring_set(loaded, out, &td)?;

    // the same seed the distillation loop uses for its first refresh
    let icfg = InfluenceConfig {
        trajectory: d.trajectory,
        spec: d.spec,
        solver: d.solver,
        implicit: d.implicit,
        trainer: sec.trainer,
        seed: rng::derive(d.seed ^ 0x1f, 0),
    };
    let records = influence::score_all(&td.train, &s, &d.arch, mode, &icfg, PAR)?;
    let totals: Vec<f64> = records.iter().map(|r| r.total).collect();
    let n = td.train.len();
    let weights = if d.policy.needs_scores() {
        d.policy.weights(&totals)?
    } else {
        vec![1.0 / n as f64; n]
    };
    let benefit = weighting::benefit(&totals);
    let mut is_flipped = vec![false; n];
    for &i in &td.flipped {
        is_flipped[i] = true;
    }

    create_dir(out)?;
    let csv_path = out.join("influence.csv");
    io::write_csv(
        &csv_path,
        &[
            "index",
            "label",
            "flipped",
            "total",
            "explicit",
            "implicit",
            "benefit",
            "weight",
            "stationary",
            "solver_residual",
            "solver_iterations",
            "solver_converged",
        ],
        records.iter().map(|r| {
            let i = r.index;
            vec![
                i.to_string(),
                td.train.y[i].to_string(),
                u8::from(is_flipped[i]).to_string(),
                num(r.total),
                num(r.explicit_term),
                num(r.implicit_term),
                num(benefit[i]),
                num(weights[i]),
                u8::from(r.stationary_approx).to_string(),
                num(r.solver.residual),
                r.solver.iterations.to_string(),
                u8::from(r.solver.converged).to_string(),
            ]
        }),
    )?;
    let (doc, counts) = svg::histogram(&totals, sec.histogram_bins, "influence scores", "influence on the objective");
    let hist_path = out.join("histogram.svg");
    io::write_bytes(&hist_path, doc.as_bytes())?;
    let (lo, hi, _) = svg::bin_counts(&totals, sec.histogram_bins);

    let pick = |flag: bool, v: &[f64]| -> Vec<f64> { (0..n).filter(|&i| is_flipped[i] == flag).map(|i| v[i]).collect() };
    let noisy = !td.flipped.is_empty();
    let summary = InfluenceSummary {
        n,
        mode,
        scores: ScoreSummary::of(&totals),
        histogram: Histogram { lo, hi, counts },
        flipped: td.flipped.len(),
        flipped_scores: noisy.then(|| ScoreSummary::of(&pick(true, &totals))).flatten(),
        clean_scores: noisy.then(|| ScoreSummary::of(&pick(false, &totals))).flatten(),
        mean_weight_flipped: noisy.then(|| math::mean(&pick(true, &weights))),
        mean_weight_clean: noisy.then(|| math::mean(&pick(false, &weights))),
        solver: records.first().map(|r| r.solver).unwrap_or_default(),
    };
    let summary_path = out.join("influence_summary.json");
    io::write_json(&summary_path, &summary)?;
    let data_path = out.join("dataset.csv");
    io::write_dataset_csv(&data_path, &td.train)?;
    Ok(vec![csv_path, hist_path, summary_path, data_path])
}

fn evaluate(loaded: &Loaded, out: &Path) -> Result<Vec<PathBuf>> {
    let td = config::build_training(loaded)?;
    let e = config::require(&loaded.config.eval, "eval")?;
    config::validate_eval(e, &td.train)?;
    let test = config::build_test(loaded, &td.train)?;
    let path = loaded.synthetic_path(out);
    if !path.is_file() {
        return Err(CliError::config(
            "synthetic",
            format!("{} does not exist (run distill first or set synthetic)", path.display()),
        ));
    }
    let s = io::read_synthetic(&path)?;
    if s.dim() != e.arch.input_dim {
        return Err(CliError::config("synthetic", "synthetic set does not match eval.arch"));
    }

    let summary: EvalSummary = engine::evaluate(&s, &test, e, PAR)?;

    create_dir(out)?;
    let csv_path = out.join("eval.csv");
    io::write_csv(
        &csv_path,
        &["repeat", "accuracy"],
        summary.accuracies.iter().enumerate().map(|(r, a)| vec![r.to_string(), num(*a)]),
    )?;
    let report = out.join("eval_report.json");
    io::write_json(&report, &summary)?;
    Ok(vec![csv_path, report])
}

fn comparison_rows(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    io::write_csv(
        path,
        &["mode", "ipc", "tau", "seed", "accuracy"],
        rows.iter().map(|r| {
            vec![
                r.mode.clone(),
                r.ipc.to_string(),
                r.tau.map(num).unwrap_or_default(),
                r.seed.to_string(),
                num(r.accuracy),
            ]
        }),
    )
}

#[derive(Debug, Clone, Serialize)]
struct ModeMean {
    mode: String,
    mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    means: Vec<ModeMean>,
    /// Seeds on which IWD scored at least as high as every other mode.
    iwd_top_seeds: usize,
    seeds: usize,
}

/// Number of seeds on which `mode` is at least as accurate as every other
/// mode in the table.
pub fn top_count(rows: &[ComparisonRow], mode: &str) -> usize {
    let seeds: Vec<u64> = engine::mean_by(rows, |r| r.seed).into_iter().map(|(s, _)| s).collect();
    seeds
        .iter()
        .filter(|&&s| {
            let at: Vec<&ComparisonRow> = rows.iter().filter(|r| r.seed == s).collect();
            match at.iter().find(|r| r.mode == mode) {
                Some(m) => at.iter().all(|r| r.accuracy <= m.accuracy),
                None => false,
            }
        })
        .count()
}

fn ablate(loaded: &Loaded, out: &Path) -> Result<Vec<PathBuf>> {
    let td = config::build_training(loaded)?;
    let d = config::require(&loaded.config.distill, "distill")?;
    config::validate_distill(d, &td.train)?;
    let e = config::require(&loaded.config.eval, "eval")?;
    config::validate_eval(e, &td.train)?;
    let test = config::build_test(loaded, &td.train)?;
    let sec = loaded.config.ablation.clone().unwrap_or_default();
    config::validate_ablation(&sec)?;

    let rows = engine::run_ablation(&td.train, &test, d, e, &sec.modes, sec.seeds, PAR)?;

    create_dir(out)?;
    let csv_path = out.join("ablation.csv");
    comparison_rows(&csv_path, &rows)?;
    let summary = AblationSummary {
        means: engine::mean_by(&rows, |r| r.mode.clone())
            .into_iter()
            .map(|(mode, mean)| ModeMean { mode, mean })
            .collect(),
        iwd_top_seeds: top_count(&rows, engine::AblationMode::Iwd.name()),
        seeds: sec.seeds,
    };
    let summary_path = out.join("ablation_summary.json");
    io::write_json(&summary_path, &summary)?;
    Ok(vec![csv_path, summary_path])
}

#[derive(Debug, Clone, Serialize)]
struct TauMean {
    tau: f64,
    mean: f64,
    std: f64,
}

#[derive(Debug, Clone, Serialize)]
struct TauSweepSummary {
    curve: Vec<TauMean>,
    best_tau: f64,
    best_mean: f64,
    unimodal: bool,
}

fn tau_sweep(loaded: &Loaded, out: &Path) -> Result<Vec<PathBuf>> {
    let td = config::build_training(loaded)?;
    let d = config::require(&loaded.config.distill, "distill")?;
    let e = config::require(&loaded.config.eval, "eval")?;
    let test = config::build_test(loaded, &td.train)?;
    let sec = loaded.config.tau_sweep.clone().unwrap_or_default();
    config::validate_tau_sweep(&sec, td.train.len())?;
    config::validate_distill(d, &td.train)?;
    config::validate_eval(e, &td.train)?;

    let rows = engine::tau_sweep(&td.train, &test, d, e, &sec.grid, sec.seeds, PAR)?;

    let curve: Vec<TauMean> = sec
        .grid
        .iter()
        .map(|&tau| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.tau == Some(tau)).map(|r| r.accuracy).collect();
            TauMean {
                tau,
                mean: math::mean(&accs),
                std: math::std_dev(&accs),
            }
        })
        .collect();
    let means: Vec<f64> = curve.iter().map(|c| c.mean).collect();
    let best = curve
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.mean.total_cmp(&b.1.mean).then(b.0.cmp(&a.0)))
        .map(|(_, c)| c.clone())
        .expect("grid validated non-empty");

    create_dir(out)?;
    let runs_path = out.join("tau_sweep_runs.csv");
    comparison_rows(&runs_path, &rows)?;
    let csv_path = out.join("tau_sweep.csv");
    io::write_csv(
        &csv_path,
        &["tau", "mean_accuracy", "std_accuracy"],
        curve.iter().map(|c| vec![num(c.tau), num(c.mean), num(c.std)]),
    )?;
    let summary = TauSweepSummary {
        unimodal: stats::is_unimodal(&means),
        best_tau: best.tau,
        best_mean: best.mean,
        curve,
    };
    let summary_path = out.join("tau_sweep_summary.json");
    io::write_json(&summary_path, &summary)?;
    let log_x = sec.grid.iter().all(|&t| t > 0.0);
    let series = svg::Series {
        name: "mean accuracy",
        points: summary.curve.iter().map(|c| (c.tau, c.mean)).collect(),
    };
    let chart = out.join("tau_sweep.svg");
    io::write_bytes(&chart, svg::line_chart(&[series], "temperature sweep", "tau", "accuracy", log_x).as_bytes())?;
    Ok(vec![csv_path, runs_path, summary_path, chart])
}

#[derive(Debug, Clone, Serialize)]
struct LooSummary {
    n: usize,
    spearman: f64,
    pearson: f64,
    solver: SolverDiag,
}

fn loo_oracle(loaded: &Loaded, out: &Path) -> Result<Vec<PathBuf>> {
    let td = config::build_training(loaded)?;
    let sec = config::require(&loaded.config.loo, "loo")?;
    config::validate_loo(sec, &td.train)?;
    let test = config::build_test(loaded, &td.train)?;
    let solver = loaded.config.solver.unwrap_or(HvpSolverConfig {
        damping: sec.trainer.l2,
        ..HvpSolverConfig::default()
    });
    solver.validate().map_err(|e| CliError::config("solver", e))?;

    let seed = loaded.config.seed;
    let train = &td.train;
    let model = influence::train_uniform(&sec.trainer, &sec.arch, train, seed)?;
    let metric = MetricSpec::TestLoss {
        x: test.x.clone(),
        labels: test.y.clone(),
    };
    let ctx = ClassicalContext::new(&model, train, &metric, &solver)?;
    let n = train.len();
    let idx: Vec<usize> = (0..n).collect();
    let scores = par::try_map(PAR, &idx, |&j| ctx.score(&model, train, j))?;
    // removing one of N instances is a -1/N reweighting
    let predicted: Vec<f64> = scores.iter().map(|s| -s / n as f64).collect();
    let actual = par::try_map(PAR, &idx, |&j| {
        influence::loo_effect_from(&sec.trainer, &sec.arch, train, j, &metric, seed, &model)
    })?;
    let summary = LooSummary {
        n,
        spearman: stats::spearman(&predicted, &actual)?,
        pearson: stats::pearson(&predicted, &actual)?,
        solver: ctx.diag,
    };

    create_dir(out)?;
    let csv_path = out.join("loo.csv");
    io::write_csv(
        &csv_path,
        &["index", "label", "influence", "predicted_delta", "loo_delta"],
        idx.iter().map(|&j| {
            vec![
                j.to_string(),
                train.y[j].to_string(),
                num(scores[j]),
                num(predicted[j]),
                num(actual[j]),
            ]
        }),
    )?;
    let summary_path = out.join("loo_summary.json");
    io::write_json(&summary_path, &summary)?;
    let ckpt = out.join("model.ckpt");
    io::write_checkpoint(&ckpt, &model)?;
    Ok(vec![csv_path, summary_path, ckpt])
}
