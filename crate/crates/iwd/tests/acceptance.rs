//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. The process exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::{Duration, Instant};

use iwd::config::{self, Loaded};
use iwd::{Command, RunOptions};
use iwd_core::ad::{self, Mat, ScalarFunction};
use iwd_core::data::{gen_gaussian_mixture, gen_two_moons, init_synthetic, InitMode, SyntheticSet, WeightedDataset};
use iwd_core::engine::{self, ComparisonRow, DistillConfig};
use iwd_core::influence::{
    distill_influence_explicit, distill_influence_full, fd_objective_influence_oracle, solve_inverse_hvp,
    HvpSolverConfig, ImplicitMode, InfluenceConfig, SolverMethod,
};
use iwd_core::matching::{DiscrepancyKind, InnerSet, MatchScope, MatchSpec, StatisticKind, TrajectoryConfig};
use iwd_core::models::{init_model, ArchDescriptor, InitDistribution, SgdConfig, WeightedLoss};
use iwd_core::par::Parallelism;
use iwd_core::weighting::WeightPolicy;
use iwd_core::{math, stats};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn load(name: &str) -> Loaded {
    let mut l = config::load(&configs_dir().join(name)).expect("shipped config parses");
    l.apply_seed(None);
    l
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Largest coordinate-wise relative error, with the denominator floored at
/// 1e-6 of the reference's largest magnitude.
fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-6 * scale).max(1e-12))
        .fold(0.0, f64::max)
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

// Criterion 1 ---------------------------------------------------------------

struct LossFixture {
    arch: ArchDescriptor,
    x: Mat,
    y: Vec<usize>,
    w: Vec<f64>,
    theta: Vec<f64>,
}

fn loss_fixture(arch: ArchDescriptor, seed: u64) -> LossFixture {
    let ds = gen_gaussian_mixture(arch.classes, 12, arch.input_dim, 0.6, seed).unwrap();
    let theta = init_model(&arch, InitDistribution::KaimingUniform, seed + 1).theta.0;
    LossFixture {
        arch,
        x: ds.x,
        y: ds.y,
        w: ds.w,
        theta,
    }
}

/// Smallest distance of a first-layer pre-activation from the ReLU kink.
fn relu_margin(fx: &LossFixture) -> f64 {
    let slots = fx.arch.slots();
    let (w, b) = (slots[0], slots[1]);
    let mut margin = f64::INFINITY;
    for i in 0..fx.x.rows {
        let row = &fx.x.data[i * fx.x.cols..(i + 1) * fx.x.cols];
        for k in 0..w.cols {
            let z = fx.theta[b.offset + k]
                + row.iter().enumerate().map(|(r, xv)| xv * fx.theta[w.offset + r * w.cols + k]).sum::<f64>();
            margin = margin.min(z.abs());
        }
    }
    margin
}

fn fd_hvp(f: &impl ScalarFunction, theta: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let shift = |s: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + s * h * d).collect() };
    let gp = ad::grad(f, &shift(1.0)).unwrap();
    let gm = ad::grad(f, &shift(-1.0)).unwrap();
    gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}

fn derivatives() -> Check {
    let logistic = loss_fixture(ArchDescriptor::linear(5, 2), 3);
    let mlp = loss_fixture(ArchDescriptor::mlp(4, &[16], 3), 16);
    if relu_margin(&mlp) <= 1e-3 {
        return Err("MLP fixture sits within the finite-difference step of a ReLU kink".into());
    }
    let (mut grad_err, mut hvp_err) = (0.0f64, 0.0f64);
    for fx in [&logistic, &mlp] {
        let f = WeightedLoss::new(&fx.arch, &fx.x, &fx.y, &fx.w).map_err(|e| e.to_string())?;
        let g = ad::grad(&f, &fx.theta).map_err(|e| e.to_string())?;
        let fd = ad::fd_grad_oracle(&f, &fx.theta, 1e-5).map_err(|e| e.to_string())?;
        grad_err = grad_err.max(max_rel_err(&g, &fd));
        for k in 0..5 {
            let v = random_vec(fx.theta.len(), 100 + k);
            let hv = ad::hvp(&f, &fx.theta, &v).map_err(|e| e.to_string())?;
            hvp_err = hvp_err.max(max_rel_err(&hv, &fd_hvp(&f, &fx.theta, &v, 1e-4)));
        }
    }
    Ok((
        grad_err <= 1e-4 && hvp_err <= 1e-4,
        format!("max relative error grad {grad_err:.2e}, hvp {hvp_err:.2e} (tolerance 1e-4)"),
    ))
}

// Criterion 2 ---------------------------------------------------------------

fn solver() -> Check {
    let ds = gen_gaussian_mixture(2, 40, 20, 1.0, 8).unwrap();
    let arch = ArchDescriptor::linear(20, 2);
    let theta = init_model(&arch, InitDistribution::KaimingUniform, 1).theta.0;
    let loss = WeightedLoss::new(&arch, &ds.x, &ds.y, &ds.w).map_err(|e| e.to_string())?;
    let hvp = |v: &[f64]| ad::hvp(&loss, &theta, v);
    let cg = HvpSolverConfig {
        method: SolverMethod::Cg,
        damping: 0.01,
        ..HvpSolverConfig::default()
    };
    let dense = HvpSolverConfig {
        method: SolverMethod::Dense,
        ..cg
    };
    let mut worst = 0.0f64;
    for k in 0..3 {
        let g = random_vec(arch.num_params(), 7 + k);
        let (xc, _) = solve_inverse_hvp(hvp, &g, &cg).map_err(|e| e.to_string())?;
        let (xd, _) = solve_inverse_hvp(hvp, &g, &dense).map_err(|e| e.to_string())?;
        worst = worst.max(math::norm(&math::sub(&xc, &xd)) / math::norm(&xd));
    }
    Ok((
        worst <= 1e-6,
        format!("d = {}, worst relative difference {worst:.2e} (tolerance 1e-6)", arch.num_params()),
    ))
}

// Criterion 3 ---------------------------------------------------------------

fn classical_vs_loo() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = RunOptions {
        config: configs_dir().join("loo_logistic.json"),
        out: Some(dir.path().to_path_buf()),
        seed: None,
    };
    iwd::run(Command::LooOracle, &opts).map_err(|e| e.to_string())?;
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("loo_summary.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let rho = summary["spearman"].as_f64().ok_or("summary lacks spearman")?;
    let n = summary["n"].as_u64().unwrap_or(0);
    Ok((rho >= 0.9, format!("N = {n}, spearman {rho:.4} (threshold 0.9)")))
}

// Criteria 4 and 5 -------------------------------------------------------------

fn moons_fixture() -> (WeightedDataset, SyntheticSet, ArchDescriptor) {
    let ds = gen_two_moons(40, 0.1, 3).unwrap();
    let s = init_synthetic(&ds, 2, InitMode::RandomReal, 4).unwrap();
    (ds, s, ArchDescriptor::mlp(2, &[8], 2))
}

fn influence_cfg(s_inner: InnerSet, steps: usize, spec: MatchSpec) -> InfluenceConfig {
    InfluenceConfig {
        trajectory: TrajectoryConfig {
            s_inner,
            steps,
            inner_sgd: SgdConfig::vanilla(0.2),
            init: InitDistribution::KaimingUniform,
            init_samples: 2,
            unroll: false,
        },
        spec,
        solver: HvpSolverConfig::default(),
        implicit: ImplicitMode::Auto,
        trainer: None,
        seed: 11,
    }
}

fn specs() -> [MatchSpec; 3] {
    [
        MatchSpec::gradient_matching(),
        MatchSpec {
            stat: StatisticKind::FeatureMean,
            disc: DiscrepancyKind::SquaredL2,
            scope: MatchScope::Global,
        },
        MatchSpec {
            stat: StatisticKind::PredictionLoss,
            disc: DiscrepancyKind::MmdRbf { bandwidth: None },
            scope: MatchScope::PerClass,
        },
    ]
}

fn random_instances(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = r.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

fn explicit_term() -> Check {
    let (ds, s, arch) = moons_fixture();
    let picks = random_instances(ds.len(), 20, 404);
    let mut worst = 0.0f64;
    for spec in specs() {
        let cfg = influence_cfg(InnerSet::Synthetic, 3, spec);
        for &j in &picks {
            let (e, _) = distill_influence_explicit(&s, &ds, &arch, &cfg, j).map_err(|e| e.to_string())?;
            let fd = fd_objective_influence_oracle(&s, &ds, &arch, &cfg, j, 1e-4).map_err(|e| e.to_string())?;
            worst = worst.max(rel(e, fd));
        }
    }
    Ok((
        worst <= 1e-4,
        format!("20 instances x 3 objectives, worst relative error {worst:.2e} (tolerance 1e-4)"),
    ))
}

fn full_influence() -> Check {
    let (ds, s, arch) = moons_fixture();
    let picks = random_instances(ds.len(), 20, 505);
    let mut worst = 0.0f64;
    for spec in specs() {
        let cfg = influence_cfg(InnerSet::Real, 1, spec);
        for &j in &picks {
            let r = distill_influence_full(&s, &ds, &arch, &cfg, j).map_err(|e| e.to_string())?;
            if r.stationary_approx {
                return Err("single-step run fell back to the stationary approximation".into());
            }
            let fd = fd_objective_influence_oracle(&s, &ds, &arch, &cfg, j, 1e-4).map_err(|e| e.to_string())?;
            worst = worst.max(rel(r.total, fd));
        }
    }
    Ok((
        worst <= 1e-2,
        format!("20 instances x 3 objectives, worst relative error {worst:.2e} (tolerance 1e-2)"),
    ))
}

// Criteria 6 to 9: the noisy mixture experiment --------------------------------

struct Mixture {
    train: WeightedDataset,
    flipped: Vec<usize>,
    test: WeightedDataset,
    distill: DistillConfig,
    eval: engine::EvalConfig,
    seeds: usize,
    grid: Vec<f64>,
}

fn mixture() -> Mixture {
    let l = load("noisy_mixture.json");
    let td = config::build_training(&l).unwrap();
    let test = config::build_test(&l, &td.train).unwrap();
    let c = &l.config;
    Mixture {
        test,
        distill: c.distill.clone().unwrap(),
        eval: c.eval.clone().unwrap(),
        seeds: c.ablation.as_ref().unwrap().seeds,
        grid: c.tau_sweep.as_ref().unwrap().grid.clone(),
        flipped: td.flipped,
        train: td.train,
    }
}

fn hot_softmax(m: &Mixture) -> Check {
    let with = |policy| DistillConfig {
        policy,
        ..m.distill.clone()
    };
    let uniform = engine::distill(&m.train, &with(WeightPolicy::Uniform), Parallelism::Threads).map_err(|e| e.to_string())?;
    let hot = engine::distill(&m.train, &with(WeightPolicy::Softmax { tau: 1e6 }), Parallelism::Threads)
        .map_err(|e| e.to_string())?;
    if uniform.objective.len() != hot.objective.len() {
        return Err("runs have different lengths".into());
    }
    let worst = uniform
        .objective
        .iter()
        .zip(&hot.objective)
        .map(|(a, b)| rel(*a, *b))
        .fold(0.0, f64::max);
    Ok((
        worst <= 1e-5,
        format!(
            "{} iterations, {} refreshes, worst relative gap {worst:.2e} (tolerance 1e-5)",
            hot.objective.len(),
            hot.refreshes.len()
        ),
    ))
}

fn harmful_detection(m: &Mixture) -> Check {
    let n = m.train.len();
    let mut is_flipped = vec![false; n];
    for &i in &m.flipped {
        is_flipped[i] = true;
    }
    let mut passes = 0;
    let mut detail = Vec::new();
    for r in 0..5 {
        let seed = engine::repetition_seed(m.distill.seed, r);
        let cfg = DistillConfig {
            seed,
            ..m.distill.clone()
        };
        let s0 = init_synthetic(&m.train, cfg.ipc, cfg.init_mode, seed)
            .map_err(|e| e.to_string())?
            .with_lr(cfg.synthetic_lr);
        let records = engine::score_against(&m.train, &s0, &cfg, 0, Parallelism::Threads).map_err(|e| e.to_string())?;
        let scores: Vec<f64> = records.iter().map(|r| r.total).collect();
        let w = cfg.policy.weights(&scores).map_err(|e| e.to_string())?;
        let mean_of = |flag: bool| math::mean(&(0..n).filter(|&i| is_flipped[i] == flag).map(|i| w[i]).collect::<Vec<_>>());
        let (flipped, clean) = (mean_of(true), mean_of(false));
        if flipped < clean {
            passes += 1;
        }
        detail.push(format!("{:.2}", flipped / clean));
    }
    Ok((
        passes == 5,
        format!("{passes}/5 seeds with flipped mean weight below clean; flipped/clean ratios [{}]", detail.join(", ")),
    ))
}

fn mode_means(rows: &[ComparisonRow]) -> BTreeMap<String, f64> {
    engine::mean_by(rows, |r| r.mode.clone()).into_iter().collect()
}

fn ordering(m: &Mixture) -> Check {
    let rows = engine::run_ablation(
        &m.train,
        &m.test,
        &m.distill,
        &m.eval,
        &engine::AblationMode::ALL,
        m.seeds,
        Parallelism::Threads,
    )
    .map_err(|e| e.to_string())?;
    let means = mode_means(&rows);
    let get = |k: &str| means.get(k).copied().unwrap_or(f64::NAN);
    let (random, select, prune, iwd_acc) = (get("random-select"), get("influence-select"), get("prune-then-distill"), get("iwd"));
    let ordered = iwd_acc >= prune && prune >= select && select >= random;
    let top = iwd::commands::top_count(&rows, "iwd");
    Ok((
        ordered && top >= 4,
        format!(
            "means random {random:.4}, influence-select {select:.4}, prune-then-distill {prune:.4}, iwd {iwd_acc:.4}; iwd top on {top}/{} seeds",
            m.seeds
        ),
    ))
}

fn tau_unimodal(m: &Mixture) -> Check {
    const UNIFORM_LIMIT: f64 = 1e6;
    let mut grid = m.grid.clone();
    grid.push(UNIFORM_LIMIT);
    let rows = engine::tau_sweep(&m.train, &m.test, &m.distill, &m.eval, &grid, m.seeds, Parallelism::Threads)
        .map_err(|e| e.to_string())?;
    let mean_at = |tau: f64| math::mean(&rows.iter().filter(|r| r.tau == Some(tau)).map(|r| r.accuracy).collect::<Vec<_>>());
    let curve: Vec<f64> = m.grid.iter().map(|&t| mean_at(t)).collect();
    let uniform = mean_at(UNIFORM_LIMIT);
    let best = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unimodal = stats::is_unimodal(&curve);
    let shown: Vec<String> = m.grid.iter().zip(&curve).map(|(t, a)| format!("{t}: {a:.4}")).collect();
    Ok((
        unimodal && best >= uniform,
        format!(
            "curve [{}], unimodal {unimodal}, best {best:.4} vs uniform limit {uniform:.4}",
            shown.join(", ")
        ),
    ))
}

// Criterion 10 --------------------------------------------------------------

fn run_binary(cmd: &str, config: &Path, out: &Path, threads: usize) -> Result<(), String> {
    let o = Process::new(env!("CARGO_BIN_EXE_iwd"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg(threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(())
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(files)
}

fn determinism() -> Check {
    let plan: [(&str, &[&str]); 3] = [
        ("smoke.json", &["distill", "influence", "evaluate", "ablate", "tau-sweep", "loo-oracle"]),
        ("two_moons.json", &["distill", "influence", "evaluate"]),
        ("noisy_mixture.json", &["influence"]),
    ];
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for (cfg, cmds) in plan {
        let config = configs_dir().join(cfg);
        let mut runs = Vec::new();
        for threads in [1, 4] {
            for _ in 0..2 {
                let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
                for cmd in cmds {
                    run_binary(cmd, &config, dir.path(), threads)?;
                }
                runs.push(snapshot(dir.path())?);
            }
        }
        for other in &runs[1..] {
            if other.keys().ne(runs[0].keys()) {
                mismatched.push(format!("{cfg}: different artifact sets"));
                continue;
            }
            for (name, bytes) in &runs[0] {
                compared += 1;
                if other[name] != *bytes {
                    mismatched.push(format!("{cfg}/{name}"));
                }
            }
        }
    }
    Ok((
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{compared} artifact comparisons across reruns with 1 and 4 threads, all identical")
        } else {
            format!("differing artifacts: {}", mismatched.join(", "))
        },
    ))
}

// ---------------------------------------------------------------------------

struct Report {
    failed: usize,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, limit: Option<Duration>, check: impl FnOnce() -> Check) {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let within = limit.is_none_or(|l| elapsed <= l);
        let time = match limit {
            Some(l) => format!("{:.1} s, limit {} s", elapsed.as_secs_f64(), l.as_secs()),
            None => format!("{:.1} s", elapsed.as_secs_f64()),
        };
        let (pass, detail) = match result {
            Ok((ok, detail)) => (ok && within, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            self.failed += 1;
        }
        let status = if pass { "PASS" } else { "FAIL" };
        println!("{status} [{id:>2}] {name}: {detail} ({time})");
    }
}

fn main() {
    let mut report = Report { failed: 0 };
    let secs = Duration::from_secs;
    report.run(1, "derivative correctness", Some(secs(10)), derivatives);
    report.run(2, "CG against dense solve", Some(secs(5)), solver);
    report.run(3, "classical influence against leave-one-out", Some(secs(120)), classical_vs_loo);
    report.run(4, "explicit term against finite differences", Some(secs(60)), explicit_term);
    report.run(5, "single-step full influence against re-run oracle", Some(secs(120)), full_influence);
    let m = mixture();
    report.run(6, "high-temperature softmax reproduces uniform", None, || hot_softmax(&m));
    report.run(7, "flipped labels receive lower weight", None, || harmful_detection(&m));
    report.run(8, "ablation ordering", Some(secs(600)), || ordering(&m));
    report.run(9, "temperature sweep is unimodal", None, || tau_unimodal(&m));
    report.run(10, "artifacts independent of reruns and threads", None, determinism);
    if report.failed > 0 {
        println!("{} acceptance criteria failed", report.failed);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
