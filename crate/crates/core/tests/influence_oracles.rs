use iwd_core::ad::{self, Mat};
use iwd_core::data::{gen_gaussian_mixture, gen_two_moons, init_synthetic, InitMode, SyntheticSet, WeightedDataset};
use iwd_core::influence::{
    self, distill_influence_explicit, distill_influence_full, fd_objective_influence_oracle, score_all,
    solve_inverse_hvp, HvpSolverConfig, ImplicitMode, InfluenceConfig, InfluenceMode, SolverMethod,
};
use iwd_core::matching::{DiscrepancyKind, InnerSet, MatchScope, MatchSpec, StatisticKind, TrajectoryConfig};
use iwd_core::models::{ArchDescriptor, InitDistribution, SgdConfig, TrainMethod, TrainerConfig, WeightedLoss};
use iwd_core::par::Parallelism;

/// Enough damping to make the endpoint Hessian of a short MLP trajectory PD.
const DAMPED: f64 = 1.0;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(a.abs()).max(1e-12)
}

fn moons() -> (WeightedDataset, SyntheticSet, ArchDescriptor) {
    let ds = gen_two_moons(40, 0.1, 3).unwrap();
    let s = init_synthetic(&ds, 2, InitMode::RandomReal, 4).unwrap();
    (ds, s, ArchDescriptor::mlp(2, &[8], 2))
}

fn config(s_inner: InnerSet, steps: usize, spec: MatchSpec) -> InfluenceConfig {
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

fn specs() -> Vec<MatchSpec> {
    vec![
        MatchSpec::gradient_matching(),
        MatchSpec {
            stat: StatisticKind::FeatureMean,
            disc: DiscrepancyKind::SquaredL2,
            scope: MatchScope::Global,
        },
        MatchSpec {
            stat: StatisticKind::PredictionLoss,
            disc: DiscrepancyKind::MmdRbf { bandwidth: Some(0.5) },
            scope: MatchScope::PerClass,
        },
    ]
}

#[test]
fn explicit_term_matches_finite_differences() {
    let (ds, s, arch) = moons();
    for spec in specs() {
        let cfg = config(InnerSet::Synthetic, 3, spec);
        for j in (0..40).step_by(2) {
            let (e, per_step) = distill_influence_explicit(&s, &ds, &arch, &cfg, j).unwrap();
            let fd = fd_objective_influence_oracle(&s, &ds, &arch, &cfg, j, 1e-4).unwrap();
            assert!(rel(e, fd) <= 1e-4, "{spec:?} j={j}: {e} vs {fd}");
            assert!((per_step.iter().sum::<f64>() - e).abs() <= 1e-8);
        }
    }
}

#[test]
fn single_step_full_influence_matches_rerun_oracle() {
    let (ds, s, arch) = moons();
    for spec in specs() {
        let cfg = config(InnerSet::Real, 1, spec);
        for j in [0, 7, 19, 33] {
            let r = distill_influence_full(&s, &ds, &arch, &cfg, j).unwrap();
            assert!(!r.stationary_approx);
            let fd = fd_objective_influence_oracle(&s, &ds, &arch, &cfg, j, 1e-4).unwrap();
            assert!(rel(r.total, fd) <= 1e-2, "{spec:?} j={j}: {} vs {fd}", r.total);
            assert!((r.total - r.explicit_term - r.implicit_term).abs() <= 1e-10);
        }
    }
}

#[test]
fn unrolled_tangents_match_oracle_over_several_steps() {
    let (ds, s, arch) = moons();
    let mut cfg = config(InnerSet::Real, 3, MatchSpec::gradient_matching());
    cfg.trajectory.inner_sgd = SgdConfig {
        lr: 0.2,
        momentum: 0.5,
        weight_decay: 0.01,
    };
    cfg.implicit = ImplicitMode::Unrolled;
    for j in [2, 25] {
        let r = distill_influence_full(&s, &ds, &arch, &cfg, j).unwrap();
        let fd = fd_objective_influence_oracle(&s, &ds, &arch, &cfg, j, 1e-4).unwrap();
        assert!(rel(r.total, fd) <= 1e-5, "j={j}: {} vs {fd}", r.total);
    }
}

#[test]
fn stationary_approximation_is_flagged_and_finite() {
    let (ds, s, arch) = moons();
    let mut cfg = config(InnerSet::Real, 4, MatchSpec::gradient_matching());
    cfg.solver.damping = DAMPED;
    let r = distill_influence_full(&s, &ds, &arch, &cfg, 5).unwrap();
    assert!(r.stationary_approx);
    assert!(r.total.is_finite());
    assert_eq!(r.per_step.len(), 4);
    assert!((r.per_step.iter().sum::<f64>() - r.total).abs() <= 1e-8);
}

#[test]
fn frozen_inner_model_has_no_implicit_term() {
    let (ds, s, arch) = moons();
    let mut cfg = config(InnerSet::Real, 2, MatchSpec::gradient_matching());
    cfg.trajectory.inner_sgd.lr = 0.0;
    cfg.implicit = ImplicitMode::Unrolled;
    let r = distill_influence_full(&s, &ds, &arch, &cfg, 3).unwrap();
    assert_eq!(r.implicit_term, 0.0);
    assert_eq!(r.total, r.explicit_term);
}

#[test]
fn score_all_equals_per_instance_loop() {
    let (ds, s, arch) = moons();
    let mut cfg = config(InnerSet::Real, 2, MatchSpec::gradient_matching());
    cfg.solver.damping = DAMPED;
    cfg.trainer = Some(TrainerConfig {
        method: TrainMethod::Newton { iterations: 20, tol: 1e-10 },
        l2: 0.01,
        init: InitDistribution::KaimingUniform,
    });
    for mode in [InfluenceMode::Explicit, InfluenceMode::Full, InfluenceMode::Classical] {
        for par in [Parallelism::Sequential, Parallelism::Threads] {
            let all = score_all(&ds, &s, &arch, mode, &cfg, par).unwrap();
            assert_eq!(all.len(), ds.len());
            for j in [0, 13, 39] {
                let one = match mode {
                    InfluenceMode::Explicit => {
                        let (t, per_step) = distill_influence_explicit(&s, &ds, &arch, &cfg, j).unwrap();
                        assert_eq!(per_step, all[j].per_step);
                        t
                    }
                    InfluenceMode::Full => {
                        let r = distill_influence_full(&s, &ds, &arch, &cfg, j).unwrap();
                        assert_eq!(r, all[j]);
                        r.total
                    }
                    InfluenceMode::Classical => {
                        influence::classical_record_for(&ds, &s, &arch, &cfg, j).unwrap().total
                    }
                };
                assert_eq!(one.to_bits(), all[j].total.to_bits(), "{mode:?} j={j}");
            }
        }
    }
}

#[test]
fn duplicated_instances_score_identically() {
    let base = gen_gaussian_mixture(2, 6, 2, 0.5, 1).unwrap();
    let mut rows = base.x.data.clone();
    rows.extend_from_slice(base.row(0));
    let mut y = base.y.clone();
    y.push(base.y[0]);
    let ds = WeightedDataset::new(Mat::new(13, 2, rows), y, 2, "dup").unwrap();
    let s = init_synthetic(&ds, 2, InitMode::RandomReal, 2).unwrap();
    let arch = ArchDescriptor::mlp(2, &[4], 2);
    let mut cfg = config(InnerSet::Real, 2, MatchSpec::gradient_matching());
    cfg.solver.damping = DAMPED;
    cfg.trainer = Some(TrainerConfig {
        method: TrainMethod::Newton { iterations: 20, tol: 1e-10 },
        l2: 0.01,
        init: InitDistribution::KaimingUniform,
    });
    for mode in [InfluenceMode::Explicit, InfluenceMode::Full, InfluenceMode::Classical] {
        let all = score_all(&ds, &s, &arch, mode, &cfg, Parallelism::Threads).unwrap();
        assert_eq!(all[0].total.to_bits(), all[12].total.to_bits(), "{mode:?}");
    }
}

#[test]
fn fd_oracle_is_second_order() {
    let (ds, s, arch) = moons();
    let cfg = config(InnerSet::Real, 2, MatchSpec::gradient_matching());
    let j = 9;
    let d: Vec<f64> = [2e-2, 1e-2, 5e-3]
        .iter()
        .map(|&e| fd_objective_influence_oracle(&s, &ds, &arch, &cfg, j, e).unwrap())
        .collect();
    let order = ((d[0] - d[1]) / (d[1] - d[2])).abs().log2();
    assert!(order >= 1.9, "observed order {order}");
}

#[test]
fn cg_matches_dense_on_logistic_regression() {
    let ds = gen_gaussian_mixture(2, 40, 20, 1.0, 8).unwrap();
    let arch = ArchDescriptor::linear(20, 2);
    let theta = iwd_core::models::init_model(&arch, InitDistribution::KaimingUniform, 1).theta.0;
    let loss = WeightedLoss::new(&arch, &ds.x, &ds.y, &ds.w).unwrap();
    let g: Vec<f64> = (0..arch.num_params()).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
    let hvp = |v: &[f64]| ad::hvp(&loss, &theta, v);
    let cg = HvpSolverConfig::default();
    let dense = HvpSolverConfig {
        method: SolverMethod::Dense,
        ..cg
    };
    let (xc, diag) = solve_inverse_hvp(hvp, &g, &cg).unwrap();
    let (xd, _) = solve_inverse_hvp(hvp, &g, &dense).unwrap();
    assert!(diag.converged && diag.residual <= 1e-9);
    let err: f64 = xc.iter().zip(&xd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let nrm: f64 = xd.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(err / nrm <= 1e-6);
}

#[test]
fn indefinite_endpoint_hessian_is_a_solver_error() {
    let (ds, s, arch) = moons();
    let mut cfg = config(InnerSet::Real, 4, MatchSpec::gradient_matching());
    cfg.solver.damping = 0.0;
    let err = distill_influence_full(&s, &ds, &arch, &cfg, 0).unwrap_err();
    assert!(matches!(err, iwd_core::Error::Solver { .. }), "{err:?}");
}
