use iwd_core::ad::Mat;
use iwd_core::data::{gen_gaussian_mixture, WeightedDataset};
use iwd_core::influence::{self, ClassicalContext, HvpSolverConfig, MetricSpec};
use iwd_core::models::{ArchDescriptor, InitDistribution, TrainMethod, TrainerConfig};
use iwd_core::par::{self, Parallelism};
use iwd_core::stats::spearman;

const LAMBDA: f64 = 0.01;

fn trainer() -> TrainerConfig {
    TrainerConfig {
        method: TrainMethod::Newton { iterations: 50, tol: 1e-12 },
        l2: LAMBDA,
        init: InitDistribution::Normal { sigma: 0.0 },
    }
}

fn test_loss(ds: &WeightedDataset) -> MetricSpec {
    MetricSpec::TestLoss {
        x: ds.x.clone(),
        labels: ds.y.clone(),
    }
}

#[test]
fn classical_influence_ranks_like_leave_one_out() {
    let train = gen_gaussian_mixture(2, 100, 10, 1.5, 21).unwrap();
    let test = gen_gaussian_mixture(2, 100, 10, 1.5, 22).unwrap();
    let arch = ArchDescriptor::linear(10, 2);
    let metric = test_loss(&test);
    let model = influence::train_uniform(&trainer(), &arch, &train, 0).unwrap();
    let solver = HvpSolverConfig {
        damping: LAMBDA,
        ..HvpSolverConfig::default()
    };
    let ctx = ClassicalContext::new(&model, &train, &metric, &solver).unwrap();
    let n = train.len() as f64;
    let idx: Vec<usize> = (0..train.len()).collect();
    let est: Vec<f64> = idx.iter().map(|&j| ctx.score(&model, &train, j).unwrap() / n).collect();
    let loo: Vec<f64> = par::map(Parallelism::Threads, &idx, |&j| {
        -influence::loo_effect_from(&trainer(), &arch, &train, j, &metric, 0, &model).unwrap()
    });
    let rho = spearman(&est, &loo).unwrap();
    println!("classical influence vs leave-one-out: spearman {rho:.4}");
    assert!(rho >= 0.9, "spearman {rho}");
}

#[test]
fn zero_metric_gradient_gives_zero_scores() {
    let train = gen_gaussian_mixture(2, 10, 3, 1.0, 1).unwrap();
    let arch = ArchDescriptor::linear(3, 2);
    // at θ = 0 the four test-loss gradients cancel pairwise
    let x = Mat::new(4, 3, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
    let metric = MetricSpec::TestLoss {
        x,
        labels: vec![0, 1, 1, 0],
    };
    let zero = iwd_core::models::init_model(&arch, InitDistribution::Normal { sigma: 0.0 }, 0);
    let ctx = ClassicalContext::new(&zero, &train, &metric, &HvpSolverConfig::default()).unwrap();
    for j in 0..train.len() {
        assert_eq!(ctx.score(&zero, &train, j).unwrap(), 0.0);
    }
}

#[test]
fn duplicate_removal_barely_moves_the_metric() {
    let base = gen_gaussian_mixture(2, 100, 3, 1.5, 5).unwrap();
    let mut rows = base.x.data.clone();
    rows.extend_from_slice(base.row(4));
    let mut y = base.y.clone();
    y.push(base.y[4]);
    let ds = WeightedDataset::new(Mat::new(201, 3, rows), y, 2, "dup").unwrap();
    let test = gen_gaussian_mixture(2, 100, 3, 1.5, 6).unwrap();
    let arch = ArchDescriptor::linear(3, 2);
    let d = influence::loo_effect(&trainer(), &arch, &ds, 200, &test_loss(&test), 0).unwrap();
    assert!(d.abs() <= 1e-3, "{d}");
}

#[test]
fn symmetric_pair_matches_hand_retrained_model() {
    let x = Mat::new(2, 1, vec![1.0, -1.0]);
    let ds = WeightedDataset::new(x, vec![0, 1], 2, "pair").unwrap();
    let arch = ArchDescriptor::linear(1, 2);
    let metric = test_loss(&ds);
    let full = influence::train_uniform(&trainer(), &arch, &ds, 0).unwrap();
    let single = influence::train_uniform(&trainer(), &arch, &ds.subset(&[0]).unwrap(), 0).unwrap();
    let expected = metric.eval(&single).unwrap() - metric.eval(&full).unwrap();
    let d = influence::loo_effect(&trainer(), &arch, &ds, 1, &metric, 0).unwrap();
    assert_eq!(d, expected);
}
