//! Experiment configuration: one JSON document per experiment, parsed with
//! field paths on error and validated per subcommand before any compute.

use std::path::{Path, PathBuf};

use iwd_core::data::{self, NoiseSpec, WeightedDataset};
use iwd_core::engine::{AblationMode, DistillConfig, EvalConfig};
use iwd_core::influence::{HvpSolverConfig, InfluenceMode};
use iwd_core::models::{ArchDescriptor, TrainerConfig};
use iwd_core::weighting::WeightPolicy;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoonsSpec {
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// IDX image and label files; relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Keep only the first `limit` instances.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    TwoMoons(MoonsSpec),
    GaussianMixture(MixtureSpec),
    Idx(IdxSpec),
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceSection {
    /// Defaults to the mode implied by the inner set.
    #[serde(default)]
    pub mode: Option<InfluenceMode>,
    /// Required by the classical mode.
    #[serde(default)]
    pub trainer: Option<TrainerConfig>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_bins() -> usize {
    20
}

impl Default for InfluenceSection {
    fn default() -> Self {
        InfluenceSection {
            mode: None,
            trainer: None,
            histogram_bins: default_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default = "five")]
    pub seeds: usize,
    #[serde(default = "all_modes")]
    pub modes: Vec<AblationMode>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            seeds: five(),
            modes: all_modes(),
        }
    }
}

fn five() -> usize {
    5
}

fn all_modes() -> Vec<AblationMode> {
    AblationMode::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSweepSection {
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "five")]
    pub seeds: usize,
}

impl Default for TauSweepSection {
    fn default() -> Self {
        TauSweepSection {
            grid: default_grid(),
            seeds: five(),
        }
    }
}

fn default_grid() -> Vec<f64> {
    vec![0.01, 0.1, 1.0, 10.0, 100.0]
}

/// Classical influence against exact leave-one-out retraining, with the test
/// loss on `test_dataset` as the metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LooSection {
    pub arch: ArchDescriptor,
    pub trainer: TrainerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub test_dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    /// Solver for the leave-one-out comparison.
    #[serde(default)]
    pub solver: Option<HvpSolverConfig>,
    #[serde(default)]
    pub influence: Option<InfluenceSection>,
    #[serde(default)]
    pub ablation: Option<AblationSection>,
    #[serde(default)]
    pub tau_sweep: Option<TauSweepSection>,
    #[serde(default)]
    pub loo: Option<LooSection>,
    /// Synthetic-set metadata file read by `evaluate`; defaults to
    /// `synthetic.json` in the output directory.
    #[serde(default)]
    pub synthetic: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// A parsed config together with the directory relative paths resolve from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

/// Parses a config document; errors name the JSON path of the offending
/// field.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::config("<root>", e))?;
    // tagged enums hide the path of a failing inner field, so datasets are
    // checked variant by variant first
    for field in ["dataset", "test_dataset"] {
        if let Some(v) = value.get(field) {
            check_dataset(v, field)?;
        }
    }
    let cfg: ExperimentConfig = with_path(value, "")?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::config(
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", cfg.schema_version),
        ));
    }
    Ok(cfg)
}

fn with_path<T: for<'de> Deserialize<'de>>(value: serde_json::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let field = match (prefix.is_empty(), inner == ".") {
            (true, true) => "<root>".to_string(),
            (true, false) => inner,
            (false, true) => prefix.to_string(),
            (false, false) => format!("{prefix}.{inner}"),
        };
        CliError::config(field, e.into_inner())
    })
}

fn check_dataset(v: &serde_json::Value, field: &str) -> Result<()> {
    let Some(obj) = v.as_object() else {
        return Err(CliError::config(field, "expected an object"));
    };
    let mut rest = obj.clone();
    let kind = rest.remove("kind");
    let rest = serde_json::Value::Object(rest);
    match kind.as_ref().and_then(|k| k.as_str()) {
        Some("two-moons") => with_path::<MoonsSpec>(rest, field).map(drop),
        Some("gaussian-mixture") => with_path::<MixtureSpec>(rest, field).map(drop),
        Some("idx") => with_path::<IdxSpec>(rest, field).map(drop),
        _ => Err(CliError::config(
            format!("{field}.kind"),
            "expected one of two-moons, gaussian-mixture, idx",
        )),
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigFile {
        path: path.into(),
        source,
    })?;
    let config = parse(&text)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base_dir })
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Replaces the experiment seed and pushes it into the nested configs.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.config.seed = s;
        }
        let s = self.config.seed;
        if let Some(d) = &mut self.config.distill {
            d.seed = s;
        }
        if let Some(e) = &mut self.config.eval {
            e.seed = s;
        }
    }

    /// Output directory: `--out` (relative to the working directory) wins over
    /// `output_dir` (relative to the config file).
    pub fn output_dir(&self, cli_out: Option<&Path>) -> Result<PathBuf> {
        match (cli_out, &self.config.output_dir) {
            (Some(p), _) => Ok(p.to_path_buf()),
            (None, Some(p)) => Ok(self.resolve(p)),
            (None, None) => Err(CliError::config("output_dir", "no output directory (set output_dir or pass --out)")),
        }
    }

    pub fn synthetic_path(&self, out_dir: &Path) -> PathBuf {
        match &self.config.synthetic {
            Some(p) => self.resolve(p),
            None => out_dir.join("synthetic.json"),
        }
    }
}

fn field_err(field: &str) -> impl Fn(iwd_core::Error) -> CliError + '_ {
    move |e| CliError::config(field, e)
}

/// Builds a dataset; failures are reported against `field`.
pub fn build_dataset(spec: &DatasetSpec, loaded: &Loaded, field: &str) -> Result<WeightedDataset> {
    let err = field_err(field);
    match spec {
        DatasetSpec::TwoMoons(MoonsSpec { n, noise, seed }) => data::gen_two_moons(*n, *noise, *seed).map_err(err),
        DatasetSpec::GaussianMixture(MixtureSpec {
            classes,
            per_class,
            dim,
            spread,
            seed,
        }) => data::gen_gaussian_mixture(*classes, *per_class, *dim, *spread, *seed).map_err(err),
        DatasetSpec::Idx(IdxSpec {
            images,
            labels,
            normalize,
            limit,
        }) => {
            let (ip, lp) = (loaded.resolve(images), loaded.resolve(labels));
            for (p, name) in [(&ip, "images"), (&lp, "labels")] {
                if !p.is_file() {
                    return Err(CliError::config(format!("{field}.{name}"), format!("{} does not exist", p.display())));
                }
            }
            let ds = io::load_idx_pair(&ip, &lp, *normalize).map_err(|e| CliError::config(field, e))?;
            match limit {
                Some(0) => Err(CliError::config(format!("{field}.limit"), "limit must be positive")),
                Some(k) if *k < ds.len() => {
                    let keep: Vec<usize> = (0..*k).collect();
                    ds.subset(&keep).map_err(err)
                }
                _ => Ok(ds),
            }
        }
    }
}

/// The real training set after optional label noise, and the flipped indices.
pub struct TrainingData {
    pub train: WeightedDataset,
    pub flipped: Vec<usize>,
}

pub fn build_training(loaded: &Loaded) -> Result<TrainingData> {
    let clean = build_dataset(&loaded.config.dataset, loaded, "dataset")?;
    match &loaded.config.noise {
        None => Ok(TrainingData {
            train: clean,
            flipped: Vec::new(),
        }),
        Some(spec) => {
            let (train, flipped) = data::flip_labels(&clean, spec).map_err(field_err("noise"))?;
            Ok(TrainingData { train, flipped })
        }
    }
}

pub fn build_test(loaded: &Loaded, train: &WeightedDataset) -> Result<WeightedDataset> {
    let spec = require(&loaded.config.test_dataset, "test_dataset")?;
    let test = build_dataset(spec, loaded, "test_dataset")?;
    if test.dim() != train.dim() {
        return Err(CliError::config(
            "test_dataset",
            format!("dimension {} differs from the training set's {}", test.dim(), train.dim()),
        ));
    }
    if test.y.iter().any(|&y| y >= train.class_count) {
        return Err(CliError::config("test_dataset", "labels outside the training classes"));
    }
    Ok(test)
}

pub fn require<'a, T>(v: &'a Option<T>, field: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| CliError::config(field, "section is required by this command"))
}

fn check_arch(arch: &ArchDescriptor, ds: &WeightedDataset, field: &str) -> Result<()> {
    arch.validate().map_err(field_err(field))?;
    if arch.input_dim != ds.dim() {
        return Err(CliError::config(
            format!("{field}.input_dim"),
            format!("{} does not match the dataset dimension {}", arch.input_dim, ds.dim()),
        ));
    }
    if arch.classes != ds.class_count {
        return Err(CliError::config(
            format!("{field}.classes"),
            format!("{} does not match the dataset's {} classes", arch.classes, ds.class_count),
        ));
    }
    Ok(())
}

/// Checks the distillation config against the training set, naming the
/// first failing field.
pub fn validate_distill(d: &DistillConfig, ds: &WeightedDataset) -> Result<()> {
    let n = ds.len();
    check_arch(&d.arch, ds, "distill.arch")?;
    d.trajectory.validate().map_err(field_err("distill.trajectory"))?;
    d.spec.validate(&d.arch).map_err(field_err("distill.spec"))?;
    d.solver.validate().map_err(field_err("distill.solver"))?;
    d.policy.validate(n).map_err(field_err("distill.policy"))?;
    if d.ipc == 0 {
        return Err(CliError::config("distill.ipc", "must be positive"));
    }
    let smallest = ds.class_counts().into_iter().min().unwrap_or(0);
    if d.init_mode == data::InitMode::RandomReal && d.ipc > smallest {
        return Err(CliError::config(
            "distill.ipc",
            format!("{} exceeds the smallest class size {smallest}", d.ipc),
        ));
    }
    if d.outer_steps == 0 {
        return Err(CliError::config("distill.outer_steps", "must be at least 1"));
    }
    if !(d.outer_lr >= 0.0 && d.outer_lr.is_finite()) {
        return Err(CliError::config("distill.outer_lr", "must be finite and non-negative"));
    }
    if !(d.lr_outer_lr >= 0.0 && d.lr_outer_lr.is_finite()) {
        return Err(CliError::config("distill.lr_outer_lr", "must be finite and non-negative"));
    }
    if !(0.0..1.0).contains(&d.outer_momentum) {
        return Err(CliError::config("distill.outer_momentum", "must lie in [0, 1)"));
    }
    if !(d.synthetic_lr > 0.0 && d.synthetic_lr.is_finite()) {
        return Err(CliError::config("distill.synthetic_lr", "must be positive"));
    }
    if d.batch_size == 0 || d.batch_size > n {
        return Err(CliError::config(
            "distill.batch_size",
            format!("must lie in 1..={n}, got {}", d.batch_size),
        ));
    }
    if d.influence_refresh == 0 {
        return Err(CliError::config("distill.influence_refresh", "must be at least 1"));
    }
    d.validate(n).map_err(field_err("distill"))
}

pub fn validate_eval(e: &EvalConfig, ds: &WeightedDataset) -> Result<()> {
    check_arch(&e.arch, ds, "eval.arch")?;
    e.sgd.validate().map_err(field_err("eval.sgd"))?;
    if e.n_repeats == 0 {
        return Err(CliError::config("eval.n_repeats", "must be at least 1"));
    }
    if let Some(lr) = e.lr {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CliError::config("eval.lr", "must be positive"));
        }
    }
    e.validate().map_err(field_err("eval"))
}

pub fn validate_influence(sec: &InfluenceSection, d: &DistillConfig) -> Result<InfluenceMode> {
    let mode = sec.mode.unwrap_or(InfluenceMode::for_inner(d.trajectory.s_inner));
    if mode == InfluenceMode::Classical && sec.trainer.is_none() {
        return Err(CliError::config("influence.trainer", "the classical mode needs a trainer"));
    }
    if sec.histogram_bins == 0 {
        return Err(CliError::config("influence.histogram_bins", "must be at least 1"));
    }
    Ok(mode)
}

pub fn validate_ablation(sec: &AblationSection) -> Result<()> {
    if sec.seeds == 0 {
        return Err(CliError::config("ablation.seeds", "must be at least 1"));
    }
    if sec.modes.is_empty() {
        return Err(CliError::config("ablation.modes", "must list at least one mode"));
    }
    Ok(())
}

pub fn validate_tau_sweep(sec: &TauSweepSection, n: usize) -> Result<()> {
    if sec.seeds == 0 {
        return Err(CliError::config("tau_sweep.seeds", "must be at least 1"));
    }
    if sec.grid.is_empty() {
        return Err(CliError::config("tau_sweep.grid", "must not be empty"));
    }
    for (i, &tau) in sec.grid.iter().enumerate() {
        WeightPolicy::Softmax { tau }
            .validate(n)
            .map_err(field_err(&format!("tau_sweep.grid[{i}]")))?;
    }
    Ok(())
}

pub fn validate_loo(sec: &LooSection, ds: &WeightedDataset) -> Result<()> {
    check_arch(&sec.arch, ds, "loo.arch")?;
    if ds.len() < 2 {
        return Err(CliError::config("dataset", "leave-one-out needs at least two instances"));
    }
    if sec.trainer.l2 < 0.0 {
        return Err(CliError::config("loo.trainer.l2", "must be non-negative"));
    }
    Ok(())
}
