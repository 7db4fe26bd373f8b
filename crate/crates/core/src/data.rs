//! Real datasets, synthetic sets, and their generators.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ad::Mat;
use crate::math;
use crate::models::permutation;
use crate::rng;
use crate::{Error, Result};

/// Real instances with per-instance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDataset {
    /// `N x d` features.
    pub x: Mat,
    pub y: Vec<usize>,
    pub w: Vec<f64>,
    pub class_count: usize,
    pub provenance: String,
}

impl WeightedDataset {
    /// Builds a dataset with uniform weights `1/N`.
    pub fn new(x: Mat, y: Vec<usize>, class_count: usize, provenance: impl Into<String>) -> Result<Self> {
        let n = y.len();
        let ds = WeightedDataset {
            x,
            y,
            w: vec![1.0 / n.max(1) as f64; n],
            class_count,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::contract("dataset is empty"));
        }
        if self.x.rows != n || self.w.len() != n {
            return Err(Error::contract("dataset features, labels and weights disagree in length"));
        }
        if self.class_count < 2 {
            return Err(Error::contract("dataset needs at least 2 classes"));
        }
        if self.y.iter().any(|&c| c >= self.class_count) {
            return Err(Error::contract("label out of range"));
        }
        if self.w.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::contract("instance weights must be non-negative"));
        }
        if !math::all_finite(&self.x.data) {
            return Err(Error::contract("non-finite feature value"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x.data[i * self.x.cols..(i + 1) * self.x.cols]
    }

    pub fn rows(&self, idx: &[usize]) -> Mat {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat::new(idx.len(), d, data)
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.y[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] == class).collect()
    }

    /// Sub-dataset over `idx`, re-weighted uniformly.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        WeightedDataset::new(
            self.rows(idx),
            self.labels(idx),
            self.class_count,
            alloc::format!("{}[subset {}]", self.provenance, idx.len()),
        )
    }

    pub fn with_weights(mut self, w: Vec<f64>) -> Result<Self> {
        self.w = w;
        self.validate()?;
        Ok(self)
    }
}

/// Learnable synthetic inputs with fixed one-hot labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSet {
    /// `M x d`, class-major: rows `c*ipc .. (c+1)*ipc` belong to class `c`.
    pub x: Mat,
    pub y: Vec<usize>,
    /// Learning rate used when training on this set.
    pub lr: f64,
    pub ipc: usize,
    pub class_count: usize,
}

impl SyntheticSet {
    pub const DEFAULT_LR: f64 = 0.01;

    pub fn from_rows(x: Mat, ipc: usize, class_count: usize, lr: f64) -> Result<Self> {
        let y = (0..class_count).flat_map(|c| core::iter::repeat_n(c, ipc)).collect();
        let s = SyntheticSet {
            x,
            y,
            lr,
            ipc,
            class_count,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ipc == 0 {
            return Err(Error::contract("ipc must be positive"));
        }
        let m = self.ipc * self.class_count;
        if self.x.rows != m || self.y.len() != m {
            return Err(Error::contract("synthetic set size is not ipc x classes"));
        }
        for (i, &c) in self.y.iter().enumerate() {
            if c != i / self.ipc {
                return Err(Error::contract("synthetic labels are not class-major"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract("synthetic learning rate must be positive"));
        }
        if !math::all_finite(&self.x.data) {
            return Err(Error::contract("non-finite synthetic feature"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    /// View as a uniformly weighted dataset.
    pub fn as_dataset(&self) -> WeightedDataset {
        WeightedDataset {
            x: self.x.clone(),
            y: self.y.clone(),
            w: vec![1.0 / self.len() as f64; self.len()],
            class_count: self.class_count,
            provenance: String::from("synthetic"),
        }
    }

    /// Wraps selected real instances (grouped by class) as a synthetic set.
    pub fn from_selection(ds: &WeightedDataset, per_class: &[Vec<usize>], lr: f64) -> Result<Self> {
        let ipc = per_class.first().map_or(0, |v| v.len());
        if per_class.len() != ds.class_count || per_class.iter().any(|v| v.len() != ipc) {
            return Err(Error::contract("selection must have the same count for every class"));
        }
        let idx: Vec<usize> = per_class.iter().flatten().copied().collect();
        SyntheticSet::from_rows(ds.rows(&idx), ipc, ds.class_count, lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub flip_fraction: f64,
    pub seed: u64,
}

fn normal(seed: u64) -> (rng::Rng, Normal<f64>) {
    (rng::stream(seed, rng::NOISE), Normal::new(0.0, 1.0).expect("unit normal"))
}

/// Class `c` is centred at angle `2πc/classes` on the unit circle in the first
/// two coordinates; remaining coordinates are zero-mean.
pub fn class_center(c: usize, classes: usize, d: usize) -> Vec<f64> {
    let a = 2.0 * core::f64::consts::PI * c as f64 / classes as f64;
    let mut mu = vec![0.0; d];
    mu[0] = math::cos(a);
    mu[1] = math::sin(a);
    mu
}

pub fn gen_gaussian_mixture(
    classes: usize,
    per_class: usize,
    d: usize,
    spread: f64,
    seed: u64,
) -> Result<WeightedDataset> {
    if classes < 2 || per_class < 1 || d < 2 {
        return Err(Error::contract("mixture needs classes >= 2, per_class >= 1, d >= 2"));
    }
    let (mut r, nd) = normal(seed);
    let mut data = Vec::with_capacity(classes * per_class * d);
    let mut y = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mu = class_center(c, classes, d);
        for _ in 0..per_class {
            for m in &mu {
                let z: f64 = nd.sample(&mut r);
                data.push(m + spread * z);
            }
            y.push(c);
        }
    }
    WeightedDataset::new(
        Mat::new(classes * per_class, d, data),
        y,
        classes,
        alloc::format!("gaussian-mixture(c={classes},n={per_class},d={d},s={spread},seed={seed})"),
    )
}

/// Interleaved half-circles: class 0 on the upper unit half-circle, class 1 on
/// the lower unit half-circle at `(1 - cos t, 1 - sin t - 0.5)`.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<WeightedDataset> {
    if n < 2 {
        return Err(Error::contract("two moons needs at least 2 points"));
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let (mut r, nd) = normal(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    let t = |i: usize, m: usize| {
        if m <= 1 {
            0.0
        } else {
            core::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    for i in 0..n_out {
        let a = t(i, n_out);
        data.push(math::cos(a));
        data.push(math::sin(a));
        y.push(0);
    }
    for i in 0..n_in {
        let a = t(i, n_in);
        data.push(1.0 - math::cos(a));
        data.push(1.0 - math::sin(a) - 0.5);
        y.push(1);
    }
    if noise > 0.0 {
        for v in &mut data {
            let z: f64 = nd.sample(&mut r);
            *v += noise * z;
        }
    }
    WeightedDataset::new(
        Mat::new(n, 2, data),
        y,
        2,
        alloc::format!("two-moons(n={n},noise={noise},seed={seed})"),
    )
}

/// Flips exactly `⌊f·N⌋` labels chosen by a seeded shuffle to a uniformly
/// random different class. Returns the flipped indices in ascending order.
pub fn flip_labels(ds: &WeightedDataset, spec: &NoiseSpec) -> Result<(WeightedDataset, Vec<usize>)> {
    if !(0.0..=1.0).contains(&spec.flip_fraction) {
        return Err(Error::contract("flip_fraction must lie in [0, 1]"));
    }
    let n = ds.len();
    let k = math::floor(spec.flip_fraction * n as f64) as usize;
    let mut r = rng::stream(spec.seed, rng::SHUFFLE);
    let order = permutation(n, &mut r);
    let mut flipped: Vec<usize> = order[..k].to_vec();
    flipped.sort_unstable();
    let mut out = ds.clone();
    for &i in &flipped {
        let shift = r.random_range(1..ds.class_count);
        out.y[i] = (ds.y[i] + shift) % ds.class_count;
    }
    Ok((out, flipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    RandomReal,
    ClassMean,
    Noise,
}

pub fn init_synthetic(ds: &WeightedDataset, ipc: usize, mode: InitMode, seed: u64) -> Result<SyntheticSet> {
    if ipc == 0 {
        return Err(Error::contract("ipc must be positive"));
    }
    let d = ds.dim();
    let mut data = Vec::with_capacity(ipc * ds.class_count * d);
    let mut r = rng::stream(seed, rng::SELECT);
    for c in 0..ds.class_count {
        let members = ds.indices_of_class(c);
        match mode {
            InitMode::RandomReal => {
                if members.len() < ipc {
                    return Err(Error::contract(alloc::format!(
                        "class {c} has {} instances, fewer than ipc={ipc}",
                        members.len()
                    )));
                }
                let order = permutation(members.len(), &mut r);
                for &k in &order[..ipc] {
                    data.extend_from_slice(ds.row(members[k]));
                }
            }
            InitMode::ClassMean => {
                if members.is_empty() {
                    return Err(Error::contract(alloc::format!("class {c} has no instances")));
                }
                let mut mean = vec![0.0; d];
                for &i in &members {
                    math::axpy(1.0, ds.row(i), &mut mean);
                }
                let inv = 1.0 / members.len() as f64;
                mean.iter_mut().for_each(|v| *v *= inv);
                for _ in 0..ipc {
                    data.extend_from_slice(&mean);
                }
            }
            InitMode::Noise => {
                let nd = Normal::new(0.0, 1.0).expect("unit normal");
                for _ in 0..ipc * d {
                    data.push(nd.sample(&mut r));
                }
            }
        }
    }
    SyntheticSet::from_rows(
        Mat::new(ipc * ds.class_count, d, data),
        ipc,
        ds.class_count,
        SyntheticSet::DEFAULT_LR,
    )
}

/// IDX byte formats (big-endian header, unsigned-byte payload).
pub mod idx {
    use super::*;

    pub const IMAGES_MAGIC: u32 = 0x0000_0803;
    pub const LABELS_MAGIC: u32 = 0x0000_0801;

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct IdxImages {
        pub count: usize,
        pub rows: usize,
        pub cols: usize,
        pub pixels: Vec<u8>,
    }

    fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::format(offset, "truncated header"))
    }

    fn magic(bytes: &[u8], expected: u32) -> Result<()> {
        let m = be_u32(bytes, 0)?;
        if m != expected {
            return Err(Error::format(
                0,
                alloc::format!("bad magic 0x{m:08x}, expected 0x{expected:08x}"),
            ));
        }
        Ok(())
    }

    pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
        magic(bytes, IMAGES_MAGIC)?;
        let count = be_u32(bytes, 4)? as usize;
        let rows = be_u32(bytes, 8)? as usize;
        let cols = be_u32(bytes, 12)? as usize;
        let need = count * rows * cols;
        let body = &bytes[16..];
        if body.len() < need {
            return Err(Error::format(
                16 + body.len(),
                alloc::format!("truncated pixel data: need {need} bytes, have {}", body.len()),
            ));
        }
        if body.len() > need {
            return Err(Error::format(16 + need, "trailing bytes after pixel data"));
        }
        Ok(IdxImages {
            count,
            rows,
            cols,
            pixels: body.to_vec(),
        })
    }

    pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
        magic(bytes, LABELS_MAGIC)?;
        let count = be_u32(bytes, 4)? as usize;
        let body = &bytes[8..];
        if body.len() < count {
            return Err(Error::format(
                8 + body.len(),
                alloc::format!("truncated label data: need {count} bytes, have {}", body.len()),
            ));
        }
        if body.len() > count {
            return Err(Error::format(8 + count, "trailing bytes after label data"));
        }
        Ok(body.to_vec())
    }

    /// Pixels scaled to `[0,1]`; with `normalize`, shifted and scaled to zero
    /// mean and unit variance over the whole (single-channel) image set.
    pub fn to_dataset(images: &IdxImages, labels: &[u8], normalize: bool, provenance: &str) -> Result<WeightedDataset> {
        if images.count != labels.len() {
            // the label count field sits at byte 4 of the labels file
            return Err(Error::format(
                4,
                alloc::format!(
                    "label count {} does not match image count {}",
                    labels.len(),
                    images.count
                ),
            ));
        }
        let mut data: Vec<f64> = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        if normalize {
            let m = math::mean(&data);
            let s = math::std_dev(&data);
            let s = if s > 0.0 { s } else { 1.0 };
            data.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let classes = y.iter().copied().max().unwrap_or(0).max(1) + 1;
        WeightedDataset::new(
            Mat::new(images.count, images.rows * images.cols, data),
            y,
            classes,
            provenance,
        )
    }

    /// Encodes features in `[0,1]` as an images file (rounded to the nearest
    /// 1/255) and labels as a labels file.
    pub fn encode(ds: &WeightedDataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
        if rows * cols != ds.dim() {
            return Err(Error::contract("image shape does not match feature width"));
        }
        if ds.class_count > 256 {
            return Err(Error::contract("IDX labels hold at most 256 classes"));
        }
        let mut img = Vec::with_capacity(16 + ds.x.len());
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        for &v in &ds.x.data {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract("IDX encoding needs features in [0, 1]"));
            }
            img.push(math::round(v * 255.0) as u8);
        }
        let mut lab = Vec::with_capacity(8 + ds.len());
        lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
        lab.extend(ds.y.iter().map(|&c| c as u8));
        Ok((img, lab))
    }
}
