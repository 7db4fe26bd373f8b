//! Rank statistics and curve shape checks.

use alloc::vec;
use alloc::vec::Vec;

use crate::{math, Error, Result};

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::contract("correlation needs two equal-length samples of size >= 2"));
    }
    let (ma, mb) = (math::mean(a), math::mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::contract("correlation of a constant sample is undefined"));
    }
    Ok(sab / math::sqrt(saa * sbb))
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if !math::all_finite(a) || !math::all_finite(b) {
        return Err(Error::contract("correlation inputs must be finite"));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Whether the curve rises (non-strictly) to its first maximum and never
/// rises again after it, i.e. has a single peak, interior or at a boundary.
pub fn is_unimodal(ys: &[f64]) -> bool {
    if ys.iter().any(|y| y.is_nan()) {
        return false;
    }
    let Some(peak) = ys.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).map(|(i, _)| i) else {
        return true;
    };
    ys[..=peak].windows(2).all(|w| w[0] <= w[1]) && ys[peak..].windows(2).all(|w| w[0] >= w[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unimodal_shapes() {
        assert!(is_unimodal(&[]));
        assert!(is_unimodal(&[1.0]));
        assert!(is_unimodal(&[0.1, 0.5, 0.9, 0.9, 0.4]));
        assert!(is_unimodal(&[0.9, 0.5, 0.1]));
        assert!(is_unimodal(&[0.1, 0.5, 0.9]));
        assert!(!is_unimodal(&[0.5, 0.1, 0.5]));
        assert!(!is_unimodal(&[0.1, 0.9, 0.2, 0.3]));
        assert!(!is_unimodal(&[0.1, f64::NAN]));
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn monotone_maps_are_perfectly_correlated() {
        let a = [0.1, -2.0, 5.0, 3.3, 0.0];
        let b: Vec<f64> = a.iter().map(|x| x * x * x + 1.0).collect();
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_is_rejected() {
        assert!(spearman(&[1.0, 1.0], &[0.0, 2.0]).is_err());
    }
}
