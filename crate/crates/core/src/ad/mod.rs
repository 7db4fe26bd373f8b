//! Reverse-mode automatic differentiation over flat parameter vectors.
//!
//! A [`ScalarFunction`] records its computation onto a fresh [`Graph`] on every
//! call; gradients and Hessian-vector products are taken by differentiating
//! that recording. HVPs are the gradient of `<grad f, v>` with `v` held
//! constant.

mod graph;

pub use graph::{Graph, Mat, Node, NONE};

use alloc::vec::Vec;

use crate::{Error, Result};

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(alloc::vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// A real-valued function of a parameter vector, expressed as a graph builder.
///
/// `build` receives the parameter node (shape `1 x dim`) and returns a scalar
/// node. Implementations must be deterministic.
pub trait ScalarFunction: Sync {
    fn dim(&self) -> usize;

    fn build(&self, g: &mut Graph, theta: Node) -> Node;
}

impl<F: ScalarFunction + ?Sized> ScalarFunction for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn build(&self, g: &mut Graph, theta: Node) -> Node {
        (**self).build(g, theta)
    }
}

/// Adapts a closure into a [`ScalarFunction`].
pub struct FnScalar<F> {
    dim: usize,
    f: F,
}

impl<F> FnScalar<F>
where
    F: Fn(&mut Graph, Node) -> Node + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnScalar { dim, f }
    }
}

impl<F> ScalarFunction for FnScalar<F>
where
    F: Fn(&mut Graph, Node) -> Node + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn build(&self, g: &mut Graph, theta: Node) -> Node {
        (self.f)(g, theta)
    }
}

fn check_dim(f: &impl ScalarFunction, n: usize, what: &str) -> Result<()> {
    if n != f.dim() {
        return Err(Error::contract(alloc::format!(
            "{what} has dimension {n}, function expects {}",
            f.dim()
        )));
    }
    Ok(())
}

fn record(f: &impl ScalarFunction, theta: &[f64]) -> Result<(Graph, Node, Node)> {
    check_dim(f, theta.len(), "parameter vector")?;
    let mut g = Graph::new();
    let t = g.param(Mat::row(theta.to_vec()));
    let out = f.build(&mut g, t);
    if g.shape(out) != (1, 1) {
        return Err(Error::contract("function output is not a scalar"));
    }
    Ok((g, t, out))
}

pub fn eval(f: &impl ScalarFunction, theta: &[f64]) -> Result<f64> {
    let (g, _, out) = record(f, theta)?;
    g.check()?;
    Ok(g.scalar(out))
}

pub fn grad(f: &impl ScalarFunction, theta: &[f64]) -> Result<Vec<f64>> {
    value_and_grad(f, theta).map(|(_, g)| g)
}

pub fn value_and_grad(f: &impl ScalarFunction, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (mut g, t, out) = record(f, theta)?;
    let d = g.grad(out, &[t])[0];
    g.check()?;
    Ok((g.scalar(out), g.value(d).data.clone()))
}

/// `∇²f(θ) v` by double backward.
pub fn hvp(f: &impl ScalarFunction, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim(f, v.len(), "direction")?;
    let (mut g, t, out) = record(f, theta)?;
    let d = g.grad(out, &[t])[0];
    let vn = g.constant(Mat::row(v.to_vec()));
    let s = g.dot(d, vn);
    let hv = g.grad(s, &[t])[0];
    g.check()?;
    Ok(g.value(hv).data.clone())
}

/// Central-difference gradient estimate. Test oracle only.
pub fn fd_grad_oracle(f: &impl ScalarFunction, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = eval(f, &x)?;
        x[i] = orig - h;
        let fm = eval(f, &x)?;
        x[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Dense Hessian assembled column by column from HVPs.
pub fn hessian(f: &impl ScalarFunction, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = theta.len();
    let mut cols = Vec::with_capacity(n);
    let mut e = alloc::vec![0.0; n];
    for i in 0..n {
        e[i] = 1.0;
        cols.push(hvp(f, theta, &e)?);
        e[i] = 0.0;
    }
    Ok(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn half_norm_sq() -> impl ScalarFunction {
        FnScalar::new(2, |g: &mut Graph, t| {
            let s = g.dot(t, t);
            g.scale(s, 0.5)
        })
    }

    #[test]
    fn eval_examples() {
        let sq = FnScalar::new(1, |g: &mut Graph, t| {
            let s = g.mul(t, t);
            g.sum_all(s)
        });
        assert_eq!(eval(&sq, &[3.0]).unwrap(), 9.0);
        assert_eq!(eval(&half_norm_sq(), &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn grad_examples() {
        let sq = FnScalar::new(1, |g: &mut Graph, t| {
            let s = g.mul(t, t);
            g.sum_all(s)
        });
        assert_eq!(grad(&sq, &[3.0]).unwrap(), vec![6.0]);
        assert_eq!(grad(&half_norm_sq(), &[1.0, -2.0]).unwrap(), vec![1.0, -2.0]);
    }

    #[test]
    fn hvp_examples() {
        assert_eq!(hvp(&half_norm_sq(), &[0.3, 0.7], &[2.0, -5.0]).unwrap(), vec![2.0, -5.0]);
        let xy = FnScalar::new(2, |g: &mut Graph, t| {
            let x = g.slice(t, 0, 1, 1);
            let y = g.slice(t, 1, 1, 1);
            g.mul(x, y)
        });
        assert_eq!(hvp(&xy, &[0.4, -1.2], &[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn fd_oracle_examples() {
        let sq = FnScalar::new(1, |g: &mut Graph, t| {
            let s = g.mul(t, t);
            g.sum_all(s)
        });
        assert!((fd_grad_oracle(&sq, &[3.0], 1e-5).unwrap()[0] - 6.0).abs() <= 1e-8);
        let cube = FnScalar::new(1, |g: &mut Graph, t| {
            let s = g.mul(t, t);
            let c = g.mul(s, t);
            g.sum_all(c)
        });
        assert!((fd_grad_oracle(&cube, &[2.0], 1e-4).unwrap()[0] - 12.0).abs() <= 1e-6);
        assert!(fd_grad_oracle(&cube, &[2.0], 0.0).is_err());
    }

    #[test]
    fn non_finite_eval_is_an_error() {
        let lg = FnScalar::new(1, |g: &mut Graph, t| {
            let l = g.log(t);
            g.sum_all(l)
        });
        assert!(matches!(eval(&lg, &[-1.0]), Err(Error::Numerical { op: "log", .. })));
        assert!(matches!(grad(&lg, &[0.0]), Err(Error::Numerical { .. })));
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        assert!(matches!(eval(&half_norm_sq(), &[1.0]), Err(Error::Contract(_))));
    }
}
