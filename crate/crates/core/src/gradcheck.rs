//! Finite-difference gradient checking.
//!
//! This is the verification oracle for every differentiable operation: it
//! compares the graph's analytic gradient against central differences
//! computed from forward evaluations only.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max over components of `|analytic - central| / max(1, |analytic|)`.
///
/// `f` builds a scalar loss node from a leaf; it is evaluated `2n + 1` times
/// for an `n`-element tensor. A NaN anywhere in `f` propagates into the
/// returned error value rather than aborting.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, NodeId) -> Result<NodeId>,
{
    if !(eps > S::zero()) {
        return Err(Error::InvalidConfig("grad_check eps must be > 0".into()));
    }

    // Analytic pass.
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone().with_grad());
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = g.grad(leaf).ok_or_else(|| {
        Error::InvalidConfig("grad_check: no gradient flowed to the checked tensor".into())
    })?;
    let analytic = analytic.to_vec();

    // Central differences. Non-finite forward values become NaN, which then
    // dominates the max and fails any tolerance comparison.
    let eval = |data: Vec<S>| -> S {
        let tensor = match Tensor::from_vec(x.shape().to_vec(), data) {
            Ok(t) => t,
            Err(_) => return S::nan(),
        };
        let mut g = Graph::new();
        let leaf = g.leaf(tensor);
        match f(&mut g, leaf) {
            Ok(loss) => g.value(loss).item().unwrap_or(S::nan()),
            Err(_) => S::nan(),
        }
    };

    let two = S::from_f64_lossy(2.0);
    let mut worst = S::zero();
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] = plus[i] + eps;
        let mut minus = x.data().to_vec();
        minus[i] = minus[i] - eps;
        let central = (eval(plus) - eval(minus)) / (two * eps);
        let denom = S::one().max(analytic[i].abs());
        let rel = (analytic[i] - central).abs() / denom;
        // NaN must win the max; Float::max would discard it.
        if rel.is_nan() {
            return Ok(rel);
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}
