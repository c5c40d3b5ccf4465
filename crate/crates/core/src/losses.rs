//! Classification losses: softmax cross-entropy, L2 normalization,
//! angular-margin cross-entropy, and their composite.
//!
//! All losses are graph builders over `batch x K` inputs and return a scalar
//! node, so gradients flow through them like any other op.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops;
pub use crate::ops::{softmax, Labels};
use crate::scalar::Scalar;

/// Hyperparameters of the composite angular-margin objective.
///
/// `scale` is the norm the embedding is rescaled to, `margin` the additive
/// angle (radians) on the target class, `arc_weight` the mixing weight of the
/// angular-margin term in the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<S: Scalar> {
    pub scale: S,
    pub margin: S,
    pub arc_weight: S,
}

impl<S: Scalar> Default for LossConfig<S> {
    fn default() -> Self {
        LossConfig {
            scale: S::from_f64_lossy(30.0),
            margin: S::from_f64_lossy(0.5),
            arc_weight: S::from_f64_lossy(0.2),
        }
    }
}

impl<S: Scalar> LossConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > S::zero()) {
            return Err(Error::InvalidConfig(format!("scale must be > 0, got {}", self.scale)));
        }
        let half_pi = S::from_f64_lossy(FRAC_PI_2);
        if self.margin < S::zero() || self.margin >= half_pi {
            return Err(Error::InvalidConfig(format!(
                "margin must be in [0, pi/2), got {}",
                self.margin
            )));
        }
        if self.arc_weight < S::zero() || self.arc_weight > S::one() {
            return Err(Error::InvalidConfig(format!(
                "arc weight must be in [0, 1], got {}",
                self.arc_weight
            )));
        }
        Ok(())
    }
}

fn check_logits_input<S: Scalar>(
    g: &Graph<S>,
    logits: NodeId,
    what: &'static str,
) -> Result<(usize, usize)> {
    let t = g.value(logits);
    if t.rank() != 2 || t.shape()[1] < 2 {
        return Err(Error::ShapeMismatch {
            op: what,
            detail: format!("expected batch x K with K >= 2, got {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check_labels<S: Scalar>(labels: &Labels<S>, batch: usize, k: usize) -> Result<()> {
    match labels {
        Labels::Hard(idx) => {
            if idx.len() != batch {
                return Err(Error::ShapeMismatch {
                    op: "labels",
                    detail: format!("{} labels for batch of {batch}", idx.len()),
                });
            }
            for &l in idx {
                if l >= k {
                    return Err(Error::LabelOutOfRange { label: l, num_classes: k });
                }
            }
        }
        Labels::Soft(rows) => {
            if rows.len() != batch * k {
                return Err(Error::ShapeMismatch {
                    op: "labels",
                    detail: format!("soft label buffer of {} for {batch}x{k}", rows.len()),
                });
            }
            for b in 0..batch {
                let sum: S =
                    rows[b * k..(b + 1) * k].iter().fold(S::zero(), |a, &v| a + v);
                if (sum - S::one()).abs() > S::from_f64_lossy(1e-6) {
                    return Err(Error::SoftLabelSum { row: b, sum: sum.to_f64_lossy() });
                }
            }
        }
    }
    Ok(())
}

/// Mean cross-entropy of `batch x K` logits against hard or soft labels,
/// computed through log-sum-exp.
pub fn softmax_ce<S: Scalar>(g: &mut Graph<S>, logits: NodeId, labels: &Labels<S>) -> Result<NodeId> {
    let (batch, k) = check_logits_input(g, logits, "softmax_ce")?;
    check_labels(labels, batch, k)?;
    g.softmax_ce(logits, labels.clone(), k)
}

/// `scale * x / ||x||_2` for a plain vector. Errors on near-zero norm.
pub fn l2_normalize<S: Scalar>(x: &[S], scale: S) -> Result<Vec<S>> {
    if !(scale > S::zero()) {
        return Err(Error::InvalidConfig(format!("l2 scale must be > 0, got {scale}")));
    }
    ops::l2norm(x, 1, x.len(), scale).ok_or(Error::DegenerateVector)
}

/// Cross-entropy over angular-margin logits: the target class contributes
/// `scale*cos(acos(c) + margin)`, every other class `scale*c`.
///
/// No fallback is applied when `acos(c) + margin` exceeds pi; the cosine is
/// simply evaluated there.
pub fn arc_margin_loss<S: Scalar>(
    g: &mut Graph<S>,
    cosines: NodeId,
    labels: &[usize],
    config: &LossConfig<S>,
) -> Result<NodeId> {
    config.validate()?;
    let (batch, k) = check_logits_input(g, cosines, "arc_margin_loss")?;
    check_labels(&Labels::<S>::Hard(labels.to_vec()), batch, k)?;
    let tol = S::from_f64_lossy(1e-6);
    for &c in g.value(cosines).data() {
        if c.abs() > S::one() + tol {
            return Err(Error::CosineOutOfRange { value: c.to_f64_lossy() });
        }
    }
    g.arc_margin_ce(cosines, labels.to_vec(), k, config.scale, config.margin)
}

/// `arc_weight * arc_margin_loss + (1 - arc_weight) * softmax_ce`.
pub fn composite_loss<S: Scalar>(
    g: &mut Graph<S>,
    softmax_logits: NodeId,
    cosines: NodeId,
    labels: &[usize],
    config: &LossConfig<S>,
) -> Result<NodeId> {
    if g.value(softmax_logits).shape() != g.value(cosines).shape() {
        return Err(Error::ShapeMismatch {
            op: "composite_loss",
            detail: format!(
                "logits {:?} vs cosines {:?}",
                g.value(softmax_logits).shape(),
                g.value(cosines).shape()
            ),
        });
    }
    let hard = Labels::Hard(labels.to_vec());
    combine(g, softmax_logits, &hard, cosines, labels, config)
}

/// Composite loss for a mixed-label batch: the softmax term takes the soft
/// labels, the angular-margin term routes through the dominant label of each
/// sample (the one with mix weight >= 0.5).
pub fn composite_loss_mixed<S: Scalar>(
    g: &mut Graph<S>,
    softmax_logits: NodeId,
    cosines: NodeId,
    soft_labels: &Labels<S>,
    dominant_labels: &[usize],
    config: &LossConfig<S>,
) -> Result<NodeId> {
    combine(g, softmax_logits, soft_labels, cosines, dominant_labels, config)
}

fn combine<S: Scalar>(
    g: &mut Graph<S>,
    softmax_logits: NodeId,
    softmax_labels: &Labels<S>,
    cosines: NodeId,
    arc_labels: &[usize],
    config: &LossConfig<S>,
) -> Result<NodeId> {
    config.validate()?;
    let soft = softmax_ce(g, softmax_logits, softmax_labels)?;
    let arc = arc_margin_loss(g, cosines, arc_labels, config)?;
    let weighted_arc = g.scalar_mul(arc, config.arc_weight)?;
    let weighted_soft = g.scalar_mul(soft, S::one() - config.arc_weight)?;
    g.add(weighted_arc, weighted_soft)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits_node(g: &mut Graph<f64>, batch: usize, k: usize, data: Vec<f64>) -> NodeId {
        g.leaf(Tensor::from_vec(vec![batch, k], data).unwrap().with_grad())
    }

    fn ce_value(logits: Vec<f64>, k: usize, labels: Labels<f64>) -> f64 {
        let mut g = Graph::new();
        let z = logits_node(&mut g, logits.len() / k, k, logits);
        let loss = softmax_ce(&mut g, z, &labels).unwrap();
        g.value(loss).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let loss = ce_value(vec![0.3; 4], 4, Labels::Hard(vec![1]));
        assert!((loss - 4.0f64.ln()).abs() < 1e-12, "loss={loss}");
    }

    #[test]
    fn huge_true_logit_drives_loss_to_zero() {
        let loss = ce_value(vec![1e4, 0.0, 0.0, 0.0], 4, Labels::Hard(vec![0]));
        assert!(loss < 1e-8, "loss={loss}");
    }

    #[test]
    fn soft_labels_are_linear_in_components() {
        // CE with (0.6, 0.4) equals 0.6*CE(class 0) + 0.4*CE(class 1)
        let z = vec![0.7, -1.2];
        let mixed = ce_value(z.clone(), 2, Labels::Soft(vec![0.6, 0.4]));
        let a = ce_value(z.clone(), 2, Labels::Hard(vec![0]));
        let b = ce_value(z, 2, Labels::Hard(vec![1]));
        assert!((mixed - (0.6 * a + 0.4 * b)).abs() < 1e-12, "mixed={mixed}");
    }

    #[test]
    fn rejects_bad_labels() {
        let mut g = Graph::new();
        let z = logits_node(&mut g, 1, 3, vec![0.0, 1.0, 2.0]);
        assert!(matches!(
            softmax_ce(&mut g, z, &Labels::Hard(vec![3])),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
        assert!(matches!(
            softmax_ce(&mut g, z, &Labels::Soft(vec![0.5, 0.6, 0.2])),
            Err(Error::SoftLabelSum { row: 0, .. })
        ));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let out = l2_normalize(&[3.0f64, 4.0], 1.0).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rescales_unit_vectors() {
        let out = l2_normalize(&[1.0f64, 0.0, 0.0], 30.0).unwrap();
        assert_eq!(out, vec![30.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_is_idempotent() {
        let x = vec![0.3f64, -1.7, 2.2, 0.01];
        let once = l2_normalize(&x, 7.5).unwrap();
        let twice = l2_normalize(&once, 7.5).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_norm_matches_scale() {
        let out = l2_normalize(&[0.3f64, -1.7, 2.2], 30.0).unwrap();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 30.0).abs() / 30.0 < 1e-12);
    }

    #[test]
    fn l2_normalize_rejects_near_zero() {
        assert!(matches!(l2_normalize(&[0.0f64, 1e-13], 1.0), Err(Error::DegenerateVector)));
    }

    #[test]
    fn zero_margin_reduces_to_softmax_over_scaled_cosines() {
        let cos = vec![0.3, -0.2, 0.85];
        let cfg = LossConfig { scale: 1.0, margin: 0.0, arc_weight: 0.2 };
        let mut g = Graph::new();
        let c = logits_node(&mut g, 1, 3, cos.clone());
        let arc = arc_margin_loss(&mut g, c, &[2], &cfg).unwrap();
        let arc_val = g.value(arc).item().unwrap();
        let ce = ce_value(cos, 3, Labels::Hard(vec![2]));
        assert!((arc_val - ce).abs() < 1e-12, "arc={arc_val} ce={ce}");
    }

    #[test]
    fn rejects_cosines_outside_unit_range() {
        let mut g = Graph::new();
        let c = logits_node(&mut g, 1, 2, vec![1.5, 0.0]);
        assert!(matches!(
            arc_margin_loss(&mut g, c, &[0], &LossConfig::default()),
            Err(Error::CosineOutOfRange { .. })
        ));
    }

    #[test]
    fn margin_monotonicity() {
        let cos = vec![0.6, -0.1, 0.2, 0.05];
        let mut last = f64::NEG_INFINITY;
        for &m in &[0.0, 0.1, 0.3, 0.5, 0.9] {
            let cfg = LossConfig { scale: 30.0, margin: m, arc_weight: 0.2 };
            let mut g = Graph::new();
            let c = logits_node(&mut g, 1, 4, cos.clone());
            let loss = arc_margin_loss(&mut g, c, &[0], &cfg).unwrap();
            let v = g.value(loss).item().unwrap();
            assert!(v >= last, "m={m}: {v} < {last}");
            last = v;
        }
    }

    #[test]
    fn composite_endpoints_are_exact() {
        let z = vec![0.4, -0.7, 1.1];
        let cos = vec![0.2, 0.9, -0.3];
        let eval = |c: f64| {
            let cfg = LossConfig { scale: 30.0, margin: 0.5, arc_weight: c };
            let mut g = Graph::new();
            let zn = logits_node(&mut g, 1, 3, z.clone());
            let cn = logits_node(&mut g, 1, 3, cos.clone());
            let loss = composite_loss(&mut g, zn, cn, &[1], &cfg).unwrap();
            g.value(loss).item().unwrap()
        };
        let soft_only = ce_value(z.clone(), 3, Labels::Hard(vec![1]));
        let arc_only = {
            let cfg = LossConfig { scale: 30.0, margin: 0.5, arc_weight: 1.0 };
            let mut g = Graph::new();
            let cn = logits_node(&mut g, 1, 3, cos.clone());
            let loss = arc_margin_loss(&mut g, cn, &[1], &cfg).unwrap();
            g.value(loss).item().unwrap()
        };
        assert_eq!(eval(0.0), soft_only);
        assert_eq!(eval(1.0), arc_only);
        let blended = eval(0.2);
        assert!((blended - (0.2 * arc_only + 0.8 * soft_only)).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_is_shift_invariant_per_row() {
        let z = vec![0.4, -0.7, 1.1, 2.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.456).collect();
        let a = ce_value(z, 4, Labels::Hard(vec![2]));
        let b = ce_value(shifted, 4, Labels::Hard(vec![2]));
        assert!((a - b).abs() < 1e-9, "a={a} b={b}");
    }

    #[test]
    fn losses_pass_grad_check() {
        use crate::gradcheck::grad_check;
        let z = Tensor::from_vec(vec![2, 4], vec![0.3, -0.8, 1.2, 0.1, -0.4, 0.9, 0.2, -1.1])
            .unwrap();
        let err = grad_check(
            |g, x| softmax_ce(g, x, &Labels::Hard(vec![1, 3])),
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "softmax_ce err={err}");

        let cos =
            Tensor::from_vec(vec![2, 3], vec![0.6, -0.1, 0.3, -0.5, 0.2, 0.7]).unwrap();
        let cfg = LossConfig { scale: 30.0, margin: 0.5, arc_weight: 0.2 };
        let err = grad_check(|g, x| arc_margin_loss(g, x, &[0, 2], &cfg), &cos, 1e-5).unwrap();
        assert!(err <= 1e-4, "arc err={err}");
    }
}
