//! Pseudo-labelling: hard labels from the model's own predictions, the
//! ramped weighting schedule, and the combined labeled+unlabeled objective.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{self, Labels, LossConfig};
use crate::model::{Model, ParamBinding};
use crate::ops::softmax;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ramp schedule for the unlabeled-loss weight.
///
/// The weight is 0 through `start_epoch`, rises linearly, and holds at
/// `final_weight` from `saturation_epoch` on. The ramp is scaled by
/// `final_weight` so the schedule is continuous at saturation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PLSchedule {
    pub start_epoch: usize,
    pub saturation_epoch: usize,
    pub final_weight: f64,
}

impl PLSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.start_epoch >= self.saturation_epoch {
            return Err(Error::InvalidConfig(format!(
                "schedule start epoch {} must precede saturation epoch {}",
                self.start_epoch, self.saturation_epoch
            )));
        }
        if !(self.final_weight > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "final weight must be > 0, got {}",
                self.final_weight
            )));
        }
        Ok(())
    }
}

/// Unlabeled-loss weight at epoch `t`.
pub fn alpha_schedule(t: usize, sched: &PLSchedule) -> f64 {
    if t <= sched.start_epoch {
        0.0
    } else if t >= sched.saturation_epoch {
        sched.final_weight
    } else {
        let num = (t - sched.start_epoch) as f64;
        let den = (sched.saturation_epoch - sched.start_epoch) as f64;
        sched.final_weight * num / den
    }
}

/// One-hot of the argmax of a probability vector; ties break to the lowest
/// index. The input must be non-negative and sum to 1 within 1e-6.
pub fn pseudo_label<S: Scalar>(probs: &[S]) -> Result<Vec<S>> {
    let idx = pseudo_label_index(probs)?;
    let mut out = vec![S::zero(); probs.len()];
    out[idx] = S::one();
    Ok(out)
}

/// Argmax index under `pseudo_label`'s validation rules.
pub fn pseudo_label_index<S: Scalar>(probs: &[S]) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::MalformedProbs("empty vector".into()));
    }
    if probs.iter().any(|&p| p < S::zero() || !p.is_finite()) {
        return Err(Error::MalformedProbs("negative or non-finite entry".into()));
    }
    let sum = probs.iter().fold(S::zero(), |a, &p| a + p);
    if (sum - S::one()).abs() > S::from_f64_lossy(1e-6) {
        return Err(Error::MalformedProbs(format!("sums to {}", sum.to_f64_lossy())));
    }
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// One labeled training sample.
#[derive(Debug, Clone)]
pub struct Labeled<S: Scalar> {
    pub image: Tensor<S>,
    pub cell_onehot: Vec<S>,
    pub label: usize,
}

/// One unlabeled training sample.
#[derive(Debug, Clone)]
pub struct Unlabeled<S: Scalar> {
    pub image: Tensor<S>,
    pub cell_onehot: Vec<S>,
}

/// Supervised composite loss plus `alpha(t)` times the softmax cross-entropy
/// of the unlabeled batch against its own pseudo-labels.
///
/// Pseudo-labels are recomputed from the current forward pass of this batch;
/// they enter the loss as constants, so no gradient flows through the label
/// path. An empty unlabeled batch (or `alpha = 0`) leaves the supervised term
/// only. Unlabeled samples route through the softmax term, not the
/// angular-margin term.
pub fn combined_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    binding: &ParamBinding,
    labeled: &[Labeled<S>],
    unlabeled: &[Unlabeled<S>],
    epoch: usize,
    sched: &PLSchedule,
    loss_config: &LossConfig<S>,
) -> Result<NodeId> {
    sched.validate()?;
    let alpha = alpha_schedule(epoch, sched);
    combined_loss_weighted(g, model, binding, labeled, unlabeled, alpha, loss_config)
}

/// `combined_loss` with the unlabeled weight passed explicitly.
pub fn combined_loss_weighted<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    binding: &ParamBinding,
    labeled: &[Labeled<S>],
    unlabeled: &[Unlabeled<S>],
    alpha: f64,
    loss_config: &LossConfig<S>,
) -> Result<NodeId> {
    if labeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let images: Vec<_> = labeled.iter().map(|s| s.image.clone()).collect();
    let onehots: Vec<_> = labeled.iter().map(|s| s.cell_onehot.clone()).collect();
    let labels: Vec<usize> = labeled.iter().map(|s| s.label).collect();
    let embs = model.forward_embedding(g, binding, &images, &onehots)?;
    let (logits, cosines) = model.logits(g, binding, &embs)?;
    let supervised = losses::composite_loss(g, logits, cosines, &labels, loss_config)?;

    if unlabeled.is_empty() || alpha == 0.0 {
        return Ok(supervised);
    }

    let u_images: Vec<_> = unlabeled.iter().map(|s| s.image.clone()).collect();
    let u_onehots: Vec<_> = unlabeled.iter().map(|s| s.cell_onehot.clone()).collect();
    let u_embs = model.forward_embedding(g, binding, &u_images, &u_onehots)?;
    let (u_logits, _) = model.logits(g, binding, &u_embs)?;
    let k = model.config().num_classes;
    let logit_values = g.value(u_logits).data().to_vec();
    let pl: Vec<usize> = (0..unlabeled.len())
        .map(|b| pseudo_label_index(&softmax(&logit_values[b * k..(b + 1) * k])))
        .collect::<Result<_>>()?;
    let unsup = losses::softmax_ce(g, u_logits, &Labels::Hard(pl))?;
    let weighted = g.scalar_mul(unsup, S::from_f64_lossy(alpha))?;
    g.add(supervised, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};

    #[test]
    fn pseudo_label_picks_argmax() {
        assert_eq!(pseudo_label(&[0.1f64, 0.7, 0.2]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn pseudo_label_tie_breaks_to_lowest_index() {
        assert_eq!(pseudo_label(&[0.25f64; 4]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pseudo_label_fixes_one_hot_inputs() {
        let onehot = vec![0.0f64, 0.0, 1.0];
        assert_eq!(pseudo_label(&onehot).unwrap(), onehot);
    }

    #[test]
    fn pseudo_label_rejects_malformed_input() {
        assert!(matches!(pseudo_label(&[0.5f64, 0.6]), Err(Error::MalformedProbs(_))));
        assert!(matches!(pseudo_label(&[-0.1f64, 1.1]), Err(Error::MalformedProbs(_))));
        assert!(matches!(pseudo_label::<f64>(&[]), Err(Error::MalformedProbs(_))));
    }

    #[test]
    fn pseudo_label_invariant_under_positive_rescale() {
        let probs = [0.2f64, 0.5, 0.3];
        let rescaled: Vec<f64> = probs.iter().map(|p| p * 3.0 / 3.0).collect();
        let renorm: Vec<f64> = {
            let scaled: Vec<f64> = probs.iter().map(|p| p * 7.0).collect();
            let sum: f64 = scaled.iter().sum();
            scaled.iter().map(|p| p / sum).collect()
        };
        assert_eq!(
            pseudo_label_index(&probs).unwrap(),
            pseudo_label_index(&renorm).unwrap()
        );
        assert_eq!(pseudo_label(&probs).unwrap(), pseudo_label(&rescaled).unwrap());
    }

    fn sched() -> PLSchedule {
        PLSchedule { start_epoch: 10, saturation_epoch: 20, final_weight: 3.0 }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = sched();
        assert_eq!(alpha_schedule(10, &s), 0.0);
        assert_eq!(alpha_schedule(20, &s), 3.0);
        assert_eq!(alpha_schedule(15, &s), 1.5);
        assert_eq!(alpha_schedule(0, &s), 0.0);
        assert_eq!(alpha_schedule(100, &s), 3.0);
    }

    #[test]
    fn schedule_is_monotone_non_decreasing() {
        let s = sched();
        let mut last = f64::NEG_INFINITY;
        for t in 0..40 {
            let a = alpha_schedule(t, &s);
            assert!(a >= last, "t={t}");
            last = a;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(PLSchedule { start_epoch: 5, saturation_epoch: 5, final_weight: 1.0 }
            .validate()
            .is_err());
        assert!(PLSchedule { start_epoch: 1, saturation_epoch: 5, final_weight: 0.0 }
            .validate()
            .is_err());
        assert!(sched().validate().is_ok());
    }

    fn tiny_model() -> Model<f64> {
        let cfg = ModelConfig {
            in_channels: 6,
            input_size: 32,
            growth_rate: 2,
            block_layers: vec![1, 1],
            embedding_dim: 4,
            num_classes: 3,
            num_cell_types: 4,
            seed: 11,
        };
        Model::build(cfg).unwrap()
    }

    fn sample(seed: u64, label: usize) -> Labeled<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::from_vec(
            vec![6, 32, 32],
            (0..6 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        Labeled { image, cell_onehot: vec![1.0, 0.0, 0.0, 0.0], label }
    }

    fn unlabeled(seed: u64) -> Unlabeled<f64> {
        let s = sample(seed, 0);
        Unlabeled { image: s.image, cell_onehot: s.cell_onehot }
    }

    #[test]
    fn zero_alpha_equals_supervised_loss_exactly() {
        let model = tiny_model();
        let cfg = LossConfig::default();
        let labeled = [sample(1, 0), sample(2, 2)];
        let s = sched();

        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let combined =
            combined_loss(&mut g, &model, &b, &labeled, &[unlabeled(3)], 5, &s, &cfg).unwrap();
        let combined_val = g.value(combined).item().unwrap();

        let mut g2 = Graph::new();
        let b2 = model.bind(&mut g2);
        let sup_only =
            combined_loss(&mut g2, &model, &b2, &labeled, &[], 5, &s, &cfg).unwrap();
        assert_eq!(combined_val, g2.value(sup_only).item().unwrap());
    }

    #[test]
    fn empty_labeled_batch_is_an_error() {
        let model = tiny_model();
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        assert!(matches!(
            combined_loss(&mut g, &model, &b, &[], &[unlabeled(3)], 30, &sched(), &LossConfig::default()),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn one_plus_one_sample_combination() {
        // N = M = 1, alpha = 0.5 -> L_total = L_a + 0.5 * L_b
        let model = tiny_model();
        let cfg = LossConfig::default();
        let labeled = [sample(4, 1)];
        let ul = [unlabeled(5)];

        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let total =
            combined_loss_weighted(&mut g, &model, &b, &labeled, &ul, 0.5, &cfg).unwrap();
        let total = g.value(total).item().unwrap();

        // supervised component alone
        let mut g2 = Graph::new();
        let b2 = model.bind(&mut g2);
        let sup = combined_loss_weighted(&mut g2, &model, &b2, &labeled, &[], 0.5, &cfg).unwrap();
        let l_a = g2.value(sup).item().unwrap();

        // unlabeled component alone: CE of the pseudo-label on its own logits
        let mut g3 = Graph::new();
        let b3 = model.bind(&mut g3);
        let embs = model
            .forward_embedding(&mut g3, &b3, &[ul[0].image.clone()], &[ul[0].cell_onehot.clone()])
            .unwrap();
        let (logits, _) = model.logits(&mut g3, &b3, &embs).unwrap();
        let probs = softmax(g3.value(logits).data());
        let pl = pseudo_label_index(&probs).unwrap();
        let unsup = losses::softmax_ce(&mut g3, logits, &Labels::Hard(vec![pl])).unwrap();
        let l_b = g3.value(unsup).item().unwrap();

        assert!((total - (l_a + 0.5 * l_b)).abs() < 1e-12, "{total} vs {}", l_a + 0.5 * l_b);
    }

    #[test]
    fn combined_loss_is_monotone_in_alpha() {
        let model = tiny_model();
        let cfg = LossConfig::default();
        let labeled = [sample(6, 0)];
        let ul = [unlabeled(7), unlabeled(8)];
        let mut last = f64::NEG_INFINITY;
        for &alpha in &[0.0, 0.25, 0.5, 1.0, 2.0] {
            let mut g = Graph::new();
            let b = model.bind(&mut g);
            let total =
                combined_loss_weighted(&mut g, &model, &b, &labeled, &ul, alpha, &cfg).unwrap();
            let v = g.value(total).item().unwrap();
            assert!(v >= last, "alpha={alpha}: {v} < {last}");
            last = v;
        }
    }

    #[test]
    fn no_gradient_flows_through_the_label_path() {
        // Feeding externally computed pseudo-labels (from a separate
        // inference pass, itself outside this graph) must give bitwise the
        // same parameter gradients as the internal label path.
        let model = tiny_model();
        let cfg = LossConfig::default();
        let labeled = [sample(9, 2)];
        let ul = [unlabeled(10)];

        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let total = combined_loss_weighted(&mut g, &model, &b, &labeled, &ul, 1.0, &cfg).unwrap();
        g.backward(total).unwrap();

        // independent label computation in a throwaway graph
        let pl = {
            let mut gx = Graph::new();
            let bx = model.bind(&mut gx);
            let embs = model
                .forward_embedding(&mut gx, &bx, &[ul[0].image.clone()], &[ul[0].cell_onehot.clone()])
                .unwrap();
            let (logits, _) = model.logits(&mut gx, &bx, &embs).unwrap();
            pseudo_label_index(&softmax(gx.value(logits).data())).unwrap()
        };
        let mut g2 = Graph::new();
        let b2 = model.bind(&mut g2);
        let sup = {
            let images = vec![labeled[0].image.clone()];
            let onehots = vec![labeled[0].cell_onehot.clone()];
            let embs = model.forward_embedding(&mut g2, &b2, &images, &onehots).unwrap();
            let (logits, cosines) = model.logits(&mut g2, &b2, &embs).unwrap();
            losses::composite_loss(&mut g2, logits, cosines, &[labeled[0].label], &cfg).unwrap()
        };
        let unsup = {
            let embs = model
                .forward_embedding(&mut g2, &b2, &[ul[0].image.clone()], &[ul[0].cell_onehot.clone()])
                .unwrap();
            let (logits, _) = model.logits(&mut g2, &b2, &embs).unwrap();
            losses::softmax_ce(&mut g2, logits, &Labels::Hard(vec![pl])).unwrap()
        };
        let weighted = g2.scalar_mul(unsup, 1.0).unwrap();
        let total2 = g2.add(sup, weighted).unwrap();
        g2.backward(total2).unwrap();

        for (name, (&ia, &ib)) in model
            .param_names()
            .zip(b.ids().iter().zip(b2.ids()))
        {
            let ga = g.grad(ia).unwrap();
            let gb = g2.grad(ib).unwrap();
            let bits_a: Vec<u64> = ga.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = gb.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name}");
        }
    }
}
