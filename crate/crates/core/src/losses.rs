//! Multi-label asymmetric classification loss and the consistency term built
//! from it.
//!
//! Per class with target `t`, score `p`, margin `m` and `p_m = max(p - m, 0)`:
//! the positive branch contributes `t * (1-p)^gamma_pos * (-log p)` and the
//! negative branch `(1-t) * p_m^gamma_neg * (-log(1-p_m))`; the loss sums
//! over classes. Targets may be soft values in [0, 1], which is what the
//! consistency term uses: the clean scores become a constant per-class
//! convex weight.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Bindings, GraphBuilder, GraphError, NodeId};
use crate::tensor::Tensor;

/// Floor for log arguments; keeps -log finite while staying far below every
/// test tolerance.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("score/target lengths differ: {scores} vs {targets}")]
    LengthMismatch { scores: usize, targets: usize },
    #[error("{what} value {value} outside [0, 1] at index {index}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        index: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Focusing exponents and probability margin of the asymmetric loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AsymmetricLossConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip_margin: f64,
}

impl Default for AsymmetricLossConfig {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip_margin: 0.05,
        }
    }
}

impl AsymmetricLossConfig {
    /// Plain binary cross-entropy: no focusing, no margin.
    pub fn bce() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            clip_margin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma_pos >= 0.0 && self.gamma_pos.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "gamma_pos {} must be finite and >= 0",
                self.gamma_pos
            )));
        }
        if !(self.gamma_neg >= 0.0 && self.gamma_neg.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "gamma_neg {} must be finite and >= 0",
                self.gamma_neg
            )));
        }
        if !(self.clip_margin >= 0.0 && self.clip_margin < 0.5) {
            return Err(LossError::InvalidConfig(format!(
                "clip_margin {} must lie in [0, 0.5)",
                self.clip_margin
            )));
        }
        Ok(())
    }
}

/// x^gamma as exp(gamma * log x) with the log floor; exact constant 1 when
/// gamma is 0.
fn append_pow(
    b: &mut GraphBuilder,
    x: NodeId,
    gamma: f64,
) -> Result<NodeId, GraphError> {
    if gamma == 0.0 {
        let zero = b.scale(x, 0.0)?;
        return b.add_scalar(zero, 1.0);
    }
    let clamped = b.clamp(x, LOG_FLOOR, f64::INFINITY)?;
    let log = b.log(clamped)?;
    let scaled = b.scale(log, gamma)?;
    b.exp(scaled)
}

fn append_neg_log(b: &mut GraphBuilder, x: NodeId) -> Result<NodeId, GraphError> {
    let clamped = b.clamp(x, LOG_FLOOR, f64::INFINITY)?;
    let log = b.log(clamped)?;
    b.scale(log, -1.0)
}

/// Appends the asymmetric loss over `scores` against `targets` (both `[k]`)
/// and returns the scalar loss node.
pub fn append_asymmetric_loss(
    b: &mut GraphBuilder,
    scores: NodeId,
    targets: NodeId,
    cfg: &AsymmetricLossConfig,
) -> Result<NodeId, GraphError> {
    // Positive branch: t * (1-p)^gamma_pos * (-log p)
    let neg_p = b.scale(scores, -1.0)?;
    let one_minus_p = b.add_scalar(neg_p, 1.0)?;
    let pos_focus = append_pow(b, one_minus_p, cfg.gamma_pos)?;
    let neg_log_p = append_neg_log(b, scores)?;
    let pos_core = b.mul(pos_focus, neg_log_p)?;
    let pos_term = b.mul(targets, pos_core)?;

    // Negative branch: (1-t) * p_m^gamma_neg * (-log(1-p_m))
    let shifted = b.add_scalar(scores, -cfg.clip_margin)?;
    let p_m = b.relu(shifted)?;
    let neg_focus = append_pow(b, p_m, cfg.gamma_neg)?;
    let neg_pm = b.scale(p_m, -1.0)?;
    let one_minus_pm = b.add_scalar(neg_pm, 1.0)?;
    let neg_log_1mpm = append_neg_log(b, one_minus_pm)?;
    let neg_core = b.mul(neg_focus, neg_log_1mpm)?;
    let neg_t = b.scale(targets, -1.0)?;
    let one_minus_t = b.add_scalar(neg_t, 1.0)?;
    let neg_term = b.mul(one_minus_t, neg_core)?;

    let per_class = b.add(pos_term, neg_term)?;
    b.sum(per_class)
}

/// Appends the consistency loss: the asymmetric loss applied to the
/// adversarial scores with the clean scores as a detached constant target.
/// No gradient flows into the clean branch through this term.
pub fn append_consistency_loss(
    b: &mut GraphBuilder,
    scores_adv: NodeId,
    scores_clean: NodeId,
    cfg: &AsymmetricLossConfig,
) -> Result<NodeId, GraphError> {
    let frozen = b.detach(scores_clean)?;
    append_asymmetric_loss(b, scores_adv, frozen, cfg)
}

fn validate_pair(
    scores: &[f64],
    targets: &[f64],
    cfg: &AsymmetricLossConfig,
) -> Result<(), LossError> {
    cfg.validate()?;
    if scores.len() != targets.len() {
        return Err(LossError::LengthMismatch {
            scores: scores.len(),
            targets: targets.len(),
        });
    }
    for (i, &v) in scores.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(LossError::OutOfRange {
                what: "score",
                value: v,
                index: i,
            });
        }
    }
    for (i, &v) in targets.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(LossError::OutOfRange {
                what: "target",
                value: v,
                index: i,
            });
        }
    }
    Ok(())
}

fn eval_loss(
    scores: &[f64],
    targets: &[f64],
    cfg: &AsymmetricLossConfig,
) -> Result<f64, LossError> {
    let k = scores.len();
    let mut b = GraphBuilder::new();
    let s = b.leaf("scores", vec![k])?;
    let t = b.leaf("targets", vec![k])?;
    let loss = append_asymmetric_loss(&mut b, s, t, cfg)?;
    b.output("loss", loss)?;
    let graph = b.finish();
    let s_t = Tensor::from_parts(vec![k], scores.to_vec());
    let t_t = Tensor::from_parts(vec![k], targets.to_vec());
    let out = autodiff::forward(
        &graph,
        &Bindings::new().bind("scores", &s_t).bind("targets", &t_t),
    )?;
    Ok(out["loss"].scalar_value())
}

/// Asymmetric loss of `scores` against (possibly soft) `targets`.
pub fn asymmetric_loss(
    scores: &[f64],
    targets: &[f64],
    cfg: &AsymmetricLossConfig,
) -> Result<f64, LossError> {
    validate_pair(scores, targets, cfg)?;
    eval_loss(scores, targets, cfg)
}

/// Consistency loss between adversarial and clean scores; the clean scores
/// act as a constant target.
pub fn consistency_loss(
    scores_adv: &[f64],
    scores_clean: &[f64],
    cfg: &AsymmetricLossConfig,
) -> Result<f64, LossError> {
    validate_pair(scores_adv, scores_clean, cfg)?;
    eval_loss(scores_adv, scores_clean, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, gradient};

    #[test]
    fn perfect_binary_prediction_is_zero() {
        let cfg = AsymmetricLossConfig::default();
        let loss = asymmetric_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], &cfg).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn reduces_to_bce_hand_value() {
        // gammas 0, clip 0, K=1, target 1, score 0.5 -> -log 0.5
        let cfg = AsymmetricLossConfig::bce();
        let loss = asymmetric_loss(&[0.5], &[1.0], &cfg).unwrap();
        assert!((loss - 0.5_f64.ln().abs()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn focal_weighting_hand_value() {
        // gamma_neg 1, clip 0, target 0, score 0.5 -> 0.5 * (-log 0.5)
        let cfg = AsymmetricLossConfig {
            gamma_pos: 0.0,
            gamma_neg: 1.0,
            clip_margin: 0.0,
        };
        let loss = asymmetric_loss(&[0.5], &[0.0], &cfg).unwrap();
        let expected = 0.5 * (-(0.5_f64.ln()));
        assert!((loss - expected).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn consistency_matched_binary_is_zero() {
        let cfg = AsymmetricLossConfig::default();
        let loss = consistency_loss(&[1.0, 0.0], &[1.0, 0.0], &cfg).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn consistency_soft_target_hand_value() {
        let cfg = AsymmetricLossConfig::bce();
        let loss = consistency_loss(&[0.5], &[0.5], &cfg).unwrap();
        let expected = -(0.5_f64.ln());
        assert!((loss - expected).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn consistency_monotone_in_divergence() {
        // With gammas 0, moving the adversarial score away from the clean
        // score strictly increases the loss, scanned densely on K=1.
        let cfg = AsymmetricLossConfig::bce();
        let clean = 0.37;
        let mut last_up = consistency_loss(&[clean], &[clean], &cfg).unwrap();
        let mut p = clean;
        while p < 0.99 {
            p += 0.01;
            let l = consistency_loss(&[p], &[clean], &cfg).unwrap();
            assert!(l > last_up, "not increasing at {p}");
            last_up = l;
        }
        let mut last_down = consistency_loss(&[clean], &[clean], &cfg).unwrap();
        let mut q = clean;
        while q > 0.01 {
            q -= 0.01;
            let l = consistency_loss(&[q], &[clean], &cfg).unwrap();
            assert!(l > last_down, "not increasing at {q}");
            last_down = l;
        }
    }

    #[test]
    fn non_negative_on_random_inputs() {
        let mut rng = crate::rng::Rng::new(11);
        let cfg = AsymmetricLossConfig::default();
        for _ in 0..500 {
            let k = 1 + rng.below(6);
            let scores: Vec<f64> = (0..k).map(|_| rng.next_f64()).collect();
            let targets: Vec<f64> = (0..k).map(|_| rng.next_f64()).collect();
            let loss = asymmetric_loss(&scores, &targets, &cfg).unwrap();
            assert!(loss >= 0.0, "negative loss {loss}");
        }
    }

    #[test]
    fn bce_reduction_on_random_cases() {
        // gamma_pos = gamma_neg = 0, clip 0: equals binary cross-entropy
        // within 1e-12 on 1000 random cases.
        let mut rng = crate::rng::Rng::new(99);
        let cfg = AsymmetricLossConfig::bce();
        for _ in 0..1000 {
            let k = 1 + rng.below(8);
            let scores: Vec<f64> = (0..k).map(|_| rng.uniform(1e-6, 1.0 - 1e-6)).collect();
            let targets: Vec<f64> = (0..k).map(|_| f64::from(rng.below(2) as u8)).collect();
            let loss = asymmetric_loss(&scores, &targets, &cfg).unwrap();
            let bce: f64 = scores
                .iter()
                .zip(&targets)
                .map(|(&p, &t)| -t * p.ln() - (1.0 - t) * (1.0 - p).ln())
                .sum();
            assert!((loss - bce).abs() < 1e-12, "loss {loss} vs bce {bce}");
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let cfg = AsymmetricLossConfig::default();
        assert!(matches!(
            asymmetric_loss(&[1.2], &[1.0], &cfg),
            Err(LossError::OutOfRange { what: "score", .. })
        ));
        assert!(matches!(
            asymmetric_loss(&[0.5], &[-0.1], &cfg),
            Err(LossError::OutOfRange { what: "target", .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_kink() {
        let cfg = AsymmetricLossConfig::default();
        let mut rng = crate::rng::Rng::new(3);
        let mut checked = 0;
        while checked < 50 {
            let k = 1 + rng.below(4);
            let scores: Vec<f64> = (0..k).map(|_| rng.uniform(0.02, 0.98)).collect();
            // Stay away from the clip kink at p = clip_margin.
            if scores.iter().any(|p| (p - cfg.clip_margin).abs() < 1e-3) {
                continue;
            }
            let targets: Vec<f64> = (0..k).map(|_| rng.next_f64()).collect();
            let mut b = GraphBuilder::new();
            let s = b.leaf("scores", vec![k]).unwrap();
            let t = b.leaf("targets", vec![k]).unwrap();
            let loss = append_asymmetric_loss(&mut b, s, t, &cfg).unwrap();
            b.output("loss", loss).unwrap();
            let graph = b.finish();
            let s_t = Tensor::new(vec![k], scores).unwrap();
            let t_t = Tensor::new(vec![k], targets).unwrap();
            let bindings = Bindings::new().bind("scores", &s_t).bind("targets", &t_t);
            let report =
                finite_difference_check(&graph, &bindings, "loss", &["scores"], 1e-6, 1e-6)
                    .unwrap();
            assert!(report.pass, "fd mismatch: {}", report.max_rel_error);
            checked += 1;
        }
    }

    #[test]
    fn consistency_stop_gradient_is_exact() {
        // Build a graph where both branches are live computations, then
        // confirm the clean branch receives exactly zero gradient.
        let cfg = AsymmetricLossConfig::default();
        let mut b = GraphBuilder::new();
        let clean_in = b.leaf("clean_in", vec![3]).unwrap();
        let adv_in = b.leaf("adv_in", vec![3]).unwrap();
        let clean_scores = b.sigmoid(clean_in).unwrap();
        let adv_scores = b.sigmoid(adv_in).unwrap();
        let loss = append_consistency_loss(&mut b, adv_scores, clean_scores, &cfg).unwrap();
        b.output("loss", loss).unwrap();
        let graph = b.finish();
        let c = Tensor::new(vec![3], vec![0.3, -0.8, 1.2]).unwrap();
        let a = Tensor::new(vec![3], vec![0.5, 0.1, -0.4]).unwrap();
        let bindings = Bindings::new().bind("clean_in", &c).bind("adv_in", &a);
        let grads = gradient(&graph, &bindings, "loss", &["clean_in", "adv_in"]).unwrap();
        assert_eq!(grads.get("clean_in").unwrap().data(), &[0.0, 0.0, 0.0]);
        assert!(grads
            .get("adv_in")
            .unwrap()
            .data()
            .iter()
            .any(|v| *v != 0.0));
    }
}
