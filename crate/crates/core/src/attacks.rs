//! Projected gradient attacks in input space, against either the classifier
//! output or the embedding map.
//!
//! All four procedures share one loop: evaluate the objective and its
//! gradient with respect to the input, take a signed step, project back into
//! the l-infinity ball around the clean input. FGSM is the single-step case
//! with step size equal to the ball radius. Untargeted embedding attacks
//! ascend the average spatial cosine distance to the clean embedding;
//! targeted attacks descend the minimum spatial cosine distance to a chosen
//! target vector.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{self, Bindings, Graph, GraphBuilder, GraphError, ZeroNormPolicy};
use crate::losses::{self, AsymmetricLossConfig, LossError};
use crate::models::{self, EmbeddingMap, ModelError, ParameterSet};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("target vector must be finite with nonzero norm")]
    DegenerateTarget,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// l-infinity radius, step size and iteration count of one attack.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackBudget {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
}

impl AttackBudget {
    /// Evaluation default: T = 10 iterations with alpha = 2 epsilon / T.
    pub fn evaluation(epsilon: f64) -> Self {
        Self {
            epsilon,
            alpha: 2.0 * epsilon / 10.0,
            steps: 10,
        }
    }

    /// Single signed step of size epsilon.
    pub fn single_step(epsilon: f64) -> Self {
        Self {
            epsilon,
            alpha: epsilon,
            steps: 1,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::InvalidBudget(format!(
                "epsilon {} must be finite and positive",
                self.epsilon
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AttackError::InvalidBudget(format!(
                "alpha {} must be finite and positive",
                self.alpha
            )));
        }
        if self.steps == 0 {
            return Err(AttackError::InvalidBudget("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Target vector for targeted embedding attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEmbedding {
    vector: Tensor,
}

impl TargetEmbedding {
    pub fn new(vector: Tensor) -> Result<Self, AttackError> {
        if vector.shape().len() != 1 || vector.l2_norm() == 0.0 {
            return Err(AttackError::DegenerateTarget);
        }
        Ok(Self { vector })
    }

    pub fn vector(&self) -> &Tensor {
        &self.vector
    }
}

/// Attack output: the perturbed input, its delta, and the objective value
/// before the first step plus after every step.
#[derive(Debug, Clone)]
pub struct AdversarialExample {
    pub x_adv: Tensor,
    pub delta: Tensor,
    pub initial_objective: f64,
    pub objective_trace: Vec<f64>,
    /// Set when an exactly-zero gradient stopped the attack early.
    pub degenerate: bool,
}

impl AdversarialExample {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace
            .last()
            .copied()
            .unwrap_or(self.initial_objective)
    }
}

/// Elementwise clamp of `candidate` into `[x - epsilon, x + epsilon]`.
/// Idempotent.
pub fn clip_project(candidate: &Tensor, x: &Tensor, epsilon: f64) -> Result<Tensor, AttackError> {
    if candidate.shape() != x.shape() {
        return Err(AttackError::ShapeMismatch {
            a: candidate.shape().to_vec(),
            b: x.shape().to_vec(),
        });
    }
    let data = candidate
        .data()
        .iter()
        .zip(x.data())
        .map(|(&c, &xv)| c.clamp(xv - epsilon, xv + epsilon))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

fn rectified_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na2 += a[i] * a[i];
        nb2 += b[i] * b[i];
    }
    if na2 == 0.0 || nb2 == 0.0 {
        // Zero-norm policy: similarity 0, dissimilarity 1.
        return 0.0;
    }
    (dot / (na2.sqrt() * nb2.sqrt())).max(0.0)
}

/// Average spatial cosine distance: mean over positions of one minus the
/// rectified cosine between corresponding embedding vectors. In [0, 1].
pub fn d_avg(z: &EmbeddingMap, z_adv: &EmbeddingMap) -> Result<f64, AttackError> {
    if z.values.shape() != z_adv.values.shape() {
        return Err(AttackError::ShapeMismatch {
            a: z.values.shape().to_vec(),
            b: z_adv.values.shape().to_vec(),
        });
    }
    let d = z.depth();
    let positions = z.values.len() / d;
    let mut total = 0.0;
    for pos in 0..positions {
        let a = &z.values.data()[pos * d..(pos + 1) * d];
        let b = &z_adv.values.data()[pos * d..(pos + 1) * d];
        total += 1.0 - rectified_cosine(a, b);
    }
    Ok(total / positions as f64)
}

/// Minimum spatial cosine distance between an embedding map and a target
/// vector: the best rectified match over positions, as a dissimilarity.
pub fn d_min(z_adv: &EmbeddingMap, target: &TargetEmbedding) -> Result<f64, AttackError> {
    let d = z_adv.depth();
    if target.vector.len() != d {
        return Err(AttackError::ShapeMismatch {
            a: z_adv.values.shape().to_vec(),
            b: target.vector.shape().to_vec(),
        });
    }
    let positions = z_adv.values.len() / d;
    let mut best = f64::INFINITY;
    for pos in 0..positions {
        let a = &z_adv.values.data()[pos * d..(pos + 1) * d];
        let dis = 1.0 - rectified_cosine(a, target.vector.data());
        if dis < best {
            best = dis;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy)]
enum Direction {
    Ascend,
    Descend,
}

/// Shared PGD loop over a prepared objective graph. The graph must expose an
/// input leaf `x` and a scalar output `objective`; every other leaf must be
/// bound in `fixed`.
fn run_pgd(
    graph: &Graph,
    fixed: &Bindings,
    x: &Tensor,
    budget: &AttackBudget,
    direction: Direction,
) -> Result<AdversarialExample, AttackError> {
    budget.validate()?;
    let step_sign = match direction {
        Direction::Ascend => 1.0,
        Direction::Descend => -1.0,
    };
    let mut current = x.clone();
    let mut initial = 0.0;
    let mut trace = Vec::with_capacity(budget.steps);
    let mut degenerate = false;
    for step in 0..budget.steps {
        let mut bindings = fixed.clone();
        bindings.set("x", &current);
        let (outputs, grads) = autodiff::evaluate(graph, &bindings, "objective", &["x"])?;
        let value = outputs["objective"].scalar_value();
        if step == 0 {
            initial = value;
        } else {
            trace.push(value);
        }
        let grad = grads.get("x").expect("gradient for input leaf");
        if grad.data().iter().all(|&g| g == 0.0) {
            degenerate = true;
            break;
        }
        let stepped = Tensor::from_parts(
            current.shape().to_vec(),
            current
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &g)| {
                    let s = if g > 0.0 {
                        1.0
                    } else if g < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    v + step_sign * budget.alpha * s
                })
                .collect(),
        );
        current = clip_project(&stepped, x, budget.epsilon)?;
    }
    if !degenerate {
        let mut bindings = fixed.clone();
        bindings.set("x", &current);
        let outputs = autodiff::forward(graph, &bindings)?;
        trace.push(outputs["objective"].scalar_value());
    }
    let delta = Tensor::from_parts(
        x.shape().to_vec(),
        current
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| a - b)
            .collect(),
    );
    Ok(AdversarialExample {
        x_adv: current,
        delta,
        initial_objective: initial,
        objective_trace: trace,
        degenerate,
    })
}

fn output_objective_graph(
    params: &ParameterSet,
    loss_cfg: &AsymmetricLossConfig,
) -> Result<Graph, AttackError> {
    let mut b = GraphBuilder::new();
    let wiring = models::append_model(&mut b, params.schema(), "x")?;
    let targets = b.leaf("y", vec![params.schema().num_classes])?;
    let loss = losses::append_asymmetric_loss(&mut b, wiring.scores, targets, loss_cfg)?;
    b.output("objective", loss)?;
    Ok(b.finish())
}

fn embedding_avg_objective_graph(params: &ParameterSet) -> Result<Graph, AttackError> {
    let mut b = GraphBuilder::new();
    let (_, embedding) = models::append_embedding(&mut b, params.schema(), "x")?;
    let clean = b.leaf("z_clean", params.schema().embedding_tensor_shape())?;
    let cos = b.cosine_map(embedding, clean, ZeroNormPolicy::ZeroSimilarity)?;
    let rect = b.relu(cos)?;
    let neg = b.scale(rect, -1.0)?;
    let dis = b.add_scalar(neg, 1.0)?;
    let obj = b.mean(dis)?;
    b.output("objective", obj)?;
    Ok(b.finish())
}

fn embedding_min_objective_graph(params: &ParameterSet) -> Result<Graph, AttackError> {
    let mut b = GraphBuilder::new();
    let (_, embedding) = models::append_embedding(&mut b, params.schema(), "x")?;
    let d = params.schema().embedding_shape.2;
    let target = b.leaf("target", vec![d])?;
    let cos = b.cosine_map(embedding, target, ZeroNormPolicy::ZeroSimilarity)?;
    let rect = b.relu(cos)?;
    let neg = b.scale(rect, -1.0)?;
    let dis = b.add_scalar(neg, 1.0)?;
    let obj = b.spatial_min(dis)?;
    b.output("objective", obj)?;
    Ok(b.finish())
}

fn check_labels(params: &ParameterSet, y: &[f64]) -> Result<Tensor, AttackError> {
    let k = params.schema().num_classes;
    if y.len() != k {
        return Err(AttackError::ShapeMismatch {
            a: vec![y.len()],
            b: vec![k],
        });
    }
    Ok(Tensor::from_parts(vec![k], y.to_vec()))
}

/// Multi-step untargeted output-space attack: ascends the classification
/// loss against the true labels.
pub fn pgd_output_untargeted(
    params: &ParameterSet,
    x: &Tensor,
    y: &[f64],
    budget: &AttackBudget,
    loss_cfg: &AsymmetricLossConfig,
) -> Result<AdversarialExample, AttackError> {
    let y = check_labels(params, y)?;
    let graph = output_objective_graph(params, loss_cfg)?;
    let mut fixed = params.bindings();
    fixed.set("y", &y);
    run_pgd(&graph, &fixed, x, budget, Direction::Ascend)
}

/// Single-step output-space attack; bitwise identical to one PGD step with
/// alpha = epsilon. Exactly one gradient evaluation.
pub fn fgsm_output(
    params: &ParameterSet,
    x: &Tensor,
    y: &[f64],
    epsilon: f64,
    loss_cfg: &AsymmetricLossConfig,
) -> Result<AdversarialExample, AttackError> {
    pgd_output_untargeted(params, x, y, &AttackBudget::single_step(epsilon), loss_cfg)
}

/// Multi-step untargeted embedding-space attack: the clean embedding is
/// captured once and held constant while the attack ascends the average
/// spatial cosine distance to it.
pub fn pgd_embedding_untargeted(
    params: &ParameterSet,
    x: &Tensor,
    budget: &AttackBudget,
) -> Result<AdversarialExample, AttackError> {
    let clean = models::embed(params, x)?;
    let graph = embedding_avg_objective_graph(params)?;
    let mut fixed = params.bindings();
    fixed.set("z_clean", &clean.values);
    run_pgd(&graph, &fixed, x, budget, Direction::Ascend)
}

/// Single-step embedding-space attack; bitwise identical to one PGD step
/// with alpha = epsilon.
pub fn fgsm_embedding(
    params: &ParameterSet,
    x: &Tensor,
    epsilon: f64,
) -> Result<AdversarialExample, AttackError> {
    pgd_embedding_untargeted(params, x, &AttackBudget::single_step(epsilon))
}

/// Multi-step targeted embedding-space attack: descends the minimum spatial
/// cosine distance between the perturbed embedding map and the target.
pub fn pgd_embedding_targeted(
    params: &ParameterSet,
    x: &Tensor,
    target: &TargetEmbedding,
    budget: &AttackBudget,
) -> Result<AdversarialExample, AttackError> {
    let d = params.schema().embedding_shape.2;
    if target.vector.len() != d {
        return Err(AttackError::ShapeMismatch {
            a: target.vector.shape().to_vec(),
            b: vec![d],
        });
    }
    let graph = embedding_min_objective_graph(params)?;
    let mut fixed = params.bindings();
    fixed.set("target", target.vector());
    run_pgd(&graph, &fixed, x, budget, Direction::Descend)
}

/// One attack outcome for the record file.
#[derive(Debug, Clone)]
pub struct AttackRecord {
    pub instance_id: String,
    pub attack: String,
    pub epsilon: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub trace: Vec<f64>,
}

impl AttackRecord {
    pub fn from_example(
        instance_id: impl Into<String>,
        attack: impl Into<String>,
        epsilon: f64,
        example: &AdversarialExample,
    ) -> Self {
        Self {
            instance_id: instance_id.into(),
            attack: attack.into(),
            epsilon,
            initial_objective: example.initial_objective,
            final_objective: example.final_objective(),
            trace: example.objective_trace.clone(),
        }
    }
}

/// Writes attack records in long CSV form: one row per step, step 0 carrying
/// the initial objective. Columns:
/// `instance_id,attack,epsilon,step,objective`.
pub fn write_attack_records(path: &Path, records: &[AttackRecord]) -> Result<(), AttackError> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "instance_id,attack,epsilon,step,objective")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},0,{}",
            r.instance_id, r.attack, r.epsilon, r.initial_objective
        )?;
        for (i, v) in r.trace.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", r.instance_id, r.attack, r.epsilon, i + 1, v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, HeadKind, ModelSchema};
    use crate::rng::Rng;

    fn small_schema() -> ModelSchema {
        ModelSchema {
            input_shape: (8, 8, 1),
            num_classes: 3,
            embedding_shape: (4, 4, 4),
            head_kind: HeadKind::Linear,
            prototypes_per_class: 1,
            conv_layers: vec![crate::models::ConvSpec {
                out_channels: 4,
                stride: 2,
            }],
        }
    }

    fn random_input(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn clip_project_inside_ball_unchanged() {
        let x = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let c = Tensor::new(vec![3], vec![0.05, 1.05, -0.95]).unwrap();
        let out = clip_project(&c, &x, 0.1).unwrap();
        assert_eq!(out.data(), c.data());
    }

    #[test]
    fn clip_project_clamps_to_ball() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let c = Tensor::new(vec![1], vec![0.5]).unwrap();
        let out = clip_project(&c, &x, 0.1).unwrap();
        assert_eq!(out.data(), &[0.1]);
    }

    #[test]
    fn clip_project_is_idempotent() {
        let mut rng = Rng::new(4);
        let x = random_input(vec![16], &mut rng);
        let c = random_input(vec![16], &mut rng);
        let once = clip_project(&c, &x, 0.07).unwrap();
        let twice = clip_project(&once, &x, 0.07).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn d_avg_self_is_zero() {
        let mut rng = Rng::new(8);
        let z = EmbeddingMap {
            values: random_input(vec![2, 2, 3], &mut rng),
        };
        assert!(d_avg(&z, &z).unwrap() < 1e-15);
    }

    #[test]
    fn d_avg_orthogonal_is_one() {
        let a = EmbeddingMap {
            values: Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        };
        let b = EmbeddingMap {
            values: Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        };
        assert_eq!(d_avg(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn d_avg_hand_value_with_rectification() {
        // Positions with cosines 1.0 and -0.5: mean(1-1, 1-0) = 0.5.
        let a = EmbeddingMap {
            values: Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
        };
        let b = EmbeddingMap {
            values: Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, -0.5, 3.0_f64.sqrt() / 2.0])
                .unwrap(),
        };
        let v = d_avg(&a, &b).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn d_avg_symmetry() {
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let a = EmbeddingMap {
                values: random_input(vec![2, 3, 4], &mut rng),
            };
            let b = EmbeddingMap {
                values: random_input(vec![2, 3, 4], &mut rng),
            };
            let ab = d_avg(&a, &b).unwrap();
            let ba = d_avg(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn negating_positions_never_decreases_d_avg() {
        // Opposed vectors are already maximally dissimilar: flipping any
        // subset of positions of a copy of z raises each flipped position's
        // dissimilarity to the rectification ceiling of exactly 1.
        let mut rng = Rng::new(61);
        for trial in 0..20 {
            let z = EmbeddingMap {
                values: random_input(vec![2, 2, 3], &mut rng),
            };
            let d = 3;
            let positions = 4;
            let flip_mask: Vec<bool> = (0..positions).map(|p| (trial + p) % 2 == 0).collect();
            let mut flipped = z.values.data().to_vec();
            for (pos, &flip) in flip_mask.iter().enumerate() {
                if flip {
                    for i in 0..d {
                        flipped[pos * d + i] = -flipped[pos * d + i];
                    }
                }
            }
            let z_flip = EmbeddingMap {
                values: Tensor::new(vec![2, 2, 3], flipped).unwrap(),
            };
            let flipped_count = flip_mask.iter().filter(|&&f| f).count();
            let expected = flipped_count as f64 / positions as f64;
            let base = d_avg(&z, &z).unwrap();
            let v = d_avg(&z, &z_flip).unwrap();
            assert!(v >= base - 1e-12);
            assert!((v - expected).abs() < 1e-12, "got {v}, expected {expected}");
        }
    }

    #[test]
    fn d_min_exact_match_is_zero() {
        let target = TargetEmbedding::new(Tensor::new(vec![2], vec![0.6, 0.8]).unwrap()).unwrap();
        let z = EmbeddingMap {
            values: Tensor::new(vec![1, 2, 2], vec![0.6, 0.8, -1.0, 0.0]).unwrap(),
        };
        assert!(d_min(&z, &target).unwrap() < 1e-15);
    }

    #[test]
    fn d_min_orthogonal_or_opposed_is_one() {
        let target = TargetEmbedding::new(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        let z = EmbeddingMap {
            values: Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, -2.0, 0.0]).unwrap(),
        };
        assert_eq!(d_min(&z, &target).unwrap(), 1.0);
    }

    #[test]
    fn d_min_hand_value() {
        // Cosines {0.2, 0.9, -1.0} -> min dissimilarity = 1 - 0.9 = 0.1.
        let target = TargetEmbedding::new(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        let c02 = (0.2, (1.0_f64 - 0.04).sqrt());
        let c09 = (0.9, (1.0_f64 - 0.81).sqrt());
        let z = EmbeddingMap {
            values: Tensor::new(
                vec![1, 3, 2],
                vec![c02.0, c02.1, c09.0, c09.1, -1.0, 0.0],
            )
            .unwrap(),
        };
        let v = d_min(&z, &target).unwrap();
        assert!((v - 0.1).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn fgsm_equals_single_step_pgd_bitwise() {
        let schema = small_schema();
        let params = init_params(&schema, 17).unwrap();
        let cfg = AsymmetricLossConfig::default();
        let mut rng = Rng::new(33);
        for _ in 0..5 {
            let x = random_input(schema.input_tensor_shape(), &mut rng);
            let y = vec![1.0, 0.0, 1.0];
            let a = fgsm_output(&params, &x, &y, 0.1, &cfg).unwrap();
            let b =
                pgd_output_untargeted(&params, &x, &y, &AttackBudget::single_step(0.1), &cfg)
                    .unwrap();
            for (p, q) in a.x_adv.data().iter().zip(b.x_adv.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
            let c = fgsm_embedding(&params, &x, 0.1).unwrap();
            let d = pgd_embedding_untargeted(&params, &x, &AttackBudget::single_step(0.1))
                .unwrap();
            for (p, q) in c.x_adv.data().iter().zip(d.x_adv.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn zero_extractor_gives_degenerate_flag() {
        let schema = small_schema();
        let mut params = init_params(&schema, 1).unwrap();
        for name in params.layer_names() {
            if name.starts_with("conv") {
                for v in params.get_mut(&name).unwrap().data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut rng = Rng::new(2);
        let x = random_input(schema.input_tensor_shape(), &mut rng);
        let adv = fgsm_embedding(&params, &x, 0.1).unwrap();
        assert!(adv.degenerate);
        assert_eq!(adv.x_adv.data(), x.data());
    }

    #[test]
    fn pgd_stays_in_ball_and_traces_steps() {
        let schema = small_schema();
        let params = init_params(&schema, 91).unwrap();
        let mut rng = Rng::new(44);
        let x = random_input(schema.input_tensor_shape(), &mut rng);
        let budget = AttackBudget::evaluation(0.05);
        let adv = pgd_embedding_untargeted(&params, &x, &budget).unwrap();
        assert!(!adv.degenerate);
        assert_eq!(adv.objective_trace.len(), budget.steps);
        assert!(adv.delta.max_abs() <= budget.epsilon + 1e-12);
    }

    #[test]
    fn vanishing_epsilon_changes_nothing() {
        // Generic model: the vanishing ball moves the objective by < 1e-6
        // from wherever it started (dead relu positions keep a fixed
        // dissimilarity-1 contribution on both sides).
        let schema = small_schema();
        let params = init_params(&schema, 5).unwrap();
        let mut rng = Rng::new(3);
        let x = random_input(schema.input_tensor_shape(), &mut rng);
        let adv =
            pgd_embedding_untargeted(&params, &x, &AttackBudget::evaluation(1e-12)).unwrap();
        assert!((adv.final_objective() - adv.initial_objective).abs() < 1e-6);
        // Model with strictly positive activations everywhere: the absolute
        // distance itself stays below 1e-6.
        let mut alive = init_params(&schema, 5).unwrap();
        for name in alive.layer_names() {
            if name.starts_with("conv") {
                for v in alive.get_mut(&name).unwrap().data_mut() {
                    *v = v.abs() + 0.05;
                }
            }
        }
        let x_pos = x.map(|v| v.abs() + 0.1);
        let adv = pgd_embedding_untargeted(&alive, &x_pos, &AttackBudget::evaluation(1e-12))
            .unwrap();
        assert!(adv.final_objective() < 1e-6);
        let clean = models::embed(&alive, &x_pos).unwrap();
        let perturbed = models::embed(&alive, &adv.x_adv).unwrap();
        assert!(d_avg(&clean, &perturbed).unwrap() < 1e-6);
    }

    #[test]
    fn targeted_with_present_target_stays_feasible() {
        let schema = small_schema();
        let params = init_params(&schema, 55).unwrap();
        let mut rng = Rng::new(7);
        let x = random_input(schema.input_tensor_shape(), &mut rng);
        let z = models::embed(&params, &x).unwrap();
        // Take the embedding vector at position (0, 0) as the target.
        let target =
            TargetEmbedding::new(Tensor::new(vec![4], z.at(0, 0).to_vec()).unwrap()).unwrap();
        let initial = d_min(&z, &target).unwrap();
        assert!(initial < 1e-12);
        let adv =
            pgd_embedding_targeted(&params, &x, &target, &AttackBudget::evaluation(0.05))
                .unwrap();
        assert!(adv.final_objective() <= initial + 1e-9);
        assert!(adv.delta.max_abs() <= 0.05 + 1e-12);
    }

    #[test]
    fn ascent_actually_increases_objective() {
        let schema = small_schema();
        let params = init_params(&schema, 123).unwrap();
        let mut rng = Rng::new(9);
        let mut improved = 0;
        let total = 16;
        for _ in 0..total {
            let x = random_input(schema.input_tensor_shape(), &mut rng);
            let adv =
                pgd_embedding_untargeted(&params, &x, &AttackBudget::evaluation(0.05)).unwrap();
            if adv.final_objective() > adv.initial_objective {
                improved += 1;
            }
        }
        assert!(improved as f64 >= 0.95 * total as f64, "improved {improved}/{total}");
    }
}
