//! Ordinary training and the two adversarial-training variants under the
//! multi-label TRADES-AWP objective.
//!
//! Per batch, adversarial training (1) copies and randomizes the weights,
//! (2) generates one FGSM perturbation per instance against that randomized
//! copy, output-space or embedding-space, (3) past the warm-up epoch builds
//! an adversarial weight perturbation from one ascent step on the combined
//! objective, rescaled per layer to `gamma * ||theta_j||`, and (4) takes the
//! optimizer step on gradients evaluated at the perturbed weights, while the
//! perturbation itself is never committed. The optimizer is
//! decoupled-weight-decay Adam with a cosine learning-rate schedule and
//! linear warm-up; prototype tensors use their own learning rate.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackError};
use crate::autodiff::{self, Graph, GraphBuilder, GraphError};
use crate::losses::{self, AsymmetricLossConfig, LossError};
use crate::metrics::{self, MetricError};
use crate::models::{self, ModelError, ModelSchema, ParameterSet};
use crate::rng::Rng;
use crate::synth::{self, LabeledCorpus, SpectrogramInstance};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        source: GraphError,
    },
    #[error("schedule step {step} outside [0, {total}]")]
    ScheduleRange { step: usize, total: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub prototype_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    /// Classification loss.
    pub loss: AsymmetricLossConfig,
    /// Consistency-term loss. The default has no focusing and no margin, so
    /// the term reduces to soft-target cross-entropy: zero value gradient at
    /// matched outputs, which keeps the regularizer a pure divergence. With
    /// focusing or a margin the minimizer sits away from the clean scores
    /// and the term drags every adversarial-branch score upward.
    pub consistency_loss: AsymmetricLossConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-3,
            prototype_lr: 1e-2,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            warmup_fraction: 0.05,
            loss: AsymmetricLossConfig::default(),
            consistency_loss: AsymmetricLossConfig::bce(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr > 0.0) || !(self.prototype_lr > 0.0) {
            return Err(TrainError::InvalidConfig("learning rates must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::InvalidConfig(
                "warmup_fraction must be in [0, 1)".into(),
            ));
        }
        self.loss.validate()?;
        self.consistency_loss.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackSpace {
    Output,
    Embedding,
}

/// TRADES-AWP knobs: the consistency weight is `1/lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradesAwpConfig {
    pub lambda_inv: f64,
    pub awp_gamma: f64,
    pub awp_warmup_epochs: usize,
    pub weight_randomization_std: f64,
    pub attack_space: AttackSpace,
    pub attack_epsilon: f64,
}

impl TradesAwpConfig {
    pub fn output_space() -> Self {
        Self {
            lambda_inv: 1.0,
            awp_gamma: 0.005,
            awp_warmup_epochs: 8,
            weight_randomization_std: 1e-4,
            attack_space: AttackSpace::Output,
            attack_epsilon: 0.1,
        }
    }

    pub fn embedding_space() -> Self {
        Self {
            attack_space: AttackSpace::Embedding,
            ..Self::output_space()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda_inv > 0.0 && self.lambda_inv.is_finite()) {
            return Err(TrainError::InvalidConfig("lambda_inv must be > 0".into()));
        }
        if !(self.awp_gamma >= 0.0 && self.awp_gamma < 1.0) {
            return Err(TrainError::InvalidConfig("awp_gamma must be in [0, 1)".into()));
        }
        if !(self.weight_randomization_std >= 0.0) {
            return Err(TrainError::InvalidConfig(
                "weight_randomization_std must be >= 0".into(),
            ));
        }
        if !(self.attack_epsilon > 0.0) {
            return Err(TrainError::InvalidConfig("attack_epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_classification_loss: f64,
    pub mean_consistency_loss: f64,
    pub val_loss: f64,
    pub val_cmap: f64,
    pub learning_rate: f64,
    pub wall_seconds: f64,
    /// Batches where AWP was applied this epoch.
    pub awp_batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,classification_loss,consistency_loss,val_loss,val_cmap,learning_rate,wall_seconds,awp_batches\n",
        );
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.mean_classification_loss,
                r.mean_consistency_loss,
                r.val_loss,
                r.val_cmap,
                r.learning_rate,
                r.wall_seconds,
                r.awp_batches
            ));
        }
        out
    }

    pub fn total_awp_batches(&self) -> usize {
        self.epochs.iter().map(|e| e.awp_batches).sum()
    }
}

/// Linear ramp from 0 to `base_lr` over the warm-up steps, then cosine decay
/// to 0 at `total_steps`.
pub fn cosine_schedule(
    step: usize,
    total_steps: usize,
    warmup_fraction: f64,
    base_lr: f64,
) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::InvalidConfig("total_steps must be > 0".into()));
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(TrainError::InvalidConfig(
            "warmup_fraction must be in [0, 1)".into(),
        ));
    }
    if step > total_steps {
        return Err(TrainError::ScheduleRange {
            step,
            total: total_steps,
        });
    }
    let warmup = (warmup_fraction * total_steps as f64) as usize;
    if warmup > 0 && step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adds zero-mean Gaussian noise of the given std to every layer tensor,
/// deterministically per seed. The original is untouched.
pub fn randomize_weights(params: &ParameterSet, std: f64, seed: u64) -> ParameterSet {
    if std == 0.0 {
        return params.clone();
    }
    let mut out = params.clone();
    for (layer_idx, name) in params.layer_names().into_iter().enumerate() {
        let mut rng = Rng::derive(seed, &[0x7261_6e64, layer_idx as u64]);
        let tensor = out.get_mut(&name).expect("layer exists");
        for v in tensor.data_mut() {
            *v += rng.normal() * std;
        }
    }
    out
}

/// Per-layer weight perturbation with `||v_j|| <= gamma * ||theta_j||`.
#[derive(Debug, Clone)]
pub struct WeightPerturbation {
    entries: Vec<(String, Tensor)>,
}

impl WeightPerturbation {
    pub fn zero(params: &ParameterSet) -> Self {
        Self {
            entries: params
                .layers()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn is_zero(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
    }

    /// Returns theta + v.
    pub fn apply(&self, params: &ParameterSet) -> ParameterSet {
        let mut out = params.clone();
        for (name, v) in &self.entries {
            let t = out.get_mut(name).expect("layer exists");
            for (p, dv) in t.data_mut().iter_mut().zip(v.data()) {
                *p += dv;
            }
        }
        out
    }
}

/// One training instance ready for a step: input, targets, and the
/// adversarial input generated for it.
#[derive(Debug, Clone)]
pub struct AdversarialBatchItem {
    pub x: Tensor,
    pub y: Vec<f64>,
    pub x_adv: Tensor,
}

fn trades_graph(
    schema: &ModelSchema,
    loss_cfg: &AsymmetricLossConfig,
    consistency_cfg: &AsymmetricLossConfig,
    lambda_inv: f64,
) -> Result<Graph, TrainError> {
    let mut b = GraphBuilder::new();
    let clean = models::append_model(&mut b, schema, "x")?;
    let adv = models::append_model(&mut b, schema, "x_adv")?;
    let y = b.leaf("y", vec![schema.num_classes])?;
    let cls = losses::append_asymmetric_loss(&mut b, clean.scores, y, loss_cfg)?;
    let cons = losses::append_consistency_loss(&mut b, adv.scores, clean.scores, consistency_cfg)?;
    let weighted = b.scale(cons, lambda_inv)?;
    let total = b.add(cls, weighted)?;
    b.output("loss", total)?;
    b.output("classification", cls)?;
    b.output("consistency", cons)?;
    Ok(b.finish())
}

fn ordinary_graph(
    schema: &ModelSchema,
    loss_cfg: &AsymmetricLossConfig,
) -> Result<Graph, TrainError> {
    let mut b = GraphBuilder::new();
    let wiring = models::append_model(&mut b, schema, "x")?;
    let y = b.leaf("y", vec![schema.num_classes])?;
    let cls = losses::append_asymmetric_loss(&mut b, wiring.scores, y, loss_cfg)?;
    b.output("loss", cls)?;
    b.output("classification", cls)?;
    Ok(b.finish())
}

/// Mean gradient of the named graph output over a batch of bindings.
struct GradAccumulator {
    layer_names: Vec<String>,
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl GradAccumulator {
    fn new(params: &ParameterSet) -> Self {
        Self {
            layer_names: params.layer_names(),
            sums: params.layers().map(|(_, t)| vec![0.0; t.len()]).collect(),
            count: 0,
        }
    }

    fn add(&mut self, grads: &autodiff::GradientMap) {
        for (i, name) in self.layer_names.iter().enumerate() {
            let g = grads.get(name).expect("gradient for layer");
            for (acc, &v) in self.sums[i].iter_mut().zip(g.data()) {
                *acc += v;
            }
        }
        self.count += 1;
    }

    fn mean(mut self) -> Vec<Vec<f64>> {
        let inv = 1.0 / self.count.max(1) as f64;
        for layer in &mut self.sums {
            for v in layer {
                *v *= inv;
            }
        }
        self.sums
    }
}

/// One ascent step on the combined objective with respect to the weights,
/// rescaled per layer so `||v_j|| = awp_gamma * ||theta_j||`; layers with
/// zero gradient get `v_j = 0`.
pub fn awp_perturbation(
    params: &ParameterSet,
    batch: &[AdversarialBatchItem],
    loss_cfg: &AsymmetricLossConfig,
    consistency_cfg: &AsymmetricLossConfig,
    lambda_inv: f64,
    awp_gamma: f64,
) -> Result<WeightPerturbation, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("awp batch is empty".into()));
    }
    if awp_gamma == 0.0 {
        return Ok(WeightPerturbation::zero(params));
    }
    let graph = trades_graph(params.schema(), loss_cfg, consistency_cfg, lambda_inv)?;
    let layer_names = params.layer_names();
    let wrt: Vec<&str> = layer_names.iter().map(|s| s.as_str()).collect();
    let mut acc = GradAccumulator::new(params);
    for item in batch {
        let y = Tensor::from_parts(vec![item.y.len()], item.y.clone());
        let mut bindings = params.bindings();
        bindings.set("x", &item.x);
        bindings.set("x_adv", &item.x_adv);
        bindings.set("y", &y);
        let grads = autodiff::gradient(&graph, &bindings, "loss", &wrt)?;
        acc.add(&grads);
    }
    let means = acc.mean();
    let entries = layer_names
        .into_iter()
        .zip(means)
        .map(|(name, grad)| {
            let theta_norm = params.get(&name).expect("layer").l2_norm();
            let grad_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            let tensor_shape = params.get(&name).unwrap().shape().to_vec();
            if grad_norm == 0.0 || theta_norm == 0.0 {
                return (name, Tensor::zeros(tensor_shape));
            }
            let scale = awp_gamma * theta_norm / grad_norm;
            (
                name,
                Tensor::from_parts(tensor_shape, grad.into_iter().map(|g| g * scale).collect()),
            )
        })
        .collect();
    Ok(WeightPerturbation { entries })
}

/// Decoupled-weight-decay adaptive moment estimation.
struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    fn new(params: &ParameterSet, weight_decay: f64) -> Self {
        Self {
            m: params.layers().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.layers().map(|(_, t)| vec![0.0; t.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Applies one update; `lrs` carries the per-layer learning rate.
    fn step(&mut self, params: &mut ParameterSet, grads: &[Vec<f64>], lrs: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names = params.layer_names();
        for (idx, name) in names.iter().enumerate() {
            let lr = lrs[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let g = &grads[idx];
            let theta = params.get_mut(name).expect("layer").data_mut();
            for i in 0..theta.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps))
                    + lr * self.weight_decay * theta[i];
            }
        }
    }
}

const PROJECT_PROTOTYPES: bool = false;

/// Projects prototype vectors back onto the nonnegative orthant after an
/// optimizer step. Embeddings are post-relu, so negative prototype
/// coordinates are unreachable by any embedding and only feed the rectified
/// cosine's dead zone. A prototype that would project to zero is left at its
/// pre-projection value instead of dying.
fn project_prototypes(params: &mut ParameterSet) {
    for name in params.layer_names() {
        if !ParameterSet::is_prototype_layer(&name) {
            continue;
        }
        let tensor = params.get_mut(&name).expect("layer exists");
        let projected: Vec<f64> = tensor.data().iter().map(|&v| v.max(0.0)).collect();
        if projected.iter().any(|&v| v > 0.0) {
            tensor.data_mut().copy_from_slice(&projected);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainingMode {
    Ordinary,
    Adversarial(TradesAwpConfig),
}

/// Loss components of a single optimization step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub classification_loss: f64,
    pub consistency_loss: f64,
    pub total_loss: f64,
    /// Perturbation applied during this step, when AWP was active.
    pub awp: Option<WeightPerturbation>,
}

/// Step-level training driver. `run` consumes it for a full training run;
/// `prepare_batch` and `step` expose the per-batch mechanics for probes.
pub struct Trainer<'c> {
    corpus: &'c LabeledCorpus,
    schema: ModelSchema,
    opt: OptimizerConfig,
    mode: TrainingMode,
    seed: u64,
    params: ParameterSet,
    optimizer: AdamW,
    train_graph: Graph,
    global_step: usize,
    total_steps: usize,
}

impl<'c> Trainer<'c> {
    pub fn new(
        corpus: &'c LabeledCorpus,
        schema: &ModelSchema,
        opt: &OptimizerConfig,
        mode: TrainingMode,
        seed: u64,
    ) -> Result<Self, TrainError> {
        opt.validate()?;
        schema.validate()?;
        if corpus.train.is_empty() {
            return Err(TrainError::InvalidConfig("empty training split".into()));
        }
        if let TrainingMode::Adversarial(cfg) = &mode {
            cfg.validate()?;
        }
        let params = models::init_params(schema, seed)?;
        let optimizer = AdamW::new(&params, opt.weight_decay);
        let train_graph = match &mode {
            TrainingMode::Ordinary => ordinary_graph(schema, &opt.loss)?,
            TrainingMode::Adversarial(cfg) => {
                trades_graph(schema, &opt.loss, &opt.consistency_loss, cfg.lambda_inv)?
            }
        };
        let batches_per_epoch = corpus.train.len().div_ceil(opt.batch_size);
        let total_steps = (opt.epochs * batches_per_epoch).max(1);
        Ok(Self {
            corpus,
            schema: schema.clone(),
            opt: *opt,
            mode,
            seed,
            params,
            optimizer,
            train_graph,
            global_step: 0,
            total_steps,
        })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn schema(&self) -> &ModelSchema {
        &self.schema
    }

    /// Shuffled index chunks for one epoch, deterministic per seed.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut indices: Vec<usize> = (0..self.corpus.train.len()).collect();
        let mut rng = Rng::derive(self.seed, &[0x7368_7566, epoch as u64]);
        rng.shuffle(&mut indices);
        indices
            .chunks(self.opt.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Applies mixup and no-call injection to the chosen instances, seeded
    /// per (train seed, epoch, batch).
    pub fn prepare_batch(
        &self,
        epoch: usize,
        batch_idx: usize,
        indices: &[usize],
    ) -> Vec<SpectrogramInstance> {
        let batch: Vec<SpectrogramInstance> = indices
            .iter()
            .map(|&i| self.corpus.train[i].clone())
            .collect();
        let cfg = &self.corpus.config;
        let mix_seed = Rng::derive(self.seed, &[0x6d69, epoch as u64, batch_idx as u64]).next_u64();
        let batch = synth::mixup_multilabel(
            &batch,
            cfg.mixup.probability,
            cfg.mixup.max_components,
            mix_seed,
        );
        let nc_seed = Rng::derive(self.seed, &[0x6e63, epoch as u64, batch_idx as u64]).next_u64();
        synth::inject_nocall(&batch, cfg.nocall_probability, nc_seed, cfg)
    }

    fn layer_lrs(&self, schedule_factor: f64) -> Vec<f64> {
        self.params
            .layer_names()
            .iter()
            .map(|name| {
                if ParameterSet::is_prototype_layer(name) {
                    self.opt.prototype_lr * schedule_factor
                } else {
                    self.opt.base_lr * schedule_factor
                }
            })
            .collect()
    }

    /// Runs one optimization step on a prepared batch.
    pub fn step(
        &mut self,
        epoch: usize,
        batch_idx: usize,
        batch: &[SpectrogramInstance],
    ) -> Result<StepStats, TrainError> {
        let schedule_factor =
            cosine_schedule(self.global_step, self.total_steps, self.opt.warmup_fraction, 1.0)?;
        let diverged = |e: GraphError| match e {
            GraphError::NonFiniteNode { .. } => TrainError::Diverged {
                epoch,
                batch: batch_idx,
                source: e,
            },
            other => TrainError::Graph(other),
        };
        let stats = match self.mode.clone() {
            TrainingMode::Ordinary => {
                let layer_names = self.params.layer_names();
                let wrt: Vec<&str> = layer_names.iter().map(|s| s.as_str()).collect();
                let mut acc = GradAccumulator::new(&self.params);
                let mut cls_total = 0.0;
                for item in batch {
                    let y = Tensor::from_parts(vec![item.labels.len()], item.labels.clone());
                    let mut bindings = self.params.bindings();
                    bindings.set("x", &item.input);
                    bindings.set("y", &y);
                    let (outputs, grads) =
                        autodiff::evaluate(&self.train_graph, &bindings, "loss", &wrt)
                            .map_err(diverged)?;
                    cls_total += outputs["classification"].scalar_value();
                    acc.add(&grads);
                }
                let grads = acc.mean();
                let lrs = self.layer_lrs(schedule_factor);
                self.optimizer.step(&mut self.params, &grads, &lrs);
                if PROJECT_PROTOTYPES {
                    project_prototypes(&mut self.params);
                }
                let mean_cls = cls_total / batch.len() as f64;
                StepStats {
                    classification_loss: mean_cls,
                    consistency_loss: 0.0,
                    total_loss: mean_cls,
                    awp: None,
                }
            }
            TrainingMode::Adversarial(cfg) => {
                // (1) Randomize a copy of the weights for perturbation
                // generation only.
                let rand_seed = Rng::derive(
                    self.seed,
                    &[0x7764_7261, epoch as u64, batch_idx as u64],
                )
                .next_u64();
                let randomized =
                    randomize_weights(&self.params, cfg.weight_randomization_std, rand_seed);
                // (2) One FGSM perturbation per instance.
                let mut items = Vec::with_capacity(batch.len());
                for instance in batch {
                    let adv = match cfg.attack_space {
                        AttackSpace::Output => attacks::fgsm_output(
                            &randomized,
                            &instance.input,
                            &instance.labels,
                            cfg.attack_epsilon,
                            &self.opt.loss,
                        )?,
                        AttackSpace::Embedding => attacks::fgsm_embedding(
                            &randomized,
                            &instance.input,
                            cfg.attack_epsilon,
                        )?,
                    };
                    items.push(AdversarialBatchItem {
                        x: instance.input.clone(),
                        y: instance.labels.clone(),
                        x_adv: adv.x_adv,
                    });
                }
                // (3) AWP after the warm-up epochs.
                let awp_active = epoch >= cfg.awp_warmup_epochs && cfg.awp_gamma > 0.0;
                let perturbation = if awp_active {
                    Some(awp_perturbation(
                        &self.params,
                        &items,
                        &self.opt.loss,
                        &self.opt.consistency_loss,
                        cfg.lambda_inv,
                        cfg.awp_gamma,
                    )?)
                } else {
                    None
                };
                // (4) Gradients at theta + v, update applied to theta.
                let perturbed = perturbation
                    .as_ref()
                    .map(|p| p.apply(&self.params))
                    .unwrap_or_else(|| self.params.clone());
                let layer_names = self.params.layer_names();
                let wrt: Vec<&str> = layer_names.iter().map(|s| s.as_str()).collect();
                let mut acc = GradAccumulator::new(&self.params);
                let mut cls_total = 0.0;
                let mut cons_total = 0.0;
                let mut total_total = 0.0;
                for item in &items {
                    let y = Tensor::from_parts(vec![item.y.len()], item.y.clone());
                    let mut bindings = perturbed.bindings();
                    bindings.set("x", &item.x);
                    bindings.set("x_adv", &item.x_adv);
                    bindings.set("y", &y);
                    let (outputs, grads) =
                        autodiff::evaluate(&self.train_graph, &bindings, "loss", &wrt)
                            .map_err(diverged)?;
                    cls_total += outputs["classification"].scalar_value();
                    cons_total += outputs["consistency"].scalar_value();
                    total_total += outputs["loss"].scalar_value();
                    acc.add(&grads);
                }
                let grads = acc.mean();
                let lrs = self.layer_lrs(schedule_factor);
                self.optimizer.step(&mut self.params, &grads, &lrs);
                if PROJECT_PROTOTYPES {
                    project_prototypes(&mut self.params);
                }
                let n = items.len() as f64;
                StepStats {
                    classification_loss: cls_total / n,
                    consistency_loss: cons_total / n,
                    total_loss: total_total / n,
                    awp: perturbation,
                }
            }
        };
        self.global_step += 1;
        Ok(stats)
    }

    /// Mean validation loss and cmAP on the validation split.
    pub fn validate(&self) -> Result<(f64, f64), TrainError> {
        let mut loss_total = 0.0;
        let mut labels = Vec::with_capacity(self.corpus.val.len());
        let mut scores = Vec::with_capacity(self.corpus.val.len());
        for instance in &self.corpus.val {
            let pred = models::predict(&self.params, &instance.input)?;
            loss_total += losses::asymmetric_loss(&pred.scores, &instance.labels, &self.opt.loss)?;
            labels.push(instance.labels.clone());
            scores.push(pred.scores);
        }
        let batch = metrics::EvaluationBatch::new(labels, scores)?;
        Ok((
            loss_total / self.corpus.val.len() as f64,
            metrics::cmap(&batch)?,
        ))
    }

    /// Full training loop; returns the parameters of the epoch with the
    /// lowest validation loss and the per-epoch log.
    pub fn run(mut self) -> Result<(ParameterSet, TrainingLog), TrainError> {
        let mut log = TrainingLog::default();
        let mut best: Option<(f64, ParameterSet)> = None;
        for epoch in 0..self.opt.epochs {
            let start = Instant::now();
            let lr_at_epoch_start =
                cosine_schedule(self.global_step, self.total_steps, self.opt.warmup_fraction, 1.0)?
                    * self.opt.base_lr;
            let mut cls_sum = 0.0;
            let mut cons_sum = 0.0;
            let mut awp_batches = 0;
            let batches = self.epoch_batches(epoch);
            for (batch_idx, indices) in batches.iter().enumerate() {
                let batch = self.prepare_batch(epoch, batch_idx, indices);
                let stats = self.step(epoch, batch_idx, &batch)?;
                cls_sum += stats.classification_loss;
                cons_sum += stats.consistency_loss;
                if stats.awp.is_some() {
                    awp_batches += 1;
                }
            }
            let (val_loss, val_cmap) = self.validate()?;
            if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
                best = Some((val_loss, self.params.clone()));
            }
            log.epochs.push(EpochRecord {
                epoch,
                mean_classification_loss: cls_sum / batches.len() as f64,
                mean_consistency_loss: cons_sum / batches.len() as f64,
                val_loss,
                val_cmap,
                learning_rate: lr_at_epoch_start,
                wall_seconds: start.elapsed().as_secs_f64(),
                awp_batches,
            });
        }
        let final_params = best.map(|(_, p)| p).unwrap_or(self.params);
        Ok((final_params, log))
    }
}

/// Minimizes the asymmetric loss over shuffled mini-batches.
pub fn train_ordinary(
    corpus: &LabeledCorpus,
    schema: &ModelSchema,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<(ParameterSet, TrainingLog), TrainError> {
    Trainer::new(corpus, schema, opt, TrainingMode::Ordinary, seed)?.run()
}

/// TRADES-AWP adversarial training; the attack space selects the
/// output-space or embedding-space variant.
pub fn train_adversarial(
    corpus: &LabeledCorpus,
    schema: &ModelSchema,
    opt: &OptimizerConfig,
    trades: &TradesAwpConfig,
    seed: u64,
) -> Result<(ParameterSet, TrainingLog), TrainError> {
    Trainer::new(
        corpus,
        schema,
        opt,
        TrainingMode::Adversarial(*trades),
        seed,
    )?
    .run()
}
