//! Browser demo: generate synthetic chirp spectrograms, train a small
//! classifier in-page, and watch projected-gradient attacks deform it.
//!
//! Exposed operations return JSON strings; `www/index.html` renders them on
//! plain canvases. All the substance lives in the `chirplab` crate - this is
//! a thin, stateful shim.

use std::cell::RefCell;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use chirplab::attacks::{self, AttackBudget};
use chirplab::models::{ConvSpec, HeadKind, ModelSchema, ParameterSet};
use chirplab::synth::{self, CorpusConfig, LabeledCorpus, ShiftConfig, Split};
use chirplab::training::{self, TrainingMode};

const DEMO_SEED_SPREAD: u64 = 0x6465_6d6f;

thread_local! {
    static STATE: RefCell<Option<DemoState>> = const { RefCell::new(None) };
}

struct DemoState {
    params: ParameterSet,
    corpus: LabeledCorpus,
}

fn demo_corpus_config(seed: u64, shifted: bool) -> CorpusConfig {
    CorpusConfig {
        num_classes: 4,
        train_instances: 160,
        val_instances: 40,
        test_instances: 40,
        input_shape: (24, 48, 1),
        shift: if shifted {
            ShiftConfig::default()
        } else {
            ShiftConfig::neutral()
        },
        seed: seed.wrapping_mul(DEMO_SEED_SPREAD).wrapping_add(seed),
        ..CorpusConfig::default()
    }
}

fn demo_schema(head: HeadKind) -> ModelSchema {
    ModelSchema {
        input_shape: (24, 48, 1),
        num_classes: 4,
        embedding_shape: (6, 12, 12),
        head_kind: head,
        prototypes_per_class: 2,
        conv_layers: vec![
            ConvSpec { out_channels: 6, stride: 2 },
            ConvSpec { out_channels: 12, stride: 2 },
        ],
    }
}

#[derive(Serialize)]
struct ImageJson {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

fn image_of(tensor: &chirplab::Tensor) -> ImageJson {
    ImageJson {
        height: tensor.shape()[0],
        width: tensor.shape()[1],
        values: tensor.data().to_vec(),
    }
}

#[derive(Serialize)]
struct InstanceJson {
    id: String,
    image: ImageJson,
    labels: Vec<u8>,
    class_names: Vec<String>,
}

#[derive(Serialize)]
struct TrainJson {
    mode: String,
    epochs: Vec<EpochJson>,
    head: String,
}

#[derive(Serialize)]
struct EpochJson {
    epoch: usize,
    classification_loss: f64,
    consistency_loss: f64,
    val_cmap: f64,
}

#[derive(Serialize)]
struct AttackJson {
    kind: String,
    epsilon: f64,
    clean: ImageJson,
    adversarial: ImageJson,
    delta: ImageJson,
    initial_objective: f64,
    trace: Vec<f64>,
    clean_scores: Vec<f64>,
    adversarial_scores: Vec<f64>,
    labels: Vec<u8>,
    class_names: Vec<String>,
}

fn err_json(message: impl std::fmt::Display) -> String {
    format!("{{\"error\":{}}}", serde_json::json!(message.to_string()))
}

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("chirp-{i}")).collect()
}

fn instance_json(seed: u64, index: usize, shifted: bool) -> String {
    let cfg = demo_corpus_config(seed, shifted);
    let corpus = match synth::generate_corpus(&cfg) {
        Ok(c) => c,
        Err(e) => return err_json(e),
    };
    let test = corpus.split(Split::Test);
    let instance = &test[index % test.len()];
    let payload = InstanceJson {
        id: instance.id.clone(),
        image: image_of(&instance.input),
        labels: instance.labels.iter().map(|&l| l as u8).collect(),
        class_names: class_names(cfg.num_classes),
    };
    serde_json::to_string(&payload).unwrap_or_else(|e| err_json(e))
}

fn train_json(seed: u64, mode: &str, head: &str, epochs: usize) -> String {
    let head_kind = match head {
        "prototype" => HeadKind::Prototype,
        _ => HeadKind::Linear,
    };
    let training_mode = match mode {
        "ot" => TrainingMode::Ordinary,
        "at-o" => TrainingMode::Adversarial(training::TradesAwpConfig {
            awp_warmup_epochs: epochs / 2,
            ..training::TradesAwpConfig::output_space()
        }),
        "at-e" => TrainingMode::Adversarial(training::TradesAwpConfig {
            awp_warmup_epochs: epochs / 2,
            ..training::TradesAwpConfig::embedding_space()
        }),
        other => return err_json(format!("unknown mode `{other}`")),
    };
    let cfg = demo_corpus_config(seed, true);
    let corpus = match synth::generate_corpus(&cfg) {
        Ok(c) => c,
        Err(e) => return err_json(e),
    };
    let schema = demo_schema(head_kind);
    let opt = training::OptimizerConfig {
        epochs,
        batch_size: 16,
        base_lr: 3e-3,
        ..training::OptimizerConfig::default()
    };
    let trainer = match training::Trainer::new(&corpus, &schema, &opt, training_mode, seed) {
        Ok(t) => t,
        Err(e) => return err_json(e),
    };
    let (params, log) = match trainer.run() {
        Ok(r) => r,
        Err(e) => return err_json(e),
    };
    let payload = TrainJson {
        mode: mode.to_string(),
        head: head.to_string(),
        epochs: log
            .epochs
            .iter()
            .map(|e| EpochJson {
                epoch: e.epoch,
                classification_loss: e.mean_classification_loss,
                consistency_loss: e.mean_consistency_loss,
                val_cmap: e.val_cmap,
            })
            .collect(),
    };
    STATE.with(|s| {
        *s.borrow_mut() = Some(DemoState { params, corpus });
    });
    serde_json::to_string(&payload).unwrap_or_else(|e| err_json(e))
}

fn attack_json(kind: &str, epsilon: f64, index: usize) -> String {
    STATE.with(|s| {
        let state = s.borrow();
        let Some(state) = state.as_ref() else {
            return err_json("train a model first");
        };
        let test = state.corpus.split(Split::Test);
        let instance = &test[index % test.len()];
        let budget = AttackBudget::evaluation(epsilon);
        let example = match kind {
            "output-untargeted" => attacks::pgd_output_untargeted(
                &state.params,
                &instance.input,
                &instance.labels,
                &budget,
                &chirplab::losses::AsymmetricLossConfig::default(),
            ),
            "embedding-untargeted" => {
                attacks::pgd_embedding_untargeted(&state.params, &instance.input, &budget)
            }
            "embedding-targeted" => {
                let total = state.params.schema().prototype_count();
                if total == 0 {
                    return err_json("targeted attacks need the prototype head");
                }
                let pick = chirplab::rng::Rng::derive(epsilon.to_bits(), &[index as u64])
                    .below(total);
                match attacks::TargetEmbedding::new(
                    state
                        .params
                        .get(&format!("proto.{pick}"))
                        .expect("prototype layer")
                        .clone(),
                ) {
                    Ok(target) => attacks::pgd_embedding_targeted(
                        &state.params,
                        &instance.input,
                        &target,
                        &budget,
                    ),
                    Err(e) => return err_json(e),
                }
            }
            other => return err_json(format!("unknown attack kind `{other}`")),
        };
        let example = match example {
            Ok(e) => e,
            Err(e) => return err_json(e),
        };
        let clean_pred = match chirplab::models::predict(&state.params, &instance.input) {
            Ok(p) => p,
            Err(e) => return err_json(e),
        };
        let adv_pred = match chirplab::models::predict(&state.params, &example.x_adv) {
            Ok(p) => p,
            Err(e) => return err_json(e),
        };
        let payload = AttackJson {
            kind: kind.to_string(),
            epsilon,
            clean: image_of(&instance.input),
            adversarial: image_of(&example.x_adv),
            delta: image_of(&example.delta),
            initial_objective: example.initial_objective,
            trace: example.objective_trace.clone(),
            clean_scores: clean_pred.scores,
            adversarial_scores: adv_pred.scores,
            labels: instance.labels.iter().map(|&l| l as u8).collect(),
            class_names: class_names(state.params.schema().num_classes),
        };
        serde_json::to_string(&payload).unwrap_or_else(|e| err_json(e))
    })
}

/// One labeled test spectrogram as JSON, optionally from the shifted
/// distribution.
#[wasm_bindgen]
pub fn generate_instance(seed: u32, index: u32, shifted: bool) -> String {
    instance_json(seed as u64, index as usize, shifted)
}

/// Trains a demo model (`mode`: ot | at-o | at-e; `head`: linear |
/// prototype) and keeps it for subsequent attacks. Returns the training
/// curve as JSON.
#[wasm_bindgen]
pub fn train_model(seed: u32, mode: &str, head: &str, epochs: u32) -> String {
    train_json(seed as u64, mode, head, epochs as usize)
}

/// Attacks one test instance with the trained model and returns the clean,
/// adversarial and difference images plus the objective trace.
#[wasm_bindgen]
pub fn run_attack(kind: &str, epsilon: f64, index: u32) -> String {
    attack_json(kind, epsilon, index as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_json_is_well_formed() {
        let json = instance_json(3, 0, true);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(value.get("error").is_none(), "{json}");
        assert_eq!(value["image"]["height"], 24);
        assert_eq!(value["image"]["width"], 48);
        assert_eq!(value["labels"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn train_then_attack_round_trip() {
        let json = train_json(1, "ot", "prototype", 2);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(value.get("error").is_none(), "{json}");
        assert_eq!(value["epochs"].as_array().unwrap().len(), 2);

        for kind in ["output-untargeted", "embedding-untargeted", "embedding-targeted"] {
            let json = attack_json(kind, 0.05, 1);
            let value: serde_json::Value = serde_json::from_str(&json).unwrap();
            assert!(value.get("error").is_none(), "{kind}: {json}");
            assert_eq!(value["trace"].as_array().unwrap().len(), 10);
            let delta = value["delta"]["values"].as_array().unwrap();
            let max = delta
                .iter()
                .map(|v| v.as_f64().unwrap().abs())
                .fold(0.0_f64, f64::max);
            assert!(max <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn attack_without_training_reports_error() {
        STATE.with(|s| *s.borrow_mut() = None);
        let json = attack_json("output-untargeted", 0.05, 0);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(value.get("error").is_some());
    }
}
