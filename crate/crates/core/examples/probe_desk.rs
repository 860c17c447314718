use std::time::Instant;

use chirplab::harness::{evaluate_robustness, AttackKind, ExperimentConfig, TargetSource};
use chirplab::attacks::AttackBudget;
use chirplab::models::HeadKind;
use chirplab::synth;
use chirplab::training::{self, TrainingMode};

fn main() {
    let mut config = ExperimentConfig::default();
    if let Ok(std) = std::env::var("CHIRP_STD") {
        config.corpus.normalization.std = std.parse().unwrap();
    }
    if let Ok(lr) = std::env::var("CHIRP_LR") {
        config.optimizer.base_lr = lr.parse().unwrap();
    }
    if let Ok(v) = std::env::var("CHIRP_NOISE_MULT") {
        config.corpus.shift.noise_multiplier = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("CHIRP_JITTER") {
        config.corpus.shift.frequency_jitter = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("CHIRP_SWAP") {
        config.corpus.shift.swap_background = v == "1";
    }
    if let Ok(v) = std::env::var("CHIRP_TRAIN_NOISE") {
        config.corpus.noise_std = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("CHIRP_EPOCHS") {
        config.optimizer.epochs = v.parse().unwrap();
    }
    let only: Option<String> = std::env::var("CHIRP_ONLY").ok();
    let seed = 1u64;
    let corpus = synth::generate_corpus(&config.corpus_for_seed(seed)).unwrap();

    for (name, head) in [("linear", HeadKind::Linear), ("prototype", HeadKind::Prototype)] {
        if let Some(filter) = &only {
            if !filter.contains(name) {
                continue;
            }
        }
        let mut schema = chirplab::models::ModelSchema::desk(head);
        if std::env::var("CHIRP_DEEP").is_ok() {
            schema.conv_layers = vec![
                chirplab::models::ConvSpec { out_channels: 8, stride: 2 },
                chirplab::models::ConvSpec { out_channels: 16, stride: 2 },
                chirplab::models::ConvSpec { out_channels: 32, stride: 1 },
                chirplab::models::ConvSpec { out_channels: 32, stride: 1 },
            ];
        }
        let train_eps: f64 = std::env::var("CHIRP_TRAIN_EPS")
            .map(|v| v.parse().unwrap())
            .unwrap_or(0.1);
        let awp_gamma: f64 = std::env::var("CHIRP_AWP_GAMMA")
            .map(|v| v.parse().unwrap())
            .unwrap_or(0.005);
        let lambda_inv: f64 = std::env::var("CHIRP_LAMBDA_INV")
            .map(|v| v.parse().unwrap())
            .unwrap_or(1.0);
        let rand_std: f64 = std::env::var("CHIRP_RAND_STD")
            .map(|v| v.parse().unwrap())
            .unwrap_or(1e-4);
        for (mode_name, mode) in [
            ("ot", TrainingMode::Ordinary),
            (
                "at-o",
                TrainingMode::Adversarial(training::TradesAwpConfig {
                    attack_epsilon: train_eps,
                    awp_gamma,
                    lambda_inv,
                    weight_randomization_std: rand_std,
                    ..training::TradesAwpConfig::output_space()
                }),
            ),
        ] {
            let t0 = Instant::now();
            let trainer = training::Trainer::new(&corpus, &schema, &config.optimizer, mode.clone(), seed).unwrap();
            let (params, log) = trainer.run().unwrap();
            let train_time = t0.elapsed().as_secs_f64();
            let best_val = log.epochs.iter().map(|e| e.val_cmap).fold(0.0_f64, f64::max);
            let last_val = log.epochs.last().unwrap().val_cmap;

            let t1 = Instant::now();
            let clean = evaluate_robustness(&params, &corpus, AttackKind::OutputUntargeted,
                &AttackBudget::evaluation(1e-9), None, &config.optimizer.loss, 1.0).unwrap();
            let out05 = evaluate_robustness(&params, &corpus, AttackKind::OutputUntargeted,
                &AttackBudget::evaluation(0.05), None, &config.optimizer.loss, 1.0).unwrap();
            let emb05 = evaluate_robustness(&params, &corpus, AttackKind::EmbeddingUntargeted,
                &AttackBudget::evaluation(0.05), None, &config.optimizer.loss, 1.0).unwrap();
            let emb10 = evaluate_robustness(&params, &corpus, AttackKind::EmbeddingUntargeted,
                &AttackBudget::evaluation(0.1), None, &config.optimizer.loss, 1.0).unwrap();
            let eval_time = t1.elapsed().as_secs_f64();

            println!(
                "{name}/{mode_name}: train {train_time:.1}s eval {eval_time:.1}s | val best {best_val:.3} last {last_val:.3} | test cmAP {:.3} | PRS out@.05 {:.3} emb@.05 {:.3} emb@.1 {:.3}",
                clean.clean_cmap, out05.prs, emb05.prs, emb10.prs
            );
            if head == HeadKind::Prototype {
                let t2 = Instant::now();
                let tgt = evaluate_robustness(&params, &corpus, AttackKind::EmbeddingTargeted,
                    &AttackBudget::evaluation(0.1), Some(&TargetSource::Prototypes { seed: 7 }),
                    &config.optimizer.loss, 1.0).unwrap();
                println!(
                    "  targeted@0.1: PRS {:.3} DRS {:.3} TARS {:.3} ({:.1}s)",
                    tgt.prs, tgt.drs.unwrap(), tgt.tars.unwrap(), t2.elapsed().as_secs_f64()
                );
            }
        }
    }
}
