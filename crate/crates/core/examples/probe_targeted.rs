use chirplab::attacks::{self, AttackBudget, TargetEmbedding};
use chirplab::harness::ExperimentConfig;
use chirplab::models::{self, HeadKind, ModelSchema};
use chirplab::rng::Rng;
use chirplab::synth::{self, Split};
use chirplab::training::{self, TrainingMode};

fn main() {
    let mut config = ExperimentConfig::default();
    if let Ok(v) = std::env::var("CHIRP_TRAIN_NOISE") {
        config.corpus.noise_std = v.parse().unwrap();
    }
    let seed = 1u64;
    let corpus = synth::generate_corpus(&config.corpus_for_seed(seed)).unwrap();
    let schema = ModelSchema::desk(HeadKind::Prototype);
    let awp_gamma: f64 = std::env::var("CHIRP_AWP_GAMMA")
        .map(|v| v.parse().unwrap())
        .unwrap_or(0.005);
    let lambda_inv: f64 = std::env::var("CHIRP_LAMBDA_INV")
        .map(|v| v.parse().unwrap())
        .unwrap_or(1.0);
    let eval_eps: f64 = std::env::var("CHIRP_EVAL_EPS")
        .map(|v| v.parse().unwrap())
        .unwrap_or(0.1);
    for (mode_name, mode) in [
        ("ot", TrainingMode::Ordinary),
        (
            "at-o",
            TrainingMode::Adversarial(training::TradesAwpConfig {
                awp_gamma,
                lambda_inv,
                ..training::TradesAwpConfig::output_space()
            }),
        ),
    ] {
        let trainer =
            training::Trainer::new(&corpus, &schema, &config.optimizer, mode, seed).unwrap();
        let (params, _) = trainer.run().unwrap();
        let budget = AttackBudget::evaluation(eval_eps);
        let mut dmin_clean = Vec::new();
        let mut dmin_adv = Vec::new();
        for (index, instance) in corpus.split(Split::Test).iter().take(64).enumerate() {
            let total = params.schema().prototype_count();
            let pick = Rng::derive(7, &[index as u64]).below(total);
            let target = TargetEmbedding::new(
                params.get(&format!("proto.{pick}")).unwrap().clone(),
            )
            .unwrap();
            let example =
                attacks::pgd_embedding_targeted(&params, &instance.input, &target, &budget)
                    .unwrap();
            let zc = models::embed(&params, &instance.input).unwrap();
            let za = models::embed(&params, &example.x_adv).unwrap();
            dmin_clean.push(attacks::d_min(&zc, &target).unwrap());
            dmin_adv.push(attacks::d_min(&za, &target).unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let drs: Vec<f64> = dmin_clean
            .iter()
            .zip(&dmin_adv)
            .map(|(&c, &a)| chirplab::metrics::drs_from_dmins(c, a))
            .collect();
        println!(
            "{mode_name}: dmin_clean mean {:.4} | dmin_adv mean {:.4} | mean ratio {:.3} | DRS {:.3}",
            mean(&dmin_clean),
            mean(&dmin_adv),
            mean(&dmin_clean) / mean(&dmin_adv).max(1e-9),
            mean(&drs),
        );
        // Prototype-to-data geometry: best cosine of each prototype over a
        // sample of clean test embeddings.
        let mut per_proto_best = vec![0.0_f64; params.schema().prototype_count()];
        for instance in corpus.split(Split::Test).iter().take(32) {
            let z = models::embed(&params, &instance.input).unwrap();
            for p in 0..per_proto_best.len() {
                let t = TargetEmbedding::new(
                    params.get(&format!("proto.{p}")).unwrap().clone(),
                )
                .unwrap();
                let d = attacks::d_min(&z, &t).unwrap();
                per_proto_best[p] = per_proto_best[p].max(1.0 - d);
            }
        }
        println!("  best prototype-data cosine per proto: {:?}",
            per_proto_best.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
}
