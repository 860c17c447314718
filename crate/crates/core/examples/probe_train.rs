use chirplab::models::{ConvSpec, HeadKind, ModelSchema};
use chirplab::synth::{self, CorpusConfig, ShiftConfig};
use chirplab::training::{train_ordinary, OptimizerConfig};

fn main() {
    let mut cfg = CorpusConfig {
        train_instances: 120,
        val_instances: 40,
        test_instances: 12,
        num_classes: 2,
        input_shape: (16, 16, 1),
        shift: ShiftConfig::neutral(),
        nocall_probability: 0.0,
        noise_std: 0.15,
        seed: 9,
        ..CorpusConfig::default()
    };
    cfg.mixup.probability = 0.0;
    let corpus = synth::generate_corpus(&cfg).unwrap();
    let schema = ModelSchema {
        input_shape: (16, 16, 1),
        num_classes: 2,
        embedding_shape: (4, 4, 8),
        head_kind: HeadKind::Linear,
        prototypes_per_class: 1,
        conv_layers: vec![
            ConvSpec { out_channels: 4, stride: 2 },
            ConvSpec { out_channels: 8, stride: 2 },
        ],
    };
    let opt = OptimizerConfig { epochs: 20, batch_size: 16, base_lr: 3e-3, ..OptimizerConfig::default() };
    let (_, log) = train_ordinary(&corpus, &schema, &opt, 2).unwrap();
    for e in &log.epochs {
        println!(
            "epoch {:2} cls {:.4} val_loss {:.4} val_cmap {:.4} lr {:.5}",
            e.epoch, e.mean_classification_loss, e.val_loss, e.val_cmap, e.learning_rate
        );
    }
}
