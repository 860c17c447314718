use chirplab::models::{self, HeadKind, ModelSchema};
use chirplab::synth::{self, CorpusConfig};
use chirplab::training::{train_ordinary, OptimizerConfig};

fn main() {
    let corpus = synth::generate_corpus(&CorpusConfig::default()).unwrap();
    let schema = ModelSchema::desk(HeadKind::Prototype);
    let proto_lr: f64 = std::env::var("CHIRP_PLR").map(|v| v.parse().unwrap()).unwrap_or(1e-2);
    let base_lr: f64 = std::env::var("CHIRP_LR").map(|v| v.parse().unwrap()).unwrap_or(1e-3);
    let opt = OptimizerConfig { prototype_lr: proto_lr, base_lr, ..OptimizerConfig::default() };
    let (params, log) = train_ordinary(&corpus, &schema, &opt, 1).unwrap();
    for e in &log.epochs {
        if e.epoch % 4 == 0 || e.epoch == 19 {
            println!(
                "epoch {:2} cls {:.4} val_loss {:.4} val_cmap {:.4}",
                e.epoch, e.mean_classification_loss, e.val_loss, e.val_cmap
            );
        }
    }
    let x = &corpus.val[0].input;
    let z = models::embed(&params, x).unwrap();
    let (pred, acts) = models::classify_prototype(&params, &z).unwrap();
    println!("final acts: {:?}", &acts[..9]);
    println!("final scores: {:?}", &pred.scores);
    let x2 = &corpus.val[1].input;
    let z2 = models::embed(&params, x2).unwrap();
    let (pred2, _) = models::classify_prototype(&params, &z2).unwrap();
    println!("scores other instance: {:?}", &pred2.scores);
    for p in 0..3 {
        let t = params.get(&format!("proto.{p}")).unwrap();
        println!("proto.{p} norm {:.4}", t.l2_norm());
    }
    println!("head.weight max_abs {:.4}", params.get("head.weight").unwrap().max_abs());
}
