use chirplab::models::{self, HeadKind, ModelSchema};
use chirplab::synth::{self, CorpusConfig};
use chirplab::losses::{self, AsymmetricLossConfig};
use chirplab::autodiff::{self, GraphBuilder};
use chirplab::tensor::Tensor;

fn main() {
    let corpus = synth::generate_corpus(&CorpusConfig::default()).unwrap();
    let schema = ModelSchema::desk(HeadKind::Prototype);
    let params = models::init_params(&schema, 1).unwrap();
    let x = &corpus.train[0].input;
    let z = models::embed(&params, x).unwrap();
    let stats = |v: &[f64]| {
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mn = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let nonzero = v.iter().filter(|&&a| a != 0.0).count();
        (mn, mx, nonzero, v.len())
    };
    println!("input stats: {:?}", stats(x.data()));
    println!("embedding stats: {:?}", stats(z.values.data()));
    let (pred, acts) = models::classify_prototype(&params, &z).unwrap();
    println!("activations: {:?}", stats(&acts));
    println!("acts head: {:?}", &acts[..6]);
    println!("logits: {:?}", &pred.logits);
    println!("scores: {:?}", &pred.scores);

    // Gradient of the training loss wrt x and wrt a prototype.
    let mut b = GraphBuilder::new();
    let wiring = models::append_model(&mut b, &schema, "x").unwrap();
    let y = b.leaf("y", vec![6]).unwrap();
    let loss = losses::append_asymmetric_loss(&mut b, wiring.scores, y, &AsymmetricLossConfig::default()).unwrap();
    b.output("loss", loss).unwrap();
    let graph = b.finish();
    let yt = Tensor::new(vec![6], corpus.train[0].labels.clone()).unwrap();
    let mut bind = params.bindings();
    bind.set("x", x);
    bind.set("y", &yt);
    let grads = autodiff::gradient(&graph, &bind, "loss", &["x", "proto.0", "head.weight", "conv1.weight"]).unwrap();
    for leaf in ["x", "proto.0", "head.weight", "conv1.weight"] {
        let g = grads.get(leaf).unwrap();
        println!("grad {leaf}: max_abs {:.3e}", g.max_abs());
    }
}
