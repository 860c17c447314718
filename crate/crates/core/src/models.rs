//! Desk-scale convolutional classifiers: a shared embedding extractor with
//! either a global-pooled linear head or a prototype head.
//!
//! The extractor is a stack of 3x3 convolutions (zero padding 1) with relu,
//! producing an embedding map of shape `(h_z, w_z, d)`. The linear head
//! global-average-pools the map and applies an affine layer to `k` logits.
//! The prototype head scores each learned prototype vector by its best
//! rectified cosine match over spatial positions and maps those activations
//! to logits through a dense layer initialized +1 for same-class connections
//! and -0.5 elsewhere.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    self, Bindings, GraphBuilder, GraphError, NodeId, ZeroNormPolicy,
};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("input shape {got:?} does not match schema {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("operation requires a {expected:?} head")]
    WrongHead { expected: HeadKind },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Prototype,
}

/// One convolution layer of the extractor; kernels are 3x3 with padding 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSchema {
    /// Input spectrogram shape (h, w, c).
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    /// Embedding map shape (h_z, w_z, d); must match the conv stack output.
    pub embedding_shape: (usize, usize, usize),
    pub head_kind: HeadKind,
    pub prototypes_per_class: usize,
    pub conv_layers: Vec<ConvSpec>,
}

const KERNEL: usize = 3;
const PAD: usize = 1;

fn conv_out(dim: usize, stride: usize) -> usize {
    (dim + 2 * PAD - KERNEL) / stride + 1
}

impl ModelSchema {
    /// Default desk-scale schema: 32x64x1 input, four conv layers
    /// (8 -> 16 -> 32 -> 32 channels, strides 2/2/1/1), embedding
    /// (8, 16, 32), 6 classes.
    pub fn desk(head_kind: HeadKind) -> Self {
        Self {
            input_shape: (32, 64, 1),
            num_classes: 6,
            embedding_shape: (8, 16, 32),
            head_kind,
            prototypes_per_class: 3,
            conv_layers: vec![
                ConvSpec { out_channels: 8, stride: 2 },
                ConvSpec { out_channels: 16, stride: 2 },
                ConvSpec { out_channels: 32, stride: 1 },
                ConvSpec { out_channels: 32, stride: 1 },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (h, w, c) = self.input_shape;
        let (hz, wz, d) = self.embedding_shape;
        if h == 0 || w == 0 || c == 0 || hz == 0 || wz == 0 || d == 0 {
            return Err(ModelError::InvalidSchema("zero dimension".into()));
        }
        if self.num_classes == 0 {
            return Err(ModelError::InvalidSchema("num_classes must be >= 1".into()));
        }
        if hz > h || wz > w {
            return Err(ModelError::InvalidSchema(
                "embedding extent exceeds input extent".into(),
            ));
        }
        if self.head_kind == HeadKind::Prototype && self.prototypes_per_class == 0 {
            return Err(ModelError::InvalidSchema(
                "prototype head needs prototypes_per_class >= 1".into(),
            ));
        }
        if self.conv_layers.is_empty() {
            return Err(ModelError::InvalidSchema("no conv layers".into()));
        }
        let (mut ch, mut cw) = (h, w);
        let mut channels = c;
        for (i, layer) in self.conv_layers.iter().enumerate() {
            if layer.stride == 0 || layer.out_channels == 0 {
                return Err(ModelError::InvalidSchema(format!(
                    "conv layer {i} has zero stride or channels"
                )));
            }
            ch = conv_out(ch, layer.stride);
            cw = conv_out(cw, layer.stride);
            channels = layer.out_channels;
        }
        if (ch, cw, channels) != (hz, wz, d) {
            return Err(ModelError::InvalidSchema(format!(
                "conv stack produces ({ch}, {cw}, {channels}), schema says {:?}",
                self.embedding_shape
            )));
        }
        Ok(())
    }

    pub fn prototype_count(&self) -> usize {
        match self.head_kind {
            HeadKind::Prototype => self.num_classes * self.prototypes_per_class,
            HeadKind::Linear => 0,
        }
    }

    /// Class owning prototype `index` under the even partition.
    pub fn prototype_class(&self, index: usize) -> usize {
        index / self.prototypes_per_class
    }

    pub fn input_tensor_shape(&self) -> Vec<usize> {
        vec![self.input_shape.0, self.input_shape.1, self.input_shape.2]
    }

    pub fn embedding_tensor_shape(&self) -> Vec<usize> {
        vec![
            self.embedding_shape.0,
            self.embedding_shape.1,
            self.embedding_shape.2,
        ]
    }
}

/// Latent map produced by the embedding extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub values: Tensor,
}

impl EmbeddingMap {
    pub fn depth(&self) -> usize {
        self.values.shape()[2]
    }

    /// Embedding vector at one spatial position.
    pub fn at(&self, h: usize, w: usize) -> &[f64] {
        let d = self.depth();
        let wz = self.values.shape()[1];
        let base = (h * wz + w) * d;
        &self.values.data()[base..base + d]
    }

    /// Mean embedding over all spatial positions.
    pub fn pooled(&self) -> Vec<f64> {
        let d = self.depth();
        let positions = self.values.len() / d;
        let mut out = vec![0.0; d];
        for pos in 0..positions {
            for i in 0..d {
                out[i] += self.values.data()[pos * d + i];
            }
        }
        for v in &mut out {
            *v /= positions as f64;
        }
        out
    }
}

/// Model output: raw logits and their sigmoid scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Named, ordered collection of weight tensors for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    schema: ModelSchema,
    layers: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn schema(&self) -> &ModelSchema {
        &self.schema
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.layers
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Leaf bindings for every layer tensor.
    pub fn bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        for (name, tensor) in &self.layers {
            b.set(name.clone(), tensor);
        }
        b
    }

    /// Prototype vectors in index order (prototype head only).
    pub fn prototypes(&self) -> Vec<&Tensor> {
        (0..self.schema.prototype_count())
            .map(|i| self.get(&format!("proto.{i}")).expect("prototype layer"))
            .collect()
    }

    /// True for layers trained with the prototype learning rate.
    pub fn is_prototype_layer(name: &str) -> bool {
        name.starts_with("proto.")
    }
}

/// Deterministic pseudo-random initialization; prototype vectors start at
/// unit norm, the prototype head at the +1 / -0.5 class pattern.
pub fn init_params(schema: &ModelSchema, seed: u64) -> Result<ParameterSet, ModelError> {
    schema.validate()?;
    let mut layers = Vec::new();
    let mut c_in = schema.input_shape.2;
    for (i, conv) in schema.conv_layers.iter().enumerate() {
        let mut rng = Rng::derive(seed, &[1, i as u64]);
        let fan_in = (KERNEL * KERNEL * c_in) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w_len = KERNEL * KERNEL * c_in * conv.out_channels;
        let w: Vec<f64> = (0..w_len).map(|_| rng.normal() * std).collect();
        layers.push((
            format!("conv{}.weight", i + 1),
            Tensor::new(vec![KERNEL, KERNEL, c_in, conv.out_channels], w)?,
        ));
        layers.push((
            format!("conv{}.bias", i + 1),
            Tensor::zeros(vec![conv.out_channels]),
        ));
        c_in = conv.out_channels;
    }
    let d = schema.embedding_shape.2;
    let k = schema.num_classes;
    match schema.head_kind {
        HeadKind::Linear => {
            let mut rng = Rng::derive(seed, &[2]);
            let std = (1.0 / d as f64).sqrt();
            let w: Vec<f64> = (0..d * k).map(|_| rng.normal() * std).collect();
            layers.push(("head.weight".to_string(), Tensor::new(vec![d, k], w)?));
            layers.push(("head.bias".to_string(), Tensor::zeros(vec![k])));
        }
        HeadKind::Prototype => {
            let total = schema.prototype_count();
            for p in 0..total {
                let mut rng = Rng::derive(seed, &[3, p as u64]);
                // Embeddings are post-relu and live in the nonnegative
                // orthant; prototypes start inside that cone so their
                // rectified cosine activations are born alive.
                let mut v: Vec<f64> = (0..d).map(|_| rng.normal().abs()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in &mut v {
                    *x /= norm;
                }
                layers.push((format!("proto.{p}"), Tensor::new(vec![d], v)?));
            }
            // +1 to the own class; negative to the rest, scaled so the
            // total cross-class mass stays at half the own-class mass
            // regardless of how many classes share the bank. With the raw
            // -0.5 of the single-label lineage, cross-class suppression
            // outweighs own-class pull under multi-label targets and the
            // activations collapse.
            let cross = if k > 1 {
                -0.5 * schema.prototypes_per_class as f64
                    / (total - schema.prototypes_per_class) as f64
            } else {
                0.0
            };
            let mut w = vec![0.0; total * k];
            for p in 0..total {
                let own = schema.prototype_class(p);
                for class in 0..k {
                    w[p * k + class] = if class == own { 1.0 } else { cross };
                }
            }
            layers.push(("head.weight".to_string(), Tensor::new(vec![total, k], w)?));
        }
    }
    Ok(ParameterSet {
        schema: schema.clone(),
        layers,
    })
}

/// Node handles for a model wired into a graph.
#[derive(Debug, Clone)]
pub struct ModelWiring {
    pub input: NodeId,
    pub embedding: NodeId,
    pub logits: NodeId,
    pub scores: NodeId,
    /// Per-prototype activations, prototype head only.
    pub activations: Option<NodeId>,
}

/// Node handles for a classifier head alone.
#[derive(Debug, Clone)]
pub struct HeadWiring {
    pub logits: NodeId,
    pub scores: NodeId,
    pub activations: Option<NodeId>,
}

/// Appends the embedding extractor reading from the named input leaf.
/// Parameter leaves are shared by name across repeated calls, so several
/// branches of one graph can reuse the same weights.
pub fn append_embedding(
    b: &mut GraphBuilder,
    schema: &ModelSchema,
    input_leaf: &str,
) -> Result<(NodeId, NodeId), ModelError> {
    let input = b.leaf(input_leaf, schema.input_tensor_shape())?;
    let mut x = input;
    let mut c_in = schema.input_shape.2;
    for (i, conv) in schema.conv_layers.iter().enumerate() {
        let w = b.leaf(
            &format!("conv{}.weight", i + 1),
            vec![KERNEL, KERNEL, c_in, conv.out_channels],
        )?;
        let bias = b.leaf(&format!("conv{}.bias", i + 1), vec![conv.out_channels])?;
        let conv_out = b.conv2d(x, w, bias, (conv.stride, conv.stride), (PAD, PAD))?;
        x = b.relu(conv_out)?;
        c_in = conv.out_channels;
    }
    Ok((input, x))
}

/// Appends the classifier head on top of an embedding node.
pub fn append_head(
    b: &mut GraphBuilder,
    schema: &ModelSchema,
    embedding: NodeId,
) -> Result<HeadWiring, ModelError> {
    let k = schema.num_classes;
    let d = schema.embedding_shape.2;
    match schema.head_kind {
        HeadKind::Linear => {
            let pooled = b.global_avg_pool(embedding)?;
            let w = b.leaf("head.weight", vec![d, k])?;
            let bias = b.leaf("head.bias", vec![k])?;
            let logits = b.affine(pooled, w, Some(bias))?;
            let scores = b.sigmoid(logits)?;
            Ok(HeadWiring {
                logits,
                scores,
                activations: None,
            })
        }
        HeadKind::Prototype => {
            let total = schema.prototype_count();
            let mut acts = Vec::with_capacity(total);
            for p in 0..total {
                let proto = b.leaf(&format!("proto.{p}"), vec![d])?;
                // Zero-norm positions (padded silence) score 0, not an error.
                let cos = b.cosine_map(embedding, proto, ZeroNormPolicy::ZeroSimilarity)?;
                let rect = b.relu(cos)?;
                acts.push(b.spatial_max(rect)?);
            }
            let activations = b.concat(acts)?;
            let w = b.leaf("head.weight", vec![total, k])?;
            let logits = b.affine(activations, w, None)?;
            let scores = b.sigmoid(logits)?;
            Ok(HeadWiring {
                logits,
                scores,
                activations: Some(activations),
            })
        }
    }
}

/// Appends the full model: extractor plus head.
pub fn append_model(
    b: &mut GraphBuilder,
    schema: &ModelSchema,
    input_leaf: &str,
) -> Result<ModelWiring, ModelError> {
    let (input, embedding) = append_embedding(b, schema, input_leaf)?;
    let head = append_head(b, schema, embedding)?;
    Ok(ModelWiring {
        input,
        embedding,
        logits: head.logits,
        scores: head.scores,
        activations: head.activations,
    })
}

fn check_input(schema: &ModelSchema, x: &Tensor) -> Result<(), ModelError> {
    if x.shape() != schema.input_tensor_shape().as_slice() {
        return Err(ModelError::InputShape {
            expected: schema.input_tensor_shape(),
            got: x.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_embedding(schema: &ModelSchema, z: &EmbeddingMap) -> Result<(), ModelError> {
    if z.values.shape() != schema.embedding_tensor_shape().as_slice() {
        return Err(ModelError::InputShape {
            expected: schema.embedding_tensor_shape(),
            got: z.values.shape().to_vec(),
        });
    }
    Ok(())
}

/// Runs the embedding extractor.
pub fn embed(params: &ParameterSet, x: &Tensor) -> Result<EmbeddingMap, ModelError> {
    check_input(params.schema(), x)?;
    let mut b = GraphBuilder::new();
    let (_, embedding) = append_embedding(&mut b, params.schema(), "x")?;
    b.output("embedding", embedding)?;
    let graph = b.finish();
    let mut bindings = params.bindings();
    bindings.set("x", x);
    let mut out = autodiff::forward(&graph, &bindings)?;
    Ok(EmbeddingMap {
        values: out.remove("embedding").expect("embedding output"),
    })
}

fn run_head(params: &ParameterSet, z: &EmbeddingMap) -> Result<(Prediction, Option<Vec<f64>>), ModelError> {
    let mut b = GraphBuilder::new();
    let embedding = b.leaf("embedding", params.schema().embedding_tensor_shape())?;
    let wiring = append_head(&mut b, params.schema(), embedding)?;
    b.output("logits", wiring.logits)?;
    b.output("scores", wiring.scores)?;
    if let Some(a) = wiring.activations {
        b.output("activations", a)?;
    }
    let graph = b.finish();
    let mut bindings = params.bindings();
    bindings.set("embedding", &z.values);
    let mut out = autodiff::forward(&graph, &bindings)?;
    let prediction = Prediction {
        logits: out["logits"].data().to_vec(),
        scores: out["scores"].data().to_vec(),
    };
    let acts = out.remove("activations").map(|t| t.data().to_vec());
    Ok((prediction, acts))
}

/// Global average pooling over the map, then affine to logits and sigmoid.
pub fn classify_linear(params: &ParameterSet, z: &EmbeddingMap) -> Result<Prediction, ModelError> {
    if params.schema().head_kind != HeadKind::Linear {
        return Err(ModelError::WrongHead {
            expected: HeadKind::Linear,
        });
    }
    check_embedding(params.schema(), z)?;
    Ok(run_head(params, z)?.0)
}

/// Prototype head: per-prototype best rectified cosine match over positions,
/// then a dense layer to logits. Returns the prediction and the activations.
pub fn classify_prototype(
    params: &ParameterSet,
    z: &EmbeddingMap,
) -> Result<(Prediction, Vec<f64>), ModelError> {
    if params.schema().head_kind != HeadKind::Prototype {
        return Err(ModelError::WrongHead {
            expected: HeadKind::Prototype,
        });
    }
    check_embedding(params.schema(), z)?;
    let (prediction, acts) = run_head(params, z)?;
    Ok((prediction, acts.expect("prototype activations")))
}

/// Full forward pass: embed then classify.
pub fn predict(params: &ParameterSet, x: &Tensor) -> Result<Prediction, ModelError> {
    check_input(params.schema(), x)?;
    let mut b = GraphBuilder::new();
    let wiring = append_model(&mut b, params.schema(), "x")?;
    b.output("logits", wiring.logits)?;
    b.output("scores", wiring.scores)?;
    let graph = b.finish();
    let mut bindings = params.bindings();
    bindings.set("x", x);
    let out = autodiff::forward(&graph, &bindings)?;
    Ok(Prediction {
        logits: out["logits"].data().to_vec(),
        scores: out["scores"].data().to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoint container: `CHIRPCKPT1`, schema JSON, then named layers with
// u64 little-endian dimensions and raw f64 little-endian values. Round-trips
// bitwise; the exact layout is documented in the README.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 10] = b"CHIRPCKPT1";

pub fn save_checkpoint(params: &ParameterSet, path: &Path) -> Result<(), ModelError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let schema_json = serde_json::to_vec(params.schema())
        .map_err(|e| ModelError::Checkpoint(format!("schema serialization: {e}")))?;
    buf.extend_from_slice(&(schema_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&schema_json);
    buf.extend_from_slice(&(params.layers.len() as u64).to_le_bytes());
    for (name, tensor) in &params.layers {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        let bytes = self.take(8)?;
        Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet, ModelError> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut r = Reader { buf: &raw, pos: 0 };
    if r.take(CKPT_MAGIC.len())? != CKPT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let schema_len = r.u64()? as usize;
    let schema: ModelSchema = serde_json::from_slice(r.take(schema_len)?)
        .map_err(|e| ModelError::Checkpoint(format!("schema parse: {e}")))?;
    schema.validate()?;
    let layer_count = r.u64()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("layer name not utf-8".into()))?;
        let ndim = r.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let bytes = r.take(8)?;
            data.push(f64::from_le_bytes(bytes.try_into().unwrap()));
        }
        layers.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != raw.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(ParameterSet { schema, layers })
}
