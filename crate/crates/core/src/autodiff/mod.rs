//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Computation is expressed as an immutable [`Graph`] built once via
//! [`GraphBuilder`], then evaluated as a pure function of named leaf
//! bindings. [`forward`] returns the named outputs, [`gradient`] runs the
//! reverse sweep for a designated scalar output with respect to any subset of
//! leaves. Shapes are inferred and checked at build time, so binding errors
//! surface before any arithmetic runs.
//!
//! The primitive set is the minimal closure over the models, losses and
//! attack objectives in this crate: affine, 2-D convolution, relu, sigmoid,
//! global average pooling, spatial max/min pooling, per-position cosine
//! similarity, elementwise arithmetic, log, exp, clamp, sum/mean reductions,
//! sign (forward-only) and a stop-gradient.

mod check;
mod eval;

pub use check::{finite_difference_check, is_smooth_point, FdReport};
pub use eval::{evaluate, forward, forward_values, gradient, Values};

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("leaf `{leaf}` has no binding")]
    MissingBinding { leaf: String },
    #[error("binding for leaf `{leaf}` has shape {got:?}, expected {expected:?}")]
    BindingShape {
        leaf: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("leaf `{leaf}` already declared with shape {existing:?}, requested {requested:?}")]
    LeafShapeConflict {
        leaf: String,
        existing: Vec<usize>,
        requested: Vec<usize>,
    },
    #[error("unknown leaf `{leaf}`")]
    UnknownLeaf { leaf: String },
    #[error("unknown output `{output}`")]
    UnknownOutput { output: String },
    #[error("output name `{output}` already used")]
    DuplicateOutput { output: String },
    #[error("node {node} produced a non-finite value")]
    NonFiniteNode { node: String },
    #[error("differentiation target `{output}` has shape {shape:?}, expected a scalar")]
    NonScalarTarget { output: String, shape: Vec<usize> },
    #[error("node {node}: cosine similarity over a zero-norm operand")]
    ZeroNorm { node: String },
    #[error("cannot build {op}: {message}")]
    Build { op: &'static str, message: String },
    #[error("finite-difference step {step} is degenerate")]
    DegenerateStep { step: f64 },
}

/// Handle to a node inside one [`Graph`]. Only meaningful for the builder
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Policy for cosine similarity when an operand has zero norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroNormPolicy {
    /// Surface a [`GraphError::ZeroNorm`] error. The faithful kernel.
    Error,
    /// Report similarity 0 at that position with zero gradient flow.
    ZeroSimilarity,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf {
        name: String,
    },
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sign(NodeId),
    Detach(NodeId),
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale {
        input: NodeId,
        factor: f64,
    },
    AddScalar {
        input: NodeId,
        offset: f64,
    },
    GlobalAvgPool(NodeId),
    SpatialMax(NodeId),
    SpatialMin(NodeId),
    CosineMap {
        map: NodeId,
        query: NodeId,
        zero_norm: ZeroNormPolicy,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Affine { .. } => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sign(_) => "sign",
            Op::Detach(_) => "detach",
            Op::Clamp { .. } => "clamp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::SpatialMax(_) => "spatial_max",
            Op::SpatialMin(_) => "spatial_min",
            Op::CosineMap { .. } => "cosine_map",
            Op::Concat { .. } => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

/// Immutable computation graph: ops in topological order, named leaves and
/// named outputs. Safe to share across threads and evaluate concurrently.
#[derive(Debug, Clone)]
pub struct Graph {
    pub(crate) ops: Vec<Op>,
    pub(crate) shapes: Vec<Vec<usize>>,
    pub(crate) labels: Vec<String>,
    pub(crate) leaves: BTreeMap<String, NodeId>,
    pub(crate) outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(|s| s.as_str())
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(|s| s.as_str())
    }

    pub fn leaf_shape(&self, name: &str) -> Option<&[usize]> {
        self.leaves.get(name).map(|id| self.shapes[id.0].as_slice())
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }
}

/// Incrementally builds a [`Graph`], inferring and validating shapes.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    labels: Vec<String>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.ops.len());
        self.labels.push(format!("{}#{}", op.kind(), id.0));
        self.ops.push(op);
        self.shapes.push(shape);
        id
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.0]
    }

    fn build_err(op: &'static str, message: impl Into<String>) -> GraphError {
        GraphError::Build {
            op,
            message: message.into(),
        }
    }

    /// Declares (or re-uses) a named leaf. Re-declaring with the same shape
    /// returns the existing node, so separate sub-graph builders can share
    /// parameters by name.
    pub fn leaf(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        if let Some(&existing) = self.leaves.get(name) {
            if self.shapes[existing.0] == shape {
                return Ok(existing);
            }
            return Err(GraphError::LeafShapeConflict {
                leaf: name.to_string(),
                existing: self.shapes[existing.0].clone(),
                requested: shape,
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Self::build_err("leaf", format!("empty dimension in {shape:?}")));
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
            },
            shape,
        );
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Fully connected layer: input `[n]`, weight `[n, m]`, bias `[m]` -> `[m]`.
    pub fn affine(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, GraphError> {
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        if in_shape.len() != 1 || w_shape.len() != 2 || w_shape[0] != in_shape[0] {
            return Err(Self::build_err(
                "affine",
                format!("input {in_shape:?} incompatible with weight {w_shape:?}"),
            ));
        }
        let m = w_shape[1];
        if let Some(b) = bias {
            let b_shape = self.shape(b);
            if b_shape != [m] {
                return Err(Self::build_err(
                    "affine",
                    format!("bias shape {b_shape:?}, expected [{m}]"),
                ));
            }
        }
        Ok(self.push(Op::Affine { input, weight, bias }, vec![m]))
    }

    /// 2-D convolution with zero padding. Input `[h, w, c_in]`, weight
    /// `[kh, kw, c_in, c_out]`, bias `[c_out]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<NodeId, GraphError> {
        let x = self.shape(input).to_vec();
        let w = self.shape(weight).to_vec();
        let b = self.shape(bias).to_vec();
        if x.len() != 3 || w.len() != 4 {
            return Err(Self::build_err(
                "conv2d",
                format!("input {x:?} / weight {w:?} must be rank 3 / rank 4"),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Self::build_err("conv2d", "stride must be positive"));
        }
        let (h, wd, c_in) = (x[0], x[1], x[2]);
        let (kh, kw, wc_in, c_out) = (w[0], w[1], w[2], w[3]);
        if wc_in != c_in {
            return Err(Self::build_err(
                "conv2d",
                format!("weight expects {wc_in} input channels, input has {c_in}"),
            ));
        }
        if b != [c_out] {
            return Err(Self::build_err(
                "conv2d",
                format!("bias shape {b:?}, expected [{c_out}]"),
            ));
        }
        let padded_h = h + 2 * padding.0;
        let padded_w = wd + 2 * padding.1;
        if kh > padded_h || kw > padded_w {
            return Err(Self::build_err("conv2d", "kernel larger than padded input"));
        }
        let out_h = (padded_h - kh) / stride.0 + 1;
        let out_w = (padded_w - kw) / stride.1 + 1;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            vec![out_h, out_w, c_out],
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::Relu(input), shape))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::Sigmoid(input), shape))
    }

    pub fn log(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::Log(input), shape))
    }

    pub fn exp(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::Exp(input), shape))
    }

    /// Elementwise sign with sign(0) = 0. Forward-only: contributes zero
    /// gradient, matching its use on already-computed gradients.
    pub fn sign(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::Sign(input), shape))
    }

    /// Identity forward, zero backward. Turns any node into a constant
    /// target for loss terms.
    pub fn detach(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::Detach(input), shape))
    }

    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> Result<NodeId, GraphError> {
        if !(lo < hi) {
            return Err(Self::build_err("clamp", format!("invalid range [{lo}, {hi}]")));
        }
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::Clamp { input, lo, hi }, shape))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::build_err(
                op_name,
                format!(
                    "operand shapes differ: {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(make(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("add", a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("sub", a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("mul", a, b, Op::Mul)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        if !factor.is_finite() {
            return Err(Self::build_err("scale", "non-finite factor"));
        }
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::Scale { input, factor }, shape))
    }

    pub fn add_scalar(&mut self, input: NodeId, offset: f64) -> Result<NodeId, GraphError> {
        if !offset.is_finite() {
            return Err(Self::build_err("add_scalar", "non-finite offset"));
        }
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::AddScalar { input, offset }, shape))
    }

    /// `[h, w, c]` -> `[c]`, averaging over the spatial extent.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Self::build_err(
                "global_avg_pool",
                format!("expected rank-3 input, got {shape:?}"),
            ));
        }
        Ok(self.push(Op::GlobalAvgPool(input), vec![shape[2]]))
    }

    /// Max over every element of a rank-2 map -> scalar `[1]`.
    pub fn spatial_max(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(Self::build_err(
                "spatial_max",
                format!("expected rank-2 input, got {shape:?}"),
            ));
        }
        Ok(self.push(Op::SpatialMax(input), vec![1]))
    }

    /// Min over every element of a rank-2 map -> scalar `[1]`.
    pub fn spatial_min(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(Self::build_err(
                "spatial_min",
                format!("expected rank-2 input, got {shape:?}"),
            ));
        }
        Ok(self.push(Op::SpatialMin(input), vec![1]))
    }

    /// Per-position cosine similarity. `map` is `[h, w, d]`; `query` is
    /// either a single `[d]` vector compared against every position or a
    /// second `[h, w, d]` map compared position-wise. Output `[h, w]`.
    pub fn cosine_map(
        &mut self,
        map: NodeId,
        query: NodeId,
        zero_norm: ZeroNormPolicy,
    ) -> Result<NodeId, GraphError> {
        let m = self.shape(map).to_vec();
        let q = self.shape(query).to_vec();
        if m.len() != 3 {
            return Err(Self::build_err(
                "cosine_map",
                format!("map must be rank 3, got {m:?}"),
            ));
        }
        let ok = q == [m[2]] || q == m;
        if !ok {
            return Err(Self::build_err(
                "cosine_map",
                format!("query {q:?} does not match map {m:?}"),
            ));
        }
        Ok(self.push(
            Op::CosineMap {
                map,
                query,
                zero_norm,
            },
            vec![m[0], m[1]],
        ))
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(Self::build_err("concat", "no parts"));
        }
        let mut total = 0;
        for &p in &parts {
            let s = self.shape(p);
            if s.len() != 1 {
                return Err(Self::build_err(
                    "concat",
                    format!("parts must be rank 1, got {s:?}"),
                ));
            }
            total += s[0];
        }
        Ok(self.push(Op::Concat { parts }, vec![total]))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let _ = self.shape(input);
        Ok(self.push(Op::Sum(input), vec![1]))
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let _ = self.shape(input);
        Ok(self.push(Op::Mean(input), vec![1]))
    }

    /// Registers a named output node.
    pub fn output(&mut self, name: &str, node: NodeId) -> Result<(), GraphError> {
        if self.outputs.contains_key(name) {
            return Err(GraphError::DuplicateOutput {
                output: name.to_string(),
            });
        }
        self.outputs.insert(name.to_string(), node);
        Ok(())
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        self.shape(id)
    }

    pub fn finish(self) -> Graph {
        Graph {
            ops: self.ops,
            shapes: self.shapes,
            labels: self.labels,
            leaves: self.leaves,
            outputs: self.outputs,
        }
    }
}

/// Named tensor bindings for graph leaves. Borrows the tensors; building one
/// per evaluation is cheap.
#[derive(Debug, Default, Clone)]
pub struct Bindings<'a> {
    entries: BTreeMap<String, &'a Tensor>,
}

use crate::tensor::Tensor;

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: impl Into<String>, tensor: &'a Tensor) -> Self {
        self.entries.insert(name.into(), tensor);
        self
    }

    pub fn set(&mut self, name: impl Into<String>, tensor: &'a Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.entries.get(name).copied()
    }
}

/// Reverse-mode gradients keyed by leaf name, shape-equal to their leaves.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub(crate) fn insert(&mut self, name: String, tensor: Tensor) {
        self.entries.insert(name, tensor);
    }

    pub fn get(&self, leaf: &str) -> Option<&Tensor> {
        self.entries.get(leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
