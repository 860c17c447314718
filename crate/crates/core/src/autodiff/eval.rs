//! Forward evaluation and reverse-mode gradient sweep.

use std::collections::BTreeMap;

use super::{Bindings, Graph, GradientMap, GraphError, NodeId, Op, ZeroNormPolicy};
use crate::tensor::Tensor;

/// Per-node tensors from one forward pass.
#[derive(Debug)]
pub struct Values {
    tensors: Vec<Tensor>,
}

impl Values {
    pub fn node(&self, id: NodeId) -> &Tensor {
        &self.tensors[id.0]
    }
}

fn sign_of(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn validate_bindings(graph: &Graph, bindings: &Bindings) -> Result<(), GraphError> {
    for (name, &id) in &graph.leaves {
        match bindings.get(name) {
            None => {
                return Err(GraphError::MissingBinding { leaf: name.clone() });
            }
            Some(t) => {
                if t.shape() != graph.shapes[id.0].as_slice() {
                    return Err(GraphError::BindingShape {
                        leaf: name.clone(),
                        expected: graph.shapes[id.0].clone(),
                        got: t.shape().to_vec(),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Evaluates every node. Deterministic for identical inputs; a non-finite
/// intermediate aborts with the offending node's label.
pub fn forward_values(graph: &Graph, bindings: &Bindings) -> Result<Values, GraphError> {
    validate_bindings(graph, bindings)?;
    let mut tensors: Vec<Tensor> = Vec::with_capacity(graph.ops.len());
    for (idx, op) in graph.ops.iter().enumerate() {
        let out = eval_node(graph, op, &tensors, bindings, idx)?;
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFiniteNode {
                node: graph.labels[idx].clone(),
            });
        }
        tensors.push(out);
    }
    Ok(Values { tensors })
}

/// Evaluates the graph and returns its named outputs.
pub fn forward(graph: &Graph, bindings: &Bindings) -> Result<BTreeMap<String, Tensor>, GraphError> {
    let values = forward_values(graph, bindings)?;
    Ok(graph
        .outputs
        .iter()
        .map(|(name, &id)| (name.clone(), values.tensors[id.0].clone()))
        .collect())
}

/// Reverse-mode gradients of the named scalar output with respect to the
/// requested leaves. Leaves not requested are skipped.
pub fn gradient(
    graph: &Graph,
    bindings: &Bindings,
    output: &str,
    wrt: &[&str],
) -> Result<GradientMap, GraphError> {
    let (_, grads) = evaluate(graph, bindings, output, wrt)?;
    Ok(grads)
}

/// Forward pass plus reverse sweep in one call: returns every named output
/// and the gradients of `output` with respect to `wrt`.
pub fn evaluate(
    graph: &Graph,
    bindings: &Bindings,
    output: &str,
    wrt: &[&str],
) -> Result<(BTreeMap<String, Tensor>, GradientMap), GraphError> {
    let &target = graph
        .outputs
        .get(output)
        .ok_or_else(|| GraphError::UnknownOutput {
            output: output.to_string(),
        })?;
    if graph.shapes[target.0] != [1] {
        return Err(GraphError::NonScalarTarget {
            output: output.to_string(),
            shape: graph.shapes[target.0].clone(),
        });
    }
    for leaf in wrt {
        if !graph.leaves.contains_key(*leaf) {
            return Err(GraphError::UnknownLeaf {
                leaf: leaf.to_string(),
            });
        }
    }

    let values = forward_values(graph, bindings)?;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; graph.ops.len()];
    grads[target.0] = Some(vec![1.0]);

    for idx in (0..graph.ops.len()).rev() {
        let upstream = match grads[idx].take() {
            Some(g) => g,
            None => continue,
        };
        backward_node(graph, idx, &values, &upstream, &mut grads);
        // Leaves keep their accumulated gradient for extraction below.
        if matches!(graph.ops[idx], Op::Leaf { .. }) {
            grads[idx] = Some(upstream);
        }
    }

    let mut map = GradientMap::default();
    for leaf in wrt {
        let id = graph.leaves[*leaf];
        let shape = graph.shapes[id.0].clone();
        let data = grads[id.0]
            .take()
            .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        map.insert(leaf.to_string(), Tensor::from_parts(shape, data));
    }
    let outputs = graph
        .outputs
        .iter()
        .map(|(name, &id)| (name.clone(), values.tensors[id.0].clone()))
        .collect();
    Ok((outputs, map))
}

fn eval_node(
    graph: &Graph,
    op: &Op,
    done: &[Tensor],
    bindings: &Bindings,
    idx: usize,
) -> Result<Tensor, GraphError> {
    let out = match op {
        Op::Leaf { name } => bindings
            .get(name)
            .expect("bindings validated before evaluation")
            .clone(),
        Op::Affine { input, weight, bias } => {
            let x = &done[input.0];
            let w = &done[weight.0];
            let n = x.len();
            let m = w.shape()[1];
            let mut out = match bias {
                Some(b) => done[b.0].data().to_vec(),
                None => vec![0.0; m],
            };
            let wd = w.data();
            let xd = x.data();
            for i in 0..n {
                let xv = xd[i];
                let row = &wd[i * m..(i + 1) * m];
                for (o, wv) in out.iter_mut().zip(row) {
                    *o += xv * wv;
                }
            }
            Tensor::from_parts(vec![m], out)
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => conv2d_forward(
            &done[input.0],
            &done[weight.0],
            &done[bias.0],
            *stride,
            *padding,
        ),
        Op::Relu(a) => done[a.0].map(|v| v.max(0.0)),
        Op::Sigmoid(a) => done[a.0].map(|v| 1.0 / (1.0 + (-v).exp())),
        Op::Log(a) => done[a.0].map(f64::ln),
        Op::Exp(a) => done[a.0].map(f64::exp),
        Op::Sign(a) => done[a.0].map(sign_of),
        Op::Detach(a) => done[a.0].clone(),
        Op::Clamp { input, lo, hi } => done[input.0].map(|v| v.clamp(*lo, *hi)),
        Op::Add(a, b) => zip(&done[a.0], &done[b.0], |x, y| x + y),
        Op::Sub(a, b) => zip(&done[a.0], &done[b.0], |x, y| x - y),
        Op::Mul(a, b) => zip(&done[a.0], &done[b.0], |x, y| x * y),
        Op::Scale { input, factor } => done[input.0].map(|v| v * factor),
        Op::AddScalar { input, offset } => done[input.0].map(|v| v + offset),
        Op::GlobalAvgPool(a) => {
            let x = &done[a.0];
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = vec![0.0; c];
            for pos in 0..h * w {
                let base = pos * c;
                for ch in 0..c {
                    out[ch] += x.data()[base + ch];
                }
            }
            let inv = 1.0 / (h * w) as f64;
            for o in &mut out {
                *o *= inv;
            }
            Tensor::from_parts(vec![c], out)
        }
        Op::SpatialMax(a) => {
            let best = done[a.0]
                .data()
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            Tensor::from_parts(vec![1], vec![best])
        }
        Op::SpatialMin(a) => {
            let best = done[a.0]
                .data()
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            Tensor::from_parts(vec![1], vec![best])
        }
        Op::CosineMap {
            map,
            query,
            zero_norm,
        } => cosine_forward(graph, idx, &done[map.0], &done[query.0], *zero_norm)?,
        Op::Concat { parts } => {
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(done[p.0].data());
            }
            let len = data.len();
            Tensor::from_parts(vec![len], data)
        }
        Op::Sum(a) => Tensor::from_parts(vec![1], vec![done[a.0].data().iter().sum()]),
        Op::Mean(a) => {
            let x = &done[a.0];
            Tensor::from_parts(vec![1], vec![x.data().iter().sum::<f64>() / x.len() as f64])
        }
    };
    Ok(out)
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Tensor {
    let (h, wd, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let out_h = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let out_w = (wd + 2 * padding.1 - kw) / stride.1 + 1;
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    let mut out = vec![0.0; out_h * out_w * c_out];
    for oh in 0..out_h {
        for ow in 0..out_w {
            let out_base = (oh * out_w + ow) * c_out;
            out[out_base..out_base + c_out].copy_from_slice(bd);
            for k_h in 0..kh {
                let ih = (oh * stride.0 + k_h) as isize - padding.0 as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for k_w in 0..kw {
                    let iw = (ow * stride.1 + k_w) as isize - padding.1 as isize;
                    if iw < 0 || iw >= wd as isize {
                        continue;
                    }
                    let x_base = (ih as usize * wd + iw as usize) * c_in;
                    let w_base = (k_h * kw + k_w) * c_in * c_out;
                    for ic in 0..c_in {
                        let xv = xd[x_base + ic];
                        if xv == 0.0 {
                            continue;
                        }
                        let w_row = &wdat[w_base + ic * c_out..w_base + (ic + 1) * c_out];
                        let out_row = &mut out[out_base..out_base + c_out];
                        for (o, wv) in out_row.iter_mut().zip(w_row) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![out_h, out_w, c_out], out)
}

fn cosine_forward(
    graph: &Graph,
    idx: usize,
    map: &Tensor,
    query: &Tensor,
    policy: ZeroNormPolicy,
) -> Result<Tensor, GraphError> {
    let (h, w, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let per_position = query.shape().len() == 3;
    let md = map.data();
    let qd = query.data();
    let mut out = vec![0.0; h * w];
    for pos in 0..h * w {
        let a = &md[pos * d..(pos + 1) * d];
        let q = if per_position {
            &qd[pos * d..(pos + 1) * d]
        } else {
            qd
        };
        let mut dot = 0.0;
        let mut na2 = 0.0;
        let mut nq2 = 0.0;
        for i in 0..d {
            dot += a[i] * q[i];
            na2 += a[i] * a[i];
            nq2 += q[i] * q[i];
        }
        if na2 == 0.0 || nq2 == 0.0 {
            match policy {
                ZeroNormPolicy::Error => {
                    return Err(GraphError::ZeroNorm {
                        node: graph.labels[idx].clone(),
                    });
                }
                ZeroNormPolicy::ZeroSimilarity => {
                    out[pos] = 0.0;
                    continue;
                }
            }
        }
        out[pos] = dot / (na2.sqrt() * nq2.sqrt());
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn add_into(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        None => *slot = Some(contribution),
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
    }
}

fn backward_node(
    graph: &Graph,
    idx: usize,
    values: &Values,
    upstream: &[f64],
    grads: &mut Vec<Option<Vec<f64>>>,
) {
    let op = graph.ops[idx].clone();
    match op {
        // Sign is forward-only; Detach blocks gradient flow by contract.
        Op::Leaf { .. } | Op::Sign(_) | Op::Detach(_) => {}
        Op::Affine { input, weight, bias } => {
            let x = values.node(input);
            let w = values.node(weight);
            let n = x.len();
            let m = w.shape()[1];
            {
                let gx = accumulate(&mut grads[input.0], n);
                for i in 0..n {
                    let row = &w.data()[i * m..(i + 1) * m];
                    let mut acc = 0.0;
                    for (g, wv) in upstream.iter().zip(row) {
                        acc += g * wv;
                    }
                    gx[i] += acc;
                }
            }
            {
                let gw = accumulate(&mut grads[weight.0], n * m);
                for i in 0..n {
                    let xv = x.data()[i];
                    let row = &mut gw[i * m..(i + 1) * m];
                    for (g, res) in upstream.iter().zip(row.iter_mut()) {
                        *res += xv * g;
                    }
                }
            }
            if let Some(b) = bias {
                let gb = accumulate(&mut grads[b.0], m);
                for (res, g) in gb.iter_mut().zip(upstream) {
                    *res += g;
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let (gx, gw, gb) = conv2d_backward(
                values.node(input),
                values.node(weight),
                upstream,
                stride,
                padding,
                graph.shapes[idx].as_slice(),
            );
            add_into(&mut grads[input.0], gx);
            add_into(&mut grads[weight.0], gw);
            add_into(&mut grads[bias.0], gb);
        }
        Op::Relu(a) => {
            let x = values.node(a);
            let g = accumulate(&mut grads[a.0], x.len());
            for i in 0..x.len() {
                if x.data()[i] > 0.0 {
                    g[i] += upstream[i];
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = values.node(NodeId(idx));
            let g = accumulate(&mut grads[a.0], y.len());
            for i in 0..y.len() {
                let s = y.data()[i];
                g[i] += upstream[i] * s * (1.0 - s);
            }
        }
        Op::Log(a) => {
            let x = values.node(a);
            let g = accumulate(&mut grads[a.0], x.len());
            for i in 0..x.len() {
                g[i] += upstream[i] / x.data()[i];
            }
        }
        Op::Exp(a) => {
            let y = values.node(NodeId(idx));
            let g = accumulate(&mut grads[a.0], y.len());
            for i in 0..y.len() {
                g[i] += upstream[i] * y.data()[i];
            }
        }
        Op::Clamp { input, lo, hi } => {
            let x = values.node(input);
            let g = accumulate(&mut grads[input.0], x.len());
            for i in 0..x.len() {
                let v = x.data()[i];
                if v > lo && v < hi {
                    g[i] += upstream[i];
                }
            }
        }
        Op::Add(a, b) => {
            let len = upstream.len();
            {
                let ga = accumulate(&mut grads[a.0], len);
                for i in 0..len {
                    ga[i] += upstream[i];
                }
            }
            let gb = accumulate(&mut grads[b.0], len);
            for i in 0..len {
                gb[i] += upstream[i];
            }
        }
        Op::Sub(a, b) => {
            let len = upstream.len();
            {
                let ga = accumulate(&mut grads[a.0], len);
                for i in 0..len {
                    ga[i] += upstream[i];
                }
            }
            let gb = accumulate(&mut grads[b.0], len);
            for i in 0..len {
                gb[i] -= upstream[i];
            }
        }
        Op::Mul(a, b) => {
            let av = values.node(a).data().to_vec();
            let bv = values.node(b).data().to_vec();
            {
                let ga = accumulate(&mut grads[a.0], av.len());
                for i in 0..av.len() {
                    ga[i] += upstream[i] * bv[i];
                }
            }
            let gb = accumulate(&mut grads[b.0], bv.len());
            for i in 0..bv.len() {
                gb[i] += upstream[i] * av[i];
            }
        }
        Op::Scale { input, factor } => {
            let g = accumulate(&mut grads[input.0], upstream.len());
            for i in 0..upstream.len() {
                g[i] += upstream[i] * factor;
            }
        }
        Op::AddScalar { input, .. } => {
            let g = accumulate(&mut grads[input.0], upstream.len());
            for i in 0..upstream.len() {
                g[i] += upstream[i];
            }
        }
        Op::GlobalAvgPool(a) => {
            let x = values.node(a);
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let inv = 1.0 / (h * w) as f64;
            let g = accumulate(&mut grads[a.0], x.len());
            for pos in 0..h * w {
                for ch in 0..c {
                    g[pos * c + ch] += upstream[ch] * inv;
                }
            }
        }
        Op::SpatialMax(a) => {
            let x = values.node(a);
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (i, &v) in x.data().iter().enumerate() {
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            let g = accumulate(&mut grads[a.0], x.len());
            g[arg] += upstream[0];
        }
        Op::SpatialMin(a) => {
            let x = values.node(a);
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for (i, &v) in x.data().iter().enumerate() {
                if v < best {
                    best = v;
                    arg = i;
                }
            }
            let g = accumulate(&mut grads[a.0], x.len());
            g[arg] += upstream[0];
        }
        Op::CosineMap { map, query, .. } => {
            let (g_map, g_query) = cosine_backward(
                values.node(map),
                values.node(query),
                values.node(NodeId(idx)),
                upstream,
            );
            add_into(&mut grads[map.0], g_map);
            add_into(&mut grads[query.0], g_query);
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = values.node(p).len();
                let g = accumulate(&mut grads[p.0], len);
                for i in 0..len {
                    g[i] += upstream[offset + i];
                }
                offset += len;
            }
        }
        Op::Sum(a) => {
            let len = values.node(a).len();
            let g = accumulate(&mut grads[a.0], len);
            for v in g.iter_mut() {
                *v += upstream[0];
            }
        }
        Op::Mean(a) => {
            let len = values.node(a).len();
            let inv = 1.0 / len as f64;
            let g = accumulate(&mut grads[a.0], len);
            for v in g.iter_mut() {
                *v += upstream[0] * inv;
            }
        }
    }
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    upstream: &[f64],
    stride: (usize, usize),
    padding: (usize, usize),
    out_shape: &[usize],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, wd, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (out_h, out_w) = (out_shape[0], out_shape[1]);
    let xd = x.data();
    let wdat = w.data();

    let mut gb = vec![0.0; c_out];
    for pos in 0..out_h * out_w {
        let base = pos * c_out;
        for oc in 0..c_out {
            gb[oc] += upstream[base + oc];
        }
    }

    let mut gx = vec![0.0; h * wd * c_in];
    let mut gw = vec![0.0; kh * kw * c_in * c_out];
    for oh in 0..out_h {
        for ow in 0..out_w {
            let up = &upstream[(oh * out_w + ow) * c_out..(oh * out_w + ow + 1) * c_out];
            for k_h in 0..kh {
                let ih = (oh * stride.0 + k_h) as isize - padding.0 as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for k_w in 0..kw {
                    let iw = (ow * stride.1 + k_w) as isize - padding.1 as isize;
                    if iw < 0 || iw >= wd as isize {
                        continue;
                    }
                    let x_base = (ih as usize * wd + iw as usize) * c_in;
                    let w_base = (k_h * kw + k_w) * c_in * c_out;
                    for ic in 0..c_in {
                        let xv = xd[x_base + ic];
                        let w_row = &wdat[w_base + ic * c_out..w_base + (ic + 1) * c_out];
                        let gw_row = &mut gw[w_base + ic * c_out..w_base + (ic + 1) * c_out];
                        let mut acc = 0.0;
                        for oc in 0..c_out {
                            let g = up[oc];
                            acc += g * w_row[oc];
                            gw_row[oc] += g * xv;
                        }
                        gx[x_base + ic] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn cosine_backward(
    map: &Tensor,
    query: &Tensor,
    cos_out: &Tensor,
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (h, w, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let per_position = query.shape().len() == 3;
    let md = map.data();
    let qd = query.data();
    let mut g_map = vec![0.0; map.len()];
    let mut g_query = vec![0.0; query.len()];
    for pos in 0..h * w {
        let g = upstream[pos];
        if g == 0.0 {
            continue;
        }
        let a = &md[pos * d..(pos + 1) * d];
        let (q, q_off) = if per_position {
            (&qd[pos * d..(pos + 1) * d], pos * d)
        } else {
            (qd, 0)
        };
        let mut na2 = 0.0;
        let mut nq2 = 0.0;
        for i in 0..d {
            na2 += a[i] * a[i];
            nq2 += q[i] * q[i];
        }
        if na2 == 0.0 || nq2 == 0.0 {
            // Zero-similarity policy: no gradient contribution at this position.
            continue;
        }
        let na = na2.sqrt();
        let nq = nq2.sqrt();
        let c = cos_out.data()[pos];
        let inv = 1.0 / (na * nq);
        for i in 0..d {
            g_map[pos * d + i] += g * (q[i] * inv - c * a[i] / na2);
            g_query[q_off + i] += g * (a[i] * inv - c * q[i] / nq2);
        }
    }
    (g_map, g_query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphBuilder;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![1]).unwrap();
        let s = b.sigmoid(x).unwrap();
        b.output("y", s).unwrap();
        let g = b.finish();
        let x = t(vec![1], vec![0.0]);
        let out = forward(&g, &Bindings::new().bind("x", &x)).unwrap();
        assert_eq!(out["y"].scalar_value(), 0.5);
    }

    #[test]
    fn relu_forward_matches_definition() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![3]).unwrap();
        let r = b.relu(x).unwrap();
        b.output("y", r).unwrap();
        let g = b.finish();
        let x = t(vec![3], vec![-1.0, 0.0, 2.0]);
        let out = forward(&g, &Bindings::new().bind("x", &x)).unwrap();
        assert_eq!(out["y"].data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn cosine_of_unit_vectors() {
        // cos([1,0], [0.6,0.8]) = 0.6
        let mut b = GraphBuilder::new();
        let m = b.leaf("m", vec![1, 1, 2]).unwrap();
        let q = b.leaf("q", vec![2]).unwrap();
        let c = b
            .cosine_map(m, q, crate::autodiff::ZeroNormPolicy::Error)
            .unwrap();
        b.output("c", c).unwrap();
        let g = b.finish();
        let m = t(vec![1, 1, 2], vec![1.0, 0.0]);
        let q = t(vec![2], vec![0.6, 0.8]);
        let out = forward(&g, &Bindings::new().bind("m", &m).bind("q", &q)).unwrap();
        assert!((out["c"].data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![1]).unwrap();
        let s = b.sigmoid(x).unwrap();
        let y = b.sum(s).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let x = t(vec![1], vec![0.0]);
        let grads = gradient(&g, &Bindings::new().bind("x", &x), "y", &["x"]).unwrap();
        assert!((grads.get("x").unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn relu_subgradient_zero_at_kink_and_below() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![2]).unwrap();
        let r = b.relu(x).unwrap();
        let y = b.sum(r).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let x = t(vec![2], vec![-1.0, 0.0]);
        let grads = gradient(&g, &Bindings::new().bind("x", &x), "y", &["x"]).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn unrequested_leaves_are_skipped() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![1]).unwrap();
        let w = b.leaf("w", vec![1]).unwrap();
        let p = b.mul(x, w).unwrap();
        let y = b.sum(p).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let xv = t(vec![1], vec![3.0]);
        let wv = t(vec![1], vec![2.0]);
        let grads = gradient(
            &g,
            &Bindings::new().bind("x", &xv).bind("w", &wv),
            "y",
            &["x"],
        )
        .unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get("x").unwrap().data(), &[2.0]);
        assert!(grads.get("w").is_none());
    }

    #[test]
    fn non_scalar_target_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![2]).unwrap();
        let r = b.relu(x).unwrap();
        b.output("y", r).unwrap();
        let g = b.finish();
        let x = t(vec![2], vec![1.0, 2.0]);
        let err = gradient(&g, &Bindings::new().bind("x", &x), "y", &["x"]).unwrap_err();
        assert!(matches!(err, GraphError::NonScalarTarget { .. }));
    }

    #[test]
    fn missing_binding_names_leaf() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("input", vec![1]).unwrap();
        b.output("y", x).unwrap();
        let g = b.finish();
        let err = forward(&g, &Bindings::new()).unwrap_err();
        match err {
            GraphError::MissingBinding { leaf } => assert_eq!(leaf, "input"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn binding_shape_mismatch_names_leaf() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("input", vec![2]).unwrap();
        b.output("y", x).unwrap();
        let g = b.finish();
        let bad = t(vec![3], vec![1.0, 2.0, 3.0]);
        let err = forward(&g, &Bindings::new().bind("input", &bad)).unwrap_err();
        assert!(matches!(err, GraphError::BindingShape { .. }));
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![1]).unwrap();
        let d = b.detach(x).unwrap();
        let p = b.mul(x, d).unwrap();
        let y = b.sum(p).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let xv = t(vec![1], vec![3.0]);
        let grads = gradient(&g, &Bindings::new().bind("x", &xv), "y", &["x"]).unwrap();
        // y = x * detach(x); only the live branch contributes: dy/dx = 3.
        assert_eq!(grads.get("x").unwrap().data(), &[3.0]);
    }

    #[test]
    fn sign_is_forward_only() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![3]).unwrap();
        let s = b.sign(x).unwrap();
        let y = b.sum(s).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let xv = t(vec![3], vec![-2.0, 0.0, 5.0]);
        let (out, grads) = evaluate(&g, &Bindings::new().bind("x", &xv), "y", &["x"]).unwrap();
        assert_eq!(out["y"].scalar_value(), 0.0);
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![4]).unwrap();
        let s = b.sigmoid(x).unwrap();
        let e = b.exp(s).unwrap();
        let y = b.mean(e).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let xv = t(vec![4], vec![0.3, -1.7, 2.9, 0.01]);
        let a = forward(&g, &Bindings::new().bind("x", &xv)).unwrap();
        let b2 = forward(&g, &Bindings::new().bind("x", &xv)).unwrap();
        assert_eq!(a["y"].data()[0].to_bits(), b2["y"].data()[0].to_bits());
    }

    #[test]
    fn overflow_names_node() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![1]).unwrap();
        let e = b.exp(x).unwrap();
        let e2 = b.exp(e).unwrap();
        b.output("y", e2).unwrap();
        let g = b.finish();
        let xv = t(vec![1], vec![100.0]);
        let err = forward(&g, &Bindings::new().bind("x", &xv)).unwrap_err();
        match err {
            GraphError::NonFiniteNode { node } => assert!(node.starts_with("exp#")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_norm_policy_error_vs_zero() {
        let mut build = |policy| {
            let mut b = GraphBuilder::new();
            let m = b.leaf("m", vec![1, 1, 2]).unwrap();
            let q = b.leaf("q", vec![2]).unwrap();
            let c = b.cosine_map(m, q, policy).unwrap();
            b.output("c", c).unwrap();
            b.finish()
        };
        let m = t(vec![1, 1, 2], vec![0.0, 0.0]);
        let q = t(vec![2], vec![1.0, 0.0]);
        let strict = build(crate::autodiff::ZeroNormPolicy::Error);
        let err = forward(&strict, &Bindings::new().bind("m", &m).bind("q", &q)).unwrap_err();
        assert!(matches!(err, GraphError::ZeroNorm { .. }));
        let lenient = build(crate::autodiff::ZeroNormPolicy::ZeroSimilarity);
        let out = forward(&lenient, &Bindings::new().bind("m", &m).bind("q", &q)).unwrap();
        assert_eq!(out["c"].data(), &[0.0]);
    }
}
