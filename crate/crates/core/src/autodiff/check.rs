//! Central finite-difference verification of reverse-mode gradients.

use super::{eval, Bindings, Graph, GraphError, Op};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub pass: bool,
    /// Leaf and flat index where the worst disagreement occurred.
    pub worst: Option<(String, usize)>,
}

/// Compares reverse-mode gradients against central finite differences,
/// elementwise over every requested leaf.
///
/// Relative error uses `|ad - fd| / max(1, |ad|, |fd|)`, so exact zero
/// gradients compare with error zero.
pub fn finite_difference_check(
    graph: &Graph,
    bindings: &Bindings,
    output: &str,
    wrt: &[&str],
    step: f64,
    tolerance: f64,
) -> Result<FdReport, GraphError> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(GraphError::DegenerateStep { step });
    }
    let grads = eval::gradient(graph, bindings, output, wrt)?;

    let mut max_rel = 0.0_f64;
    let mut worst = None;
    for leaf in wrt {
        let base = bindings
            .get(leaf)
            .expect("bindings validated by gradient call");
        let ad = grads.get(leaf).expect("gradient present for wrt leaf");
        for i in 0..base.len() {
            let center = base.data()[i];
            if center + step == center || center - step == center {
                return Err(GraphError::DegenerateStep { step });
            }
            let plus = eval_at(graph, bindings, output, leaf, base, i, center + step)?;
            let minus = eval_at(graph, bindings, output, leaf, base, i, center - step)?;
            let fd = (plus - minus) / (2.0 * step);
            let advalue = ad.data()[i];
            let rel = (advalue - fd).abs() / 1.0_f64.max(advalue.abs()).max(fd.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = Some((leaf.to_string(), i));
            }
        }
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        pass: max_rel < tolerance,
        worst,
    })
}

fn eval_at(
    graph: &Graph,
    bindings: &Bindings,
    output: &str,
    leaf: &str,
    base: &Tensor,
    index: usize,
    value: f64,
) -> Result<f64, GraphError> {
    let mut data = base.data().to_vec();
    data[index] = value;
    let perturbed = Tensor::from_parts(base.shape().to_vec(), data);
    let mut b = bindings.clone();
    b.set(leaf, &perturbed);
    let out = eval::forward(graph, &b)?;
    Ok(out[output].scalar_value())
}

/// True when the forward pass at these bindings stays away from every
/// non-smooth region by `margin`: relu/clamp kinks, max/min ties, sign
/// zero crossings and near-zero cosine norms. Finite-difference checks are
/// only meaningful at such points.
pub fn is_smooth_point(
    graph: &Graph,
    bindings: &Bindings,
    margin: f64,
) -> Result<bool, GraphError> {
    let values = eval::forward_values(graph, bindings)?;
    for (idx, op) in graph.ops.iter().enumerate() {
        let _ = idx;
        match op {
            Op::Relu(a) | Op::Sign(a) => {
                if values.node(*a).data().iter().any(|v| v.abs() < margin) {
                    return Ok(false);
                }
            }
            Op::Clamp { input, lo, hi } => {
                let near = values.node(*input).data().iter().any(|v| {
                    (v - lo).abs() < margin || (v - hi).abs() < margin
                });
                if near {
                    return Ok(false);
                }
            }
            Op::SpatialMax(a) => {
                if top_gap(values.node(*a).data(), true) < margin {
                    return Ok(false);
                }
            }
            Op::SpatialMin(a) => {
                if top_gap(values.node(*a).data(), false) < margin {
                    return Ok(false);
                }
            }
            Op::CosineMap { map, query, .. } => {
                let m = values.node(*map);
                let q = values.node(*query);
                let d = m.shape()[2];
                let positions = m.len() / d;
                for pos in 0..positions {
                    let norm2: f64 = m.data()[pos * d..(pos + 1) * d]
                        .iter()
                        .map(|v| v * v)
                        .sum();
                    if norm2.sqrt() < margin {
                        return Ok(false);
                    }
                }
                if q.shape().len() == 1 {
                    let norm2: f64 = q.data().iter().map(|v| v * v).sum();
                    if norm2.sqrt() < margin {
                        return Ok(false);
                    }
                } else {
                    for pos in 0..positions {
                        let norm2: f64 = q.data()[pos * d..(pos + 1) * d]
                            .iter()
                            .map(|v| v * v)
                            .sum();
                        if norm2.sqrt() < margin {
                            return Ok(false);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(true)
}

/// Gap between the best and second-best element (max or min sense).
fn top_gap(data: &[f64], max_sense: bool) -> f64 {
    if data.len() < 2 {
        return f64::INFINITY;
    }
    let mut best = if max_sense {
        f64::NEG_INFINITY
    } else {
        f64::INFINITY
    };
    let mut second = best;
    for &v in data {
        if max_sense {
            if v > best {
                second = best;
                best = v;
            } else if v > second {
                second = v;
            }
        } else if v < best {
            second = best;
            best = v;
        } else if v < second {
            second = v;
        }
    }
    (best - second).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphBuilder;

    #[test]
    fn quadratic_matches_analytic() {
        // f(x) = x*x at x = 3: analytic gradient 6.
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![1]).unwrap();
        let sq = b.mul(x, x).unwrap();
        let y = b.sum(sq).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let xv = Tensor::new(vec![1], vec![3.0]).unwrap();
        let bindings = Bindings::new().bind("x", &xv);
        let report =
            finite_difference_check(&g, &bindings, "y", &["x"], 1e-5, 1e-6).unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn constant_graph_has_zero_error() {
        // sign is locally constant away from 0: gradient exactly 0 both ways.
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![1]).unwrap();
        let s = b.sign(x).unwrap();
        let y = b.sum(s).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let xv = Tensor::new(vec![1], vec![1.5]).unwrap();
        let bindings = Bindings::new().bind("x", &xv);
        let report =
            finite_difference_check(&g, &bindings, "y", &["x"], 1e-5, 1e-6).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn degenerate_step_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![1]).unwrap();
        let y = b.sum(x).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let xv = Tensor::new(vec![1], vec![1.0]).unwrap();
        let bindings = Bindings::new().bind("x", &xv);
        let err = finite_difference_check(&g, &bindings, "y", &["x"], 0.0, 1e-6).unwrap_err();
        assert!(matches!(err, GraphError::DegenerateStep { .. }));
        let err =
            finite_difference_check(&g, &bindings, "y", &["x"], 1e-300, 1e-6).unwrap_err();
        assert!(matches!(err, GraphError::DegenerateStep { .. }));
    }

    #[test]
    fn smoothness_flags_relu_kink() {
        let mut b = GraphBuilder::new();
        let x = b.leaf("x", vec![2]).unwrap();
        let r = b.relu(x).unwrap();
        let y = b.sum(r).unwrap();
        b.output("y", y).unwrap();
        let g = b.finish();
        let near = Tensor::new(vec![2], vec![1.0, 1e-5]).unwrap();
        let far = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        assert!(!is_smooth_point(&g, &Bindings::new().bind("x", &near), 1e-3).unwrap());
        assert!(is_smooth_point(&g, &Bindings::new().bind("x", &far), 1e-3).unwrap());
    }
}
