//! Reverse-mode differentiation expressed in recorded primitives.
//!
//! Each derivative rule emits ordinary graph operations, so the resulting
//! gradient nodes can themselves be differentiated.

use std::collections::HashSet;

use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;
use crate::DiffError;

/// Gradients keyed by the parameter node they belong to, in request order.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    entries: Vec<(Var, Tensor)>,
}

impl GradientMap {
    pub fn get(&self, param: Var) -> Option<&Tensor> {
        self.entries.iter().find(|(v, _)| *v == param).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.entries.iter().map(|(v, t)| (*v, t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// All gradient values concatenated in request order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }
}

impl Graph {
    /// Appends the gradient of the scalar `loss` with respect to each node in
    /// `wrt` and returns the gradient nodes. Nodes `loss` does not depend on
    /// get a zero constant.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut seen = HashSet::with_capacity(wrt.len());
        for w in wrt {
            if !seen.insert(*w) {
                return Err(DiffError::DuplicateParameter(w.0));
            }
        }

        // nodes on some path from a requested node to the loss
        let end = loss.0 + 1;
        let mut relevant = vec![false; end];
        for w in wrt {
            if w.0 < end {
                relevant[w.0] = true;
            }
        }
        for i in 0..end {
            if !relevant[i] && self.nodes[i].op.parents().iter().any(|p| relevant[p.0]) {
                relevant[i] = true;
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if relevant[loss.0] {
            let seed = Tensor::full(self.shape(loss), 1.0);
            adjoint[loss.0] = Some(self.constant(seed));
        }

        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let parents = op.parents();
            if matches!(op, Op::Leaf(_)) || !parents.iter().any(|p| relevant[p.0]) {
                continue;
            }
            let contributions = self.derivative_rule(&op, Var(i), g, i)?;
            for (parent, contribution) in contributions {
                if !relevant[parent.0] {
                    continue;
                }
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    None => contribution,
                    Some(acc) => self.add(acc, contribution)?,
                });
            }
        }

        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(*w));
                    Ok(self.constant(zeros))
                }
            })
            .collect()
    }

    /// Gradient values of `loss` with respect to `wrt`.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<GradientMap, DiffError> {
        let grads = self.grad(loss, wrt)?;
        Ok(GradientMap {
            entries: wrt
                .iter()
                .zip(grads)
                .map(|(w, g)| (*w, self.value(g).clone()))
                .collect(),
        })
    }

    /// Appends `∇_wrt ½‖field‖²` where `field` is a list of tensors that
    /// together form one vector. When `field` is itself a gradient this is
    /// the Jacobian-transpose-vector product `Jᵀ field`.
    pub fn half_sq_norm_grad(&mut self, field: &[Var], wrt: &[Var]) -> Result<Vec<Var>, DiffError> {
        let mut total: Option<Var> = None;
        for f in field {
            let sq = self.square(*f);
            let s = self.sum(sq);
            total = Some(match total {
                None => s,
                Some(acc) => self.add(acc, s)?,
            });
        }
        let Some(total) = total else {
            return wrt
                .iter()
                .map(|w| {
                    let z = Tensor::zeros(self.shape(*w));
                    Ok(self.constant(z))
                })
                .collect();
        };
        let half = self.scale(total, 0.5);
        self.grad(half, wrt)
    }

    fn mask_from(&mut self, x: Var, keep: impl Fn(f64) -> bool) -> Var {
        let mask = self.value(x).map(|v| if keep(v) { 1.0 } else { 0.0 });
        self.constant(mask)
    }

    /// Contributions of output adjoint `g` to the parents of node `out`.
    fn derivative_rule(
        &mut self,
        op: &Op,
        out: Var,
        g: Var,
        op_index: usize,
    ) -> Result<Vec<(Var, Var)>, DiffError> {
        let contributions = match *op {
            Op::Leaf(_) => vec![],
            Op::MatMul { a, b, ta, tb } => {
                let ga = if ta {
                    self.matmul_t(b, g, tb, true)?
                } else {
                    self.matmul_t(g, b, false, !tb)?
                };
                let gb = if tb {
                    self.matmul_t(g, a, true, ta)?
                } else {
                    self.matmul_t(a, g, !ta, false)?
                };
                vec![(a, ga), (b, gb)]
            }
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let nb = self.neg(g);
                vec![(a, g), (b, nb)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, b)?;
                let gb = self.mul(g, a)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Div(a, b) => {
                let ga = self.div(g, b)?;
                let gy = self.mul(g, out)?;
                let q = self.div(gy, b)?;
                let gb = self.neg(q);
                vec![(a, ga), (b, gb)]
            }
            Op::Neg(x) => {
                let gx = self.neg(g);
                vec![(x, gx)]
            }
            Op::Affine { x, scale, .. } => {
                let gx = self.scale(g, scale);
                vec![(x, gx)]
            }
            Op::AddRow { x, row } => {
                let gr = self.sum_rows(g)?;
                vec![(x, g), (row, gr)]
            }
            Op::SumRows(x) => {
                let rows = self.shape(x)[0];
                let gx = self.broadcast_rows(g, rows)?;
                vec![(x, gx)]
            }
            Op::BroadcastRows { x, .. } => {
                let gx = self.sum_rows(g)?;
                vec![(x, gx)]
            }
            Op::Sum(x) => {
                let shape = self.shape(x).to_vec();
                let gx = self.broadcast_scalar(g, &shape)?;
                vec![(x, gx)]
            }
            Op::BroadcastScalar { x, .. } => {
                let s = self.sum(g);
                let shape = self.shape(x).to_vec();
                let gx = self.reshape(s, &shape)?;
                vec![(x, gx)]
            }
            Op::Reshape { x, .. } => {
                let shape = self.shape(x).to_vec();
                let gx = self.reshape(g, &shape)?;
                vec![(x, gx)]
            }
            Op::Concat(ref parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = self.value(*p).cols();
                    let gp = self.slice_cols(g, start, w)?;
                    out.push((*p, gp));
                    start += w;
                }
                out
            }
            Op::SliceCols { x, start, .. } => {
                let total = self.shape(x)[1];
                let gx = self.pad_cols(g, start, total)?;
                vec![(x, gx)]
            }
            Op::PadCols { x, start, .. } => {
                let len = self.shape(x)[1];
                let gx = self.slice_cols(g, start, len)?;
                vec![(x, gx)]
            }
            Op::Tanh(x) => {
                // 1 - y²
                let y2 = self.square(out);
                let d = self.affine(y2, -1.0, 1.0);
                let gx = self.mul(g, d)?;
                vec![(x, gx)]
            }
            Op::Sigmoid(x) => {
                // y (1 - y)
                let one_minus = self.affine(out, -1.0, 1.0);
                let d = self.mul(out, one_minus)?;
                let gx = self.mul(g, d)?;
                vec![(x, gx)]
            }
            Op::Relu(x) => {
                let mask = self.mask_from(x, |v| v > 0.0);
                let gx = self.mask_mul(g, mask)?;
                vec![(x, gx)]
            }
            Op::Ln(x) => {
                let gx = self.div(g, x)?;
                vec![(x, gx)]
            }
            Op::Exp(x) => {
                let gx = self.mul(g, out)?;
                vec![(x, gx)]
            }
            Op::Square(x) => {
                let two_x = self.scale(x, 2.0);
                let gx = self.mul(g, two_x)?;
                vec![(x, gx)]
            }
            Op::ClampMin { x, min } => {
                let mask = self.mask_from(x, |v| v > min);
                let gx = self.mask_mul(g, mask)?;
                vec![(x, gx)]
            }
            Op::MaskMul { x, mask } => {
                let gx = self.mask_mul(g, mask)?;
                vec![(x, gx)]
            }
            Op::Opaque { name, .. } => {
                return Err(DiffError::NonDifferentiable { op_index, op: name });
            }
        };
        Ok(contributions)
    }
}

/// `∇ ½‖v‖²` over `params`, where `build_field` records the vector field `v`
/// from primitives on `graph`.
pub fn grad_norm_grad<F>(graph: &mut Graph, params: &[Var], build_field: F) -> Result<GradientMap, DiffError>
where
    F: FnOnce(&mut Graph) -> Result<Vec<Var>, DiffError>,
{
    let field = build_field(graph)?;
    let grads = graph.half_sq_norm_grad(&field, params)?;
    Ok(GradientMap {
        entries: params
            .iter()
            .zip(grads)
            .map(|(p, g)| (*p, graph.value(g).clone()))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_rule() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backward(y, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(0.25));
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let unused = g.param(Tensor::zeros(&[2, 3]));
        let y = g.exp(x);
        let grads = g.backward(y, &[x, unused]).unwrap();
        let gu = grads.get(unused).unwrap();
        assert_eq!(gu.shape(), &[2, 3]);
        assert!(gu.data().iter().all(|v| *v == 0.0));
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn rejects_vector_loss_and_duplicates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.grad(y, &[x]), Err(DiffError::NonScalarLoss { .. })));
        let s = g.sum(y);
        assert!(matches!(g.grad(s, &[x, x]), Err(DiffError::DuplicateParameter(_))));
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.7));
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let d1 = g.grad(x3, &[x]).unwrap()[0];
        let d2 = g.grad(d1, &[x]).unwrap()[0];
        assert!((g.value(d2).item().unwrap() - 6.0 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn opaque_ops_refuse_differentiation() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.3));
        let y = g.opaque_map(x, "round", f64::round);
        let err = g.grad(y, &[x]).unwrap_err();
        assert!(matches!(err, DiffError::NonDifferentiable { op: "round", .. }));
    }

    #[test]
    fn constant_field_has_zero_norm_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.4, -1.0]));
        let out = grad_norm_grad(&mut g, &[x], |g| Ok(vec![g.constant(Tensor::from_vec(vec![2.0, 3.0]))])).unwrap();
        assert!(out.flatten().iter().all(|v| *v == 0.0));
    }
}
