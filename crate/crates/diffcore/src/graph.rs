//! The computation record: a dynamically built list of primitive operations.
//!
//! Every operation appends one node holding its evaluated value, so node
//! indices are always a valid topological order. Backward passes append more
//! nodes to the same record, which is what makes gradients differentiable.

use crate::tensor::{gemm, Tensor};
use crate::DiffError;

/// Lower bound applied to the argument of [`Graph::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// A trainable value; gradients are usually requested for these.
    Param,
    /// A placeholder that [`Graph::replay`] substitutes.
    Input(usize),
    Constant,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf(LeafKind),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Affine { x: Var, scale: f64, shift: f64 },
    AddRow { x: Var, row: Var },
    SumRows(Var),
    BroadcastRows { x: Var, rows: usize },
    Sum(Var),
    BroadcastScalar { x: Var, shape: Vec<usize> },
    Reshape { x: Var, shape: Vec<usize> },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    PadCols { x: Var, start: usize, total: usize },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Ln(Var),
    Exp(Var),
    Square(Var),
    ClampMin { x: Var, min: f64 },
    MaskMul { x: Var, mask: Var },
    Opaque { x: Var, name: &'static str, f: fn(f64) -> f64 },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Affine { .. } => "affine",
            Op::AddRow { .. } => "add_row",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::Sum(_) => "sum",
            Op::BroadcastScalar { .. } => "broadcast_scalar",
            Op::Reshape { .. } => "reshape",
            Op::Concat(_) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Ln(_) => "log",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::ClampMin { .. } => "clamp_min",
            Op::MaskMul { .. } => "mask_mul",
            Op::Opaque { name, .. } => name,
        }
    }

    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf(_) => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::MaskMul { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::Neg(x)
            | Op::SumRows(x)
            | Op::Sum(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Ln(x)
            | Op::Exp(x)
            | Op::Square(x)
            | Op::Affine { x, .. }
            | Op::BroadcastRows { x, .. }
            | Op::BroadcastScalar { x, .. }
            | Op::Reshape { x, .. }
            | Op::SliceCols { x, .. }
            | Op::PadCols { x, .. }
            | Op::ClampMin { x, .. }
            | Op::Opaque { x, .. } => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Records primitive operations together with their values.
///
/// A graph lives on one thread; build a fresh one per evaluation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    inputs: usize,
}

fn shape_err(op_index: usize, op: &Op, detail: String) -> DiffError {
    DiffError::ShapeMismatch {
        op_index,
        op: op.name(),
        detail,
    }
}

/// Computes the value of `op` from already evaluated nodes.
fn evaluate<'a>(op: &Op, op_index: usize, val: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor, DiffError> {
    let same_shape = |a: Var, b: Var| -> Result<(), DiffError> {
        let (sa, sb) = (val(a).shape(), val(b).shape());
        if sa != sb {
            return Err(shape_err(op_index, op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    };
    let out = match op {
        Op::Leaf(_) => unreachable!("leaves carry their own values"),
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            if av.ndim() != 2 || bv.ndim() != 2 {
                return Err(shape_err(
                    op_index,
                    op,
                    format!("operands must be 2-D, got {:?} and {:?}", av.shape(), bv.shape()),
                ));
            }
            let k_a = if *ta { av.shape()[0] } else { av.shape()[1] };
            let k_b = if *tb { bv.shape()[1] } else { bv.shape()[0] };
            if k_a != k_b {
                return Err(shape_err(
                    op_index,
                    op,
                    format!("inner dimensions {k_a} and {k_b} differ"),
                ));
            }
            gemm(av, bv, *ta, *tb)
        }
        Op::Add(a, b) => {
            same_shape(*a, *b)?;
            val(*a).zip_map(val(*b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(*a, *b)?;
            val(*a).zip_map(val(*b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(*a, *b)?;
            val(*a).zip_map(val(*b), |x, y| x * y)
        }
        Op::Div(a, b) => {
            same_shape(*a, *b)?;
            val(*a).zip_map(val(*b), |x, y| x / y)
        }
        Op::Neg(x) => val(*x).map(|v| -v),
        Op::Affine { x, scale, shift } => val(*x).map(|v| scale * v + shift),
        Op::AddRow { x, row } => {
            let (xv, rv) = (val(*x), val(*row));
            if xv.ndim() != 2 || rv.ndim() != 1 || rv.len() != xv.shape()[1] {
                return Err(shape_err(
                    op_index,
                    op,
                    format!("cannot add row {:?} to {:?}", rv.shape(), xv.shape()),
                ));
            }
            let c = rv.len();
            let mut out = xv.clone();
            for chunk in out.data_mut().chunks_mut(c.max(1)) {
                for (o, r) in chunk.iter_mut().zip(rv.data()) {
                    *o += r;
                }
            }
            out
        }
        Op::SumRows(x) => {
            let xv = val(*x);
            if xv.ndim() != 2 {
                return Err(shape_err(op_index, op, format!("expected 2-D, got {:?}", xv.shape())));
            }
            let c = xv.shape()[1];
            let mut out = vec![0.0; c];
            for r in 0..xv.shape()[0] {
                for (o, v) in out.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            Tensor::from_vec(out)
        }
        Op::BroadcastRows { x, rows } => {
            let xv = val(*x);
            if xv.ndim() != 1 {
                return Err(shape_err(op_index, op, format!("expected 1-D, got {:?}", xv.shape())));
            }
            let mut data = Vec::with_capacity(rows * xv.len());
            for _ in 0..*rows {
                data.extend_from_slice(xv.data());
            }
            Tensor::matrix(*rows, xv.len(), data)?
        }
        Op::Sum(x) => Tensor::scalar(val(*x).sum()),
        Op::BroadcastScalar { x, shape } => {
            let xv = val(*x);
            if xv.len() != 1 {
                return Err(shape_err(op_index, op, format!("expected one element, got {:?}", xv.shape())));
            }
            Tensor::full(shape, xv.data()[0])
        }
        Op::Reshape { x, shape } => {
            let xv = val(*x);
            Tensor::new(shape.clone(), xv.data().to_vec())
                .map_err(|_| shape_err(op_index, op, format!("{:?} into {shape:?}", xv.shape())))?
        }
        Op::Concat(parts) => {
            if parts.is_empty() {
                return Err(shape_err(op_index, op, "nothing to concatenate".into()));
            }
            let rows = val(parts[0]).rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let pv = val(*p);
                if pv.ndim() != 2 || pv.rows() != rows {
                    return Err(shape_err(
                        op_index,
                        op,
                        format!("part {:?} does not have {rows} rows", pv.shape()),
                    ));
                }
                widths.push(pv.cols());
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(val(*p).row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        }
        Op::SliceCols { x, start, len } => {
            let xv = val(*x);
            if xv.ndim() != 2 || start + len > xv.shape()[1] {
                return Err(shape_err(
                    op_index,
                    op,
                    format!("columns {start}..{} out of {:?}", start + len, xv.shape()),
                ));
            }
            let rows = xv.shape()[0];
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&xv.row(r)[*start..start + len]);
            }
            Tensor::matrix(rows, *len, data)?
        }
        Op::PadCols { x, start, total } => {
            let xv = val(*x);
            if xv.ndim() != 2 || start + xv.shape()[1] > *total {
                return Err(shape_err(
                    op_index,
                    op,
                    format!("cannot place {:?} at column {start} of {total}", xv.shape()),
                ));
            }
            let rows = xv.shape()[0];
            let w = xv.shape()[1];
            let mut data = vec![0.0; rows * total];
            for r in 0..rows {
                data[r * total + start..r * total + start + w].copy_from_slice(xv.row(r));
            }
            Tensor::matrix(rows, *total, data)?
        }
        Op::Tanh(x) => val(*x).map(f64::tanh),
        Op::Sigmoid(x) => val(*x).map(sigmoid),
        Op::Relu(x) => val(*x).map(|v| v.max(0.0)),
        Op::Ln(x) => val(*x).map(f64::ln),
        Op::Exp(x) => val(*x).map(f64::exp),
        Op::Square(x) => val(*x).map(|v| v * v),
        Op::ClampMin { x, min } => val(*x).map(|v| v.max(*min)),
        Op::MaskMul { x, mask } => {
            same_shape(*x, *mask)?;
            val(*x).zip_map(val(*mask), |a, m| a * m)
        }
        Op::Opaque { x, f, .. } => val(*x).map(f),
    };
    Ok(out)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf_kind(&self, v: Var) -> Option<LeafKind> {
        match self.nodes[v.0].op {
            Op::Leaf(kind) => Some(kind),
            _ => None,
        }
    }

    /// Name of the primitive that produced node `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn leaf(&mut self, value: Tensor, kind: LeafKind) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf(kind),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Param)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Constant)
    }

    /// Declares a replayable input. `value` fixes the declared shape and the
    /// value used while recording.
    pub fn input(&mut self, value: Tensor) -> Var {
        let slot = self.inputs;
        self.inputs += 1;
        self.leaf(value, LeafKind::Input(slot))
    }

    pub(crate) fn push(&mut self, op: Op) -> Result<Var, DiffError> {
        let index = self.nodes.len();
        let nodes = &self.nodes;
        let value = evaluate(&op, index, &|v: Var| &nodes[v.0].value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(index))
    }

    fn push_unary(&mut self, op: Op) -> Var {
        self.push(op).expect("elementwise unary ops cannot fail")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)`, transposing an operand when its flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, DiffError> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.push_unary(Op::Neg(x))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.push_unary(Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// Adds a length-`n` vector to every row of a `(rows, n)` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, DiffError> {
        self.push(Op::AddRow { x, row })
    }

    /// Column sums of a 2-D tensor.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        self.push(Op::SumRows(x))
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var, DiffError> {
        self.push(Op::BroadcastRows { x, rows })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push_unary(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_scalar(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        self.push(Op::BroadcastScalar {
            x,
            shape: shape.to_vec(),
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        self.push(Op::SliceCols { x, start, len })
    }

    /// Places `x` at column `start` of a zero matrix with `total` columns.
    pub fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Result<Var, DiffError> {
        self.push(Op::PadCols { x, start, total })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.push_unary(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.push_unary(Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.push_unary(Op::Relu(x))
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&mut self, x: Var) -> Var {
        let c = self.clamp_min(x, LOG_FLOOR);
        self.push_unary(Op::Ln(c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.push_unary(Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.push_unary(Op::Square(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.push_unary(Op::ClampMin { x, min })
    }

    /// Multiplies `x` elementwise by a constant `mask` node.
    pub fn mask_mul(&mut self, x: Var, mask: Var) -> Result<Var, DiffError> {
        self.push(Op::MaskMul { x, mask })
    }

    /// Applies an arbitrary elementwise function that has no derivative rule.
    /// Differentiating through it is an error.
    pub fn opaque_map(&mut self, x: Var, name: &'static str, f: fn(f64) -> f64) -> Var {
        self.push_unary(Op::Opaque { x, name, f })
    }

    /// Re-evaluates the record with new values for the declared inputs and
    /// returns the value of `output`.
    pub fn replay(&self, inputs: &[Tensor], output: Var) -> Result<Tensor, DiffError> {
        if inputs.len() != self.inputs {
            return Err(DiffError::InputCount {
                expected: self.inputs,
                got: inputs.len(),
            });
        }
        if output.0 >= self.nodes.len() {
            return Err(DiffError::UnknownNode(output.0));
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(output.0 + 1);
        for (index, node) in self.nodes[..=output.0].iter().enumerate() {
            let value = match node.op {
                Op::Leaf(LeafKind::Input(slot)) => {
                    let given = &inputs[slot];
                    if given.shape() != node.value.shape() {
                        return Err(shape_err(
                            index,
                            &node.op,
                            format!(
                                "input {slot} declared {:?}, got {:?}",
                                node.value.shape(),
                                given.shape()
                            ),
                        ));
                    }
                    given.clone()
                }
                // params, constants and masks recorded by backward keep their values
                Op::Leaf(_) => node.value.clone(),
                ref op => evaluate(op, index, &|v: Var| &values[v.0])?,
            };
            values.push(value);
        }
        Ok(values.pop().expect("output node evaluated"))
    }
}
