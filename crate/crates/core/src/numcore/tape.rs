use std::sync::Arc;

use rand::Rng;

use super::sparse::CsrMatrix;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// Constant sparse operator applied from the left; carries its transpose.
    Propagate(Arc<CsrMatrix>, NodeId),
    Add(NodeId, NodeId),
    /// Adds a 1×c row to every row.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Square(NodeId),
    Abs(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// Elementwise product with a constant mask (dropout).
    MaskMul(NodeId, Arc<Tensor2>),
    Sum(NodeId),
    Mean(NodeId),
    /// Gathers flat row-major positions into a 1×k row.
    Select(NodeId, Arc<Vec<usize>>),
    SliceCols(NodeId, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor2,
    needs_grad: bool,
}

/// Reverse-mode tape over [`Tensor2`] values.
///
/// Ops validate shapes eagerly and record their forward value. `backward`
/// sweeps nodes in reverse creation order and sums adjoints for shared inputs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor2>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor2, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor2) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor2) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor2> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, name)?;
        let out = va.zip_map_unchecked(vb, f);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(op, out, ng))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let out = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(op, out, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    /// `op · a` for a constant sparse operator.
    pub fn propagate(&mut self, op: &CsrMatrix, a: NodeId) -> Result<NodeId> {
        let out = op.matmul_dense(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(Op::Propagate(Arc::new(op.transpose()), a), out, ng))
    }

    /// `op · a` where the caller guarantees `op` is symmetric, so the
    /// backward pass can reuse it as its own transpose.
    pub fn propagate_symmetric(&mut self, op: &Arc<CsrMatrix>, a: NodeId) -> Result<NodeId> {
        let out = op.matmul_dense(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(Op::Propagate(Arc::clone(op), a), out, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Broadcast-adds the 1×c `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: va.shape(),
                right: vr.shape(),
            });
        }
        let c = va.cols();
        let out = Tensor2::from_fn(va.rows(), c, |i, j| va.get(i, j) + vr.get(0, j));
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Op::AddRow(a, row), out, ng))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// Multiplies by a fixed mask, e.g. one from [`dropout_mask`].
    pub fn dropout(&mut self, a: NodeId, mask: Arc<Tensor2>) -> Result<NodeId> {
        let va = self.value(a);
        va.check_same_shape(&mask, "dropout")?;
        let out = va.zip_map_unchecked(&mask, |x, m| x * m);
        let ng = self.needs(a);
        Ok(self.push(Op::MaskMul(a, mask), out, ng))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor2::scalar(s), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).mean();
        let ng = self.needs(a);
        self.push(Op::Mean(a), Tensor2::scalar(s), ng)
    }

    /// Gathers the given row-major positions of `a` into a 1×k row.
    pub fn select(&mut self, a: NodeId, positions: Arc<Vec<usize>>) -> Result<NodeId> {
        let va = self.value(a);
        if positions.is_empty() {
            return Err(Error::invalid("empty selection"));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= va.len()) {
            return Err(Error::invalid(format!(
                "selection index {p} outside {:?} tensor",
                va.shape()
            )));
        }
        let data = positions.iter().map(|&p| va.data()[p]).collect();
        let out = Tensor2::from_vec_unchecked(1, positions.len(), data);
        let ng = self.needs(a);
        Ok(self.push(Op::Select(a, positions), out, ng))
    }

    /// Row-major positions where `mask` is true, for use with [`Graph::select`].
    pub fn mask_positions(mask: &[bool]) -> Arc<Vec<usize>> {
        Arc::new(mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect())
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if len == 0 || start + len > va.cols() {
            return Err(Error::invalid(format!(
                "column slice {start}..{} outside {:?} tensor",
                start + len,
                va.shape()
            )));
        }
        let out = Tensor2::from_fn(va.rows(), len, |i, j| va.get(i, start + j));
        let ng = self.needs(a);
        Ok(self.push(Op::SliceCols(a, start), out, ng))
    }

    /// Populates gradients of `loss` (a 1×1 node) for every node that depends on a param.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_nt(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_tn(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Propagate(op_t, a) => {
                    let ga = op_t.matmul_dense(&g)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let mut sums = Tensor2::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (s, v) in sums.data_mut().iter_mut().zip(g.row(i)) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads, *row, sums);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.zip_map_unchecked(self.value(*b), |x, y| x * y);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.zip_map_unchecked(self.value(*a), |x, y| x * y);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Square(a) => {
                    let ga = g.zip_map_unchecked(self.value(*a), |x, y| 2.0 * x * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    // subgradient 0 at the kink
                    let ga = g.zip_map_unchecked(self.value(*a), |x, y| {
                        if y > 0.0 {
                            x
                        } else if y < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map_unchecked(&node.value, |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map_unchecked(self.value(*a), |x, y| x / y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map_unchecked(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map_unchecked(&node.value, |x, s| x * s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| c * x));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MaskMul(a, mask) => {
                    let ga = g.zip_map_unchecked(mask, |x, m| x * m);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor2::filled(r, c, g.data()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let v = g.data()[0] / (r * c) as f64;
                    accumulate(&mut grads, *a, Tensor2::filled(r, c, v));
                }
                Op::Select(a, positions) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor2::zeros(r, c);
                    for (&p, &v) in positions.iter().zip(g.data()) {
                        ga.data_mut()[p] += v;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor2::zeros(r, c);
                    for i in 0..r {
                        for (j, v) in g.row(i).iter().enumerate() {
                            ga.set(i, start + j, *v);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Tensor2 {
    if p <= 0.0 {
        return Tensor2::filled(rows, cols, 1.0);
    }
    let keep = 1.0 / (1.0 - p);
    Tensor2::from_fn(rows, cols, |_, _| if rng.random::<f64>() < p { 0.0 } else { keep })
}
