//! Static expression graph with cached forward values and reverse-mode
//! gradients.
//!
//! A [`Graph`] is built once from named leaves and operation nodes, then
//! evaluated any number of times against different [`Bindings`]. Nodes are
//! appended in topological order, so evaluation is a single forward sweep and
//! the backward pass a single reverse sweep.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::activations::{leaky_relu, sigmoid, softplus};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use super::MathError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf { name: String, trainable: bool },
    Constant(Tensor),
    /// `a[m,k] · b[k,n]` (or `b[k]`, giving `[m]`).
    MatMul(NodeId, NodeId),
    /// `a[m,k] · b[n,k]ᵀ` (or `a[k]`, giving `[n]`); linear layers use this with
    /// weights stored as `[out, in]`.
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Adds a `[n]` vector to every row of `a[.., n]`.
    AddRow(NodeId, NodeId),
    /// `scale * a + shift`, elementwise.
    Affine { input: NodeId, scale: f64, shift: f64 },
    /// Concatenation along the last axis.
    Concat(Vec<NodeId>),
    /// Column gather along the last axis.
    Gather { input: NodeId, indices: Vec<usize> },
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Log(NodeId),
    Exp(NodeId),
    LeakyRelu { input: NodeId, slope: f64 },
    Sigmoid(NodeId),
    Softplus(NodeId),
    Clamp { input: NodeId, lo: f64, hi: f64 },
    /// Squared Euclidean distances between the rows of `a[n,d]` and `b[m,d]`.
    PairwiseSqDist(NodeId, NodeId),
    /// Elementwise `max(l,0) − l·y + ln(1 + e^{−|l|})` for logits `l`, targets `y`.
    BceWithLogits { logits: NodeId, targets: NodeId },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Affine { .. } => "affine",
            Op::Concat(_) => "concat",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Named leaf values supplied to [`Graph::evaluate`]. Values may be owned or
/// borrowed, so large parameter sets need not be copied per evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    values: HashMap<String, Cow<'a, Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.values.insert(name.into(), Cow::Owned(value));
        self
    }

    pub fn set_ref(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.values.insert(name.into(), Cow::Borrowed(value));
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.set(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name).map(|v| v.as_ref())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    output: Option<NodeId>,
}

/// Forward values for every node of one evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

/// Per-node gradients of a scalar output from one backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, label: None });
        id
    }

    fn leaf(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf {
            name: name.to_string(),
            trainable,
        });
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Non-trainable leaf (data, noise draws, labels).
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, false)
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn label(&mut self, id: NodeId, label: &str) -> NodeId {
        self.nodes[id.0].label = Some(label.to_string());
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulBt(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }
    pub fn affine(&mut self, input: NodeId, scale: f64, shift: f64) -> NodeId {
        self.push(Op::Affine {
            input,
            scale,
            shift,
        })
    }
    pub fn scale(&mut self, input: NodeId, scale: f64) -> NodeId {
        self.affine(input, scale, 0.0)
    }
    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::Concat(parts))
    }
    pub fn gather(&mut self, input: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::Gather { input, indices })
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu { input, slope })
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }
    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { input, lo, hi })
    }
    pub fn pairwise_sq_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::PairwiseSqDist(a, b))
    }
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::BceWithLogits { logits, targets })
    }

    /// `x · Wᵀ + b` with `W` stored as `[out, in]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let xw = self.matmul_bt(x, weight);
        self.add_row(xw, bias)
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    /// The designated output node, defaulting to the last node added.
    pub fn output(&self) -> Option<NodeId> {
        self.output
            .or_else(|| self.nodes.len().checked_sub(1).map(NodeId))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names of trainable leaves in insertion order.
    pub fn parameters(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf {
                    name,
                    trainable: true,
                } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.label {
            Some(l) => format!("#{} {} ({})", id.0, node.op.kind(), l),
            None => format!("#{} {}", id.0, node.op.kind()),
        }
    }

    fn shape_error(&self, id: NodeId, detail: String) -> MathError {
        MathError::ShapeMismatch {
            node: self.describe(id),
            detail,
        }
    }

    /// Forward sweep over every node.
    pub fn evaluate(&self, bindings: &Bindings<'_>) -> Result<Evaluation, MathError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let value = self.forward_node(id, &node.op, &values, bindings)?;
            if !value.all_finite() {
                return Err(MathError::NonFinite {
                    node: self.describe(id),
                });
            }
            values.push(value);
        }
        Ok(Evaluation { values })
    }

    /// Forward value of the designated output.
    pub fn evaluate_output(&self, bindings: &Bindings<'_>) -> Result<Tensor, MathError> {
        let out = self.output().ok_or(MathError::EmptyGraph)?;
        let mut eval = self.evaluate(bindings)?;
        Ok(eval.values.swap_remove(out.0))
    }

    fn forward_node(
        &self,
        id: NodeId,
        op: &Op,
        vals: &[Tensor],
        bindings: &Bindings<'_>,
    ) -> Result<Tensor, MathError> {
        let v = |n: &NodeId| &vals[n.0];
        Ok(match op {
            Op::Leaf { name, .. } => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| MathError::UnboundLeaf(name.clone()))?,
            Op::Constant(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rank() != 2 || b.rank() == 0 || b.rank() > 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.shape_error(
                        id,
                        format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = if b.rank() == 2 { b.shape()[1] } else { 1 };
                let mut out = vec![0.0; m * n];
                matmul_into(a.data(), b.data(), m, k, n, &mut out);
                let shape = if b.rank() == 2 { vec![m, n] } else { vec![m] };
                Tensor::new(shape, out)?
            }
            Op::MatMulBt(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rank() == 0 || a.rank() > 2 || b.rank() != 2 || a.cols() != b.shape()[1] {
                    return Err(self.shape_error(
                        id,
                        format!("cannot multiply {:?} by transpose of {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.shape()[0]);
                let mut out = vec![0.0; m * n];
                matmul_bt_into(a.data(), b.data(), m, k, n, &mut out);
                let shape = if a.rank() == 2 { vec![m, n] } else { vec![n] };
                Tensor::new(shape, out)?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape() != b.shape() {
                    return Err(self.shape_error(
                        id,
                        format!("elementwise operands {:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                match op {
                    Op::Add(..) => a.zip_map(b, |x, y| x + y),
                    Op::Sub(..) => a.zip_map(b, |x, y| x - y),
                    _ => a.zip_map(b, |x, y| x * y),
                }
            }
            Op::AddRow(a, b) => {
                let (a, b) = (v(a), v(b));
                if b.rank() != 1 || a.rank() == 0 || a.cols() != b.len() {
                    return Err(self.shape_error(
                        id,
                        format!("cannot add row {:?} to {:?}", b.shape(), a.shape()),
                    ));
                }
                let n = b.len();
                let mut out = a.clone();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o += b.data()[i % n];
                }
                out
            }
            Op::Affine { input, scale, shift } => v(input).map(|x| scale * x + shift),
            Op::Concat(parts) => self.forward_concat(id, parts.iter().map(v).collect())?,
            Op::Gather { input, indices } => {
                let a = v(input);
                if a.rank() == 0 || indices.iter().any(|&j| j >= a.cols()) {
                    return Err(self.shape_error(
                        id,
                        format!("gather index out of range for {:?}", a.shape()),
                    ));
                }
                a.select_cols(indices)
            }
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::Mean(a) => {
                let a = v(a);
                if a.is_empty() {
                    return Err(self.shape_error(id, "mean of empty tensor".into()));
                }
                Tensor::scalar(a.sum() / a.len() as f64)
            }
            Op::Square(a) => v(a).map(|x| x * x),
            Op::Log(a) => v(a).map(f64::ln),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::LeakyRelu { input, slope } => v(input).map(|x| leaky_relu(x, *slope)),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Softplus(a) => v(a).map(softplus),
            Op::Clamp { input, lo, hi } => v(input).map(|x| x.clamp(*lo, *hi)),
            Op::PairwiseSqDist(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
                    return Err(self.shape_error(
                        id,
                        format!("pairwise distance of {:?} and {:?}", a.shape(), b.shape()),
                    ));
                }
                let (n, m) = (a.rows(), b.rows());
                let mut out = Vec::with_capacity(n * m);
                for i in 0..n {
                    let ai = a.row(i);
                    for j in 0..m {
                        out.push(
                            ai.iter()
                                .zip(b.row(j))
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum(),
                        );
                    }
                }
                Tensor::matrix(n, m, out)?
            }
            Op::BceWithLogits { logits, targets } => {
                let (l, y) = (v(logits), v(targets));
                if l.shape() != y.shape() {
                    return Err(self.shape_error(
                        id,
                        format!("logits {:?} vs targets {:?}", l.shape(), y.shape()),
                    ));
                }
                l.zip_map(y, |l, y| l.max(0.0) - l * y + (-l.abs()).exp().ln_1p())
            }
        })
    }

    fn forward_concat(&self, id: NodeId, parts: Vec<&Tensor>) -> Result<Tensor, MathError> {
        let Some(first) = parts.first() else {
            return Err(self.shape_error(id, "concat of nothing".into()));
        };
        let rank = first.rank().max(1);
        let rows = first.rows();
        if parts.iter().any(|p| p.rank().max(1) != rank || p.rows() != rows) {
            return Err(self.shape_error(
                id,
                format!(
                    "concat operands {:?}",
                    parts.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
                ),
            ));
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in &parts {
                data.extend_from_slice(p.row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        Tensor::new(shape, data)
    }

    /// Reverse sweep from `output`, which must hold a single value.
    pub fn backward(&self, eval: &Evaluation, output: NodeId) -> Result<Gradients, MathError> {
        let out_val = &eval.values[output.0];
        if out_val.len() != 1 {
            return Err(MathError::NonScalarOutput {
                shape: out_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::new(out_val.shape().to_vec(), vec![1.0])?);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.vjp(&node.op, NodeId(i), &g, eval);
            grads[i] = Some(g);
            for (target, delta) in contributions {
                match &mut grads[target.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(delta.data())
                        .for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, op: &Op, id: NodeId, g: &Tensor, eval: &Evaluation) -> Vec<(NodeId, Tensor)> {
        let v = |n: &NodeId| &eval.values[n.0];
        let out = &eval.values[id.0];
        match op {
            Op::Leaf { .. } | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = if bv.rank() == 2 { bv.shape()[1] } else { 1 };
                // dA = G·Bᵀ, dB = Aᵀ·G
                let mut da = vec![0.0; m * k];
                matmul_bt_into(g.data(), bv.data(), m, n, k, &mut da);
                let mut db = vec![0.0; k * n];
                matmul_at_into(av.data(), g.data(), m, k, n, &mut db);
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), da).unwrap()),
                    (*b, Tensor::new(bv.shape().to_vec(), db).unwrap()),
                ]
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[0]);
                // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), bv.data(), m, n, k, &mut da);
                let mut db = vec![0.0; n * k];
                matmul_at_into(g.data(), av.data(), m, n, k, &mut db);
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), da).unwrap()),
                    (*b, Tensor::new(bv.shape().to_vec(), db).unwrap()),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(v(b), |gi, bi| gi * bi)),
                (*b, g.zip_map(v(a), |gi, ai| gi * ai)),
            ],
            Op::AddRow(a, b) => {
                let n = v(b).len();
                let mut db = vec![0.0; n];
                for (i, gi) in g.data().iter().enumerate() {
                    db[i % n] += gi;
                }
                vec![(*a, g.clone()), (*b, Tensor::vector(db))]
            }
            Op::Affine { input, scale, .. } => vec![(*input, g.map(|x| x * scale))],
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = v(p);
                    let w = pv.cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    res.push((*p, Tensor::new(pv.shape().to_vec(), d).unwrap()));
                }
                res
            }
            Op::Gather { input, indices } => {
                let iv = v(input);
                let (rows, cols) = (iv.rows(), iv.cols());
                let mut d = vec![0.0; iv.len()];
                let w = indices.len();
                for r in 0..rows {
                    for (c, &j) in indices.iter().enumerate() {
                        d[r * cols + j] += g.data()[r * w + c];
                    }
                }
                vec![(*input, Tensor::new(iv.shape().to_vec(), d).unwrap())]
            }
            Op::Sum(a) => {
                let gi = g.item();
                vec![(*a, v(a).map(|_| gi))]
            }
            Op::Mean(a) => {
                let av = v(a);
                let gi = g.item() / av.len() as f64;
                vec![(*a, av.map(|_| gi))]
            }
            Op::Square(a) => vec![(*a, g.zip_map(v(a), |gi, x| 2.0 * x * gi))],
            Op::Log(a) => vec![(*a, g.zip_map(v(a), |gi, x| gi / x))],
            Op::Exp(a) => vec![(*a, g.zip_map(out, |gi, y| gi * y))],
            Op::LeakyRelu { input, slope } => vec![(
                *input,
                g.zip_map(v(input), |gi, x| if x >= 0.0 { gi } else { gi * slope }),
            )],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |gi, s| gi * s * (1.0 - s)))],
            Op::Softplus(a) => vec![(*a, g.zip_map(v(a), |gi, x| gi * sigmoid(x)))],
            Op::Clamp { input, lo, hi } => vec![(
                *input,
                g.zip_map(v(input), |gi, x| if x < *lo || x > *hi { 0.0 } else { gi }),
            )],
            Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (n, m, d) = (av.rows(), bv.rows(), av.cols());
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.data()[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = 2.0 * gij * (av.data()[i * d + c] - bv.data()[j * d + c]);
                            da[i * d + c] += diff;
                            db[j * d + c] -= diff;
                        }
                    }
                }
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), da).unwrap()),
                    (*b, Tensor::new(bv.shape().to_vec(), db).unwrap()),
                ]
            }
            Op::BceWithLogits { logits, targets } => {
                let (lv, yv) = (v(logits), v(targets));
                let dl = Tensor::new(
                    lv.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(lv.data().iter().zip(yv.data()))
                        .map(|(gi, (&l, &y))| gi * (sigmoid(l) - y))
                        .collect(),
                )
                .unwrap();
                let dy = g.zip_map(lv, |gi, l| -gi * l);
                vec![(*logits, dl), (*targets, dy)]
            }
        }
    }

    /// Exact reverse-mode gradients of the scalar output with respect to the
    /// named leaves.
    pub fn gradient(
        &self,
        bindings: &Bindings<'_>,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Tensor>, MathError> {
        let out = self.output().ok_or(MathError::EmptyGraph)?;
        let eval = self.evaluate(bindings)?;
        let grads = self.backward(&eval, out)?;
        let mut result = BTreeMap::new();
        for &name in wrt {
            let id = self
                .leaf_id(name)
                .ok_or_else(|| MathError::UnboundLeaf(name.to_string()))?;
            let g = match grads.node(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(eval.value(id).shape()),
            };
            result.insert(name.to_string(), g);
        }
        Ok(result)
    }

    /// Central-difference gradient estimate `(f(θ+h) − f(θ−h)) / 2h` per
    /// coordinate of each named leaf.
    pub fn finite_diff_gradient(
        &self,
        bindings: &Bindings<'_>,
        wrt: &[&str],
        h: f64,
    ) -> Result<BTreeMap<String, Tensor>, MathError> {
        let mut result = BTreeMap::new();
        let mut work = bindings.clone();
        for &name in wrt {
            let base = bindings
                .get(name)
                .ok_or_else(|| MathError::UnboundLeaf(name.to_string()))?
                .clone();
            let mut grad = Tensor::zeros(base.shape());
            for c in 0..base.len() {
                let (plus, minus) = self.perturbed_pair(&mut work, name, &base, c, h)?;
                grad.data_mut()[c] = (plus.0 - minus.0) / (2.0 * h);
            }
            work.set(name, base);
            result.insert(name.to_string(), grad);
        }
        Ok(result)
    }

    /// Evaluates the output at `θ_c ± h`, returning each value together with
    /// the branch pattern of the non-smooth nodes.
    fn perturbed_pair(
        &self,
        work: &mut Bindings<'_>,
        name: &str,
        base: &Tensor,
        c: usize,
        h: f64,
    ) -> Result<((f64, Vec<u8>), (f64, Vec<u8>)), MathError> {
        let out = self.output().ok_or(MathError::EmptyGraph)?;
        let mut run = |delta: f64| -> Result<(f64, Vec<u8>), MathError> {
            let mut t = base.clone();
            t.data_mut()[c] += delta;
            work.set(name, t);
            let eval = self.evaluate(work)?;
            let value = eval.value(out);
            if value.len() != 1 {
                return Err(MathError::NonScalarOutput {
                    shape: value.shape().to_vec(),
                });
            }
            Ok((value.item(), self.branch_pattern(&eval)))
        };
        let plus = run(h)?;
        let minus = run(-h)?;
        Ok((plus, minus))
    }

    /// Which side of each kink (leaky ReLU at 0, clamp bounds) every element
    /// of every non-smooth node sits on.
    pub fn branch_pattern(&self, eval: &Evaluation) -> Vec<u8> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { input, .. } => pattern
                    .extend(eval.values[input.0].data().iter().map(|&x| u8::from(x >= 0.0))),
                Op::Clamp { input, lo, hi } => {
                    pattern.extend(eval.values[input.0].data().iter().map(|&x| {
                        if x < *lo {
                            0
                        } else if x > *hi {
                            2
                        } else {
                            1
                        }
                    }))
                }
                _ => {}
            }
        }
        pattern
    }

    /// Compares [`Graph::gradient`] against [`Graph::finite_diff_gradient`],
    /// skipping coordinates whose ±h perturbation moves any kink-bearing node
    /// across a branch.
    pub fn check_gradients(
        &self,
        bindings: &Bindings<'_>,
        wrt: &[&str],
        h: f64,
        abs_floor: f64,
    ) -> Result<GradCheck, MathError> {
        let analytic = self.gradient(bindings, wrt)?;
        let mut work = bindings.clone();
        let mut report = GradCheck::default();
        for &name in wrt {
            let base = bindings
                .get(name)
                .ok_or_else(|| MathError::UnboundLeaf(name.to_string()))?
                .clone();
            let a = &analytic[name];
            for c in 0..base.len() {
                let ((fp, bp), (fm, bm)) = self.perturbed_pair(&mut work, name, &base, c, h)?;
                if bp != bm {
                    report.excluded += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * h);
                let exact = a.data()[c];
                let denom = exact.abs().max(numeric.abs()).max(abs_floor);
                let rel = (exact - numeric).abs() / denom;
                report.checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((name.to_string(), c, exact, numeric));
                }
            }
            work.set(name, base);
        }
        Ok(report)
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    /// `(leaf, coordinate, analytic, numeric)` at the largest error.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor {
        self.values.swap_remove(id.0)
    }
}
