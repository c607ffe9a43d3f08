//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a topologically ordered list of primitive operations over
//! [`Tensor`] values, with named parameter and input slots. Forward
//! evaluation fills a [`Workspace`]; [`backward`](Graph::backward) walks the
//! tape in reverse and accumulates adjoints into a [`GradientVector`].
//! [`finite_diff`](Graph::finite_diff) is the independent central-difference
//! oracle; it shares only the forward evaluator with the reverse pass.
//!
//! Graphs and parameter stores are immutable during evaluation, so
//! per-example passes may run concurrently with separate workspaces.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// LayerNorm variance stabilizer.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub enum Op {
    /// Named input slot.
    Input(usize),
    /// Named trainable parameter slot.
    Param(usize),
    /// Inline constant.
    Const(Tensor),
    /// Elementwise sum, identical shapes.
    Add(NodeId, NodeId),
    /// Elementwise difference, identical shapes.
    Sub(NodeId, NodeId),
    /// Elementwise product, identical shapes.
    Mul(NodeId, NodeId),
    /// (L,d) matrix plus a d-vector added to every row.
    AddRow(NodeId, NodeId),
    /// (L,d) matrix with every row scaled elementwise by a d-vector.
    MulRow(NodeId, NodeId),
    /// (m,k) x (k,n) matrix product.
    MatMul(NodeId, NodeId),
    /// (m,k) x (n,k)^T product, yielding (m,n).
    MatMulTransB(NodeId, NodeId),
    /// (m,k) matrix times k-vector.
    MatVec(NodeId, NodeId),
    /// Multiply by a compile-time scalar.
    Scale(NodeId, f64),
    /// Elementwise tanh.
    Tanh(NodeId),
    /// Elementwise x / (1 + |x|); the smooth, cheap MLP activation.
    Softsign(NodeId),
    /// Row-wise softmax of a (m,n) matrix.
    SoftmaxRows(NodeId),
    /// Row-wise LayerNorm (no affine part) with stabilizer [`LN_EPS`].
    LayerNormRows(NodeId),
    /// Bounded tanh: M * tanh(x / M).
    BoundTanh(NodeId, f64),
    /// Hard clamp to [-M, M]; zero gradient outside the interval.
    HardClamp(NodeId, f64),
    /// Identity inside |x| <= M - eps, quadratic blend on the band,
    /// saturation at +-M beyond.
    SoftClampBand(NodeId, f64, f64),
    /// Straight-through clamp: forward hard clamp, backward identity.
    ClampSte(NodeId, f64),
    /// Project a vector onto the l2 ball of radius M.
    L2Clip(NodeId, f64),
    /// Concatenate (L,d_i) matrices along columns.
    ConcatCols(Vec<NodeId>),
    /// Sum of all entries; yields a scalar.
    Sum(NodeId),
}

impl Op {
    fn input_ids(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulTransB(a, b)
            | Op::MatVec(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Softsign(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a)
            | Op::BoundTanh(a, _)
            | Op::HardClamp(a, _)
            | Op::SoftClampBand(a, _, _)
            | Op::ClampSte(a, _)
            | Op::L2Clip(a, _)
            | Op::Sum(a) => vec![*a],
            Op::ConcatCols(v) => v.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MatMul(..) => "matmul",
            Op::MatMulTransB(..) => "matmul_trans_b",
            Op::MatVec(..) => "matvec",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Softsign(..) => "softsign",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::BoundTanh(..) => "bound_tanh",
            Op::HardClamp(..) => "hard_clamp",
            Op::SoftClampBand(..) => "soft_clamp_band",
            Op::ClampSte(..) => "clamp_ste",
            Op::L2Clip(..) => "l2_clip",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Acyclic tape of primitive operations with stable parameter identifiers.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<Slot>,
    params: Vec<Slot>,
    param_index: BTreeMap<String, usize>,
    loss: Option<NodeId>,
}

/// Parameter values aligned with a graph's parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn zeros(graph: &Graph) -> Self {
        let values = graph.params.iter().map(|s| Tensor::zeros(s.shape.clone())).collect();
        Self::from_values(graph, values)
    }

    fn from_values(graph: &Graph, values: Vec<Tensor>) -> Self {
        ParamStore {
            names: graph.params.iter().map(|s| s.name.clone()).collect(),
            values,
            index: graph.param_index.clone(),
        }
    }

    /// Gaussian init scaled per tensor; slots whose name ends in `.zero`
    /// conventions are handled by the caller.
    pub fn init_normal(graph: &Graph, rng: &mut CounterRng, scale: f64) -> Self {
        let mut store = Self::zeros(graph);
        for t in store.values.iter_mut() {
            let fan_in = t.shape().first().copied().unwrap_or(1).max(1);
            let s = scale / (fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = s * rng.normal();
            }
        }
        store
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.values[i])
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.values[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter_mut())
    }

    /// Total scalar parameter count.
    pub fn dim(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Apply `update` scaled by `step` (in place).
    pub fn add_scaled(&mut self, update: &GradientVector, step: f64) {
        for (t, u) in self.values.iter_mut().zip(update.entries.iter()) {
            for (x, du) in t.data_mut().iter_mut().zip(u.1.data()) {
                *x += step * du;
            }
        }
    }
}

/// Per-parameter gradient buffers keyed by parameter identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    entries: Vec<(String, Tensor)>,
}

impl GradientVector {
    pub fn zeros(graph: &Graph) -> Self {
        GradientVector {
            entries: graph
                .params
                .iter()
                .map(|s| (s.name.clone(), Tensor::zeros(s.shape.clone())))
                .collect(),
        }
    }

    pub fn zeros_like(other: &GradientVector) -> Self {
        GradientVector {
            entries: other
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn dim(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|x| x * x)
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.entries.iter_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &GradientVector, s: f64) {
        debug_assert_eq!(self.entries.len(), other.entries.len());
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(other.entries.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * y;
            }
        }
    }

    /// Flatten into one buffer, parameter slots in graph order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten); round-trips exactly.
    pub fn unflatten_from(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.dim() {
            return Err(CoreError::InvalidArgument(format!(
                "unflatten: expected {} coordinates, got {}",
                self.dim(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, t) in self.entries.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }
}

/// Input bindings for one forward pass, aligned with graph input slots.
#[derive(Debug, Clone)]
pub struct InputBindings {
    values: Vec<Tensor>,
}

impl InputBindings {
    pub fn for_graph(graph: &Graph, named: &[(&str, Tensor)]) -> Result<Self> {
        let mut values: Vec<Option<Tensor>> = vec![None; graph.inputs.len()];
        for (name, t) in named {
            let pos = graph
                .inputs
                .iter()
                .position(|s| s.name == *name)
                .ok_or_else(|| CoreError::Graph(format!("unknown input slot `{name}`")))?;
            if graph.inputs[pos].shape != t.shape() {
                return Err(CoreError::ShapeMismatch {
                    context: format!("input `{name}`"),
                    expected: graph.inputs[pos].shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            values[pos] = Some(t.clone());
        }
        let values = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    CoreError::Graph(format!("input slot `{}` not bound", graph.inputs[i].name))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InputBindings { values })
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.values[slot]
    }
}

/// Reusable per-evaluation value buffers (one tensor per node).
#[derive(Debug, Clone)]
pub struct Workspace {
    values: Vec<Tensor>,
}

impl Workspace {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        let slot = self.inputs.len();
        self.inputs.push(Slot {
            name: name.to_string(),
            shape: shape.clone(),
        });
        self.push(Op::Input(slot), shape)
    }

    /// Register a trainable parameter; each identifier may appear once.
    pub fn param(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        if self.param_index.contains_key(name) {
            return Err(CoreError::Graph(format!("duplicate parameter id `{name}`")));
        }
        let slot = self.params.len();
        self.param_index.insert(name.to_string(), slot);
        self.params.push(Slot {
            name: name.to_string(),
            shape: shape.clone(),
        });
        Ok(self.push(Op::Param(slot), shape))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn require_same(&self, ctx: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(CoreError::ShapeMismatch {
                context: ctx.to_string(),
                expected: self.shape_of(a).to_vec(),
                got: self.shape_of(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same("add", a, b)?;
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same("sub", a, b)?;
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same("mul", a, b)?;
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape))
    }

    fn rowvec_check(&self, ctx: &str, m: NodeId, v: NodeId) -> Result<Vec<usize>> {
        let ms = self.shape_of(m);
        let vs = self.shape_of(v);
        match (ms, vs) {
            ([_, d], [dv]) if d == dv => Ok(ms.to_vec()),
            _ => Err(CoreError::ShapeMismatch {
                context: ctx.to_string(),
                expected: ms.to_vec(),
                got: vs.to_vec(),
            }),
        }
    }

    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let shape = self.rowvec_check("add_row", m, v)?;
        Ok(self.push(Op::AddRow(m, v), shape))
    }

    pub fn mul_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let shape = self.rowvec_check("mul_row", m, v)?;
        Ok(self.push(Op::MulRow(m, v), shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        match (self.shape_of(a), self.shape_of(b)) {
            ([m, ka], [kb, n]) if ka == kb => {
                let shape = vec![*m, *n];
                Ok(self.push(Op::MatMul(a, b), shape))
            }
            (sa, sb) => Err(CoreError::ShapeMismatch {
                context: "matmul".to_string(),
                expected: sa.to_vec(),
                got: sb.to_vec(),
            }),
        }
    }

    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        match (self.shape_of(a), self.shape_of(b)) {
            ([m, ka], [n, kb]) if ka == kb => {
                let shape = vec![*m, *n];
                Ok(self.push(Op::MatMulTransB(a, b), shape))
            }
            (sa, sb) => Err(CoreError::ShapeMismatch {
                context: "matmul_trans_b".to_string(),
                expected: sa.to_vec(),
                got: sb.to_vec(),
            }),
        }
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        match (self.shape_of(a), self.shape_of(x)) {
            ([m, ka], [kx]) if ka == kx => {
                let shape = vec![*m];
                Ok(self.push(Op::MatVec(a, x), shape))
            }
            (sa, sx) => Err(CoreError::ShapeMismatch {
                context: "matvec".to_string(),
                expected: sa.to_vec(),
                got: sx.to_vec(),
            }),
        }
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Scale(a, s), shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Tanh(a), shape)
    }

    pub fn softsign(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Softsign(a), shape)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(a).to_vec();
        if shape.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                context: "softmax_rows".to_string(),
                expected: vec![0, 0],
                got: shape,
            });
        }
        Ok(self.push(Op::SoftmaxRows(a), shape))
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(a).to_vec();
        if shape.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                context: "layer_norm_rows".to_string(),
                expected: vec![0, 0],
                got: shape,
            });
        }
        Ok(self.push(Op::LayerNormRows(a), shape))
    }

    pub fn bound_tanh(&mut self, a: NodeId, m: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::BoundTanh(a, m), shape)
    }

    pub fn hard_clamp(&mut self, a: NodeId, m: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::HardClamp(a, m), shape)
    }

    pub fn soft_clamp_band(&mut self, a: NodeId, m: f64, band_eps: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::SoftClampBand(a, m, band_eps), shape)
    }

    pub fn clamp_ste(&mut self, a: NodeId, m: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::ClampSte(a, m), shape)
    }

    pub fn l2_clip(&mut self, a: NodeId, max_norm: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::L2Clip(a, max_norm), shape)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::Graph("concat_cols of zero parts".into()));
        }
        let rows = self.shape_of(parts[0])[0];
        let mut cols = 0;
        for &p in parts {
            match self.shape_of(p) {
                [r, c] if *r == rows => cols += c,
                s => {
                    return Err(CoreError::ShapeMismatch {
                        context: "concat_cols".to_string(),
                        expected: vec![rows, 0],
                        got: s.to_vec(),
                    })
                }
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![rows, cols]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    /// Mean squared error between two same-shape tensors (composed primitive).
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        let total = self.sum(sq);
        let n: usize = self.shape_of(pred).iter().product();
        Ok(self.scale(total, 1.0 / n as f64))
    }

    /// Mark the scalar loss node.
    pub fn set_loss(&mut self, id: NodeId) -> Result<()> {
        if self.shape_of(id) != [1] {
            return Err(CoreError::Graph(format!(
                "loss must be scalar, node {id} has shape {:?}",
                self.shape_of(id)
            )));
        }
        self.loss = Some(id);
        Ok(())
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn param_slots(&self) -> &[Slot] {
        &self.params
    }

    pub fn input_slots(&self) -> &[Slot] {
        &self.inputs
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            values: self
                .nodes
                .iter()
                .map(|n| Tensor::zeros(n.shape.clone()))
                .collect(),
        }
    }

    /// Evaluate all nodes into `ws`. Deterministic; parameters untouched.
    pub fn forward(
        &self,
        params: &ParamStore,
        inputs: &InputBindings,
        ws: &mut Workspace,
    ) -> Result<()> {
        self.check_bindings(params, inputs)?;
        for id in 0..self.nodes.len() {
            // Leaves are resolved straight from their backing stores during
            // evaluation; their workspace slots are never read.
            if matches!(self.nodes[id].op, Op::Input(_) | Op::Param(_) | Op::Const(_)) {
                continue;
            }
            let (before, rest) = ws.values.split_at_mut(id);
            let out = &mut rest[0];
            eval_node(&self.nodes, id, params, inputs, |j| &before[j], out)?;
        }
        // Finiteness is verified once at the sink rather than per node;
        // on failure a diagnostic pass names the first offending node.
        if let Some(loss) = self.loss {
            if !ws.values[loss].all_finite() {
                return Err(self.locate_non_finite(ws));
            }
        }
        Ok(())
    }

    fn locate_non_finite(&self, ws: &Workspace) -> CoreError {
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Input(_) | Op::Param(_) | Op::Const(_)) {
                continue;
            }
            if let Some(index) = ws.values[id].first_non_finite() {
                return CoreError::NonFinite {
                    context: format!("node {id} ({})", node.op.name()),
                    index,
                };
            }
        }
        CoreError::NonFinite {
            context: "forward pass (offender not located)".into(),
            index: 0,
        }
    }

    fn check_bindings(&self, params: &ParamStore, inputs: &InputBindings) -> Result<()> {
        if params.values.len() != self.params.len() {
            return Err(CoreError::Graph("parameter store does not match graph".into()));
        }
        for (slot, v) in self.params.iter().zip(params.values.iter()) {
            if slot.shape != v.shape() {
                return Err(CoreError::ShapeMismatch {
                    context: format!("param `{}`", slot.name),
                    expected: slot.shape.clone(),
                    got: v.shape().to_vec(),
                });
            }
        }
        if inputs.values.len() != self.inputs.len() {
            return Err(CoreError::Graph("input bindings do not match graph".into()));
        }
        for (slot, v) in self.inputs.iter().zip(inputs.values.iter()) {
            if slot.shape != v.shape() {
                return Err(CoreError::ShapeMismatch {
                    context: format!("input `{}`", slot.name),
                    expected: slot.shape.clone(),
                    got: v.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Loss value after a forward pass.
    pub fn loss_value(&self, ws: &Workspace) -> Result<f64> {
        let id = self
            .loss
            .ok_or_else(|| CoreError::Graph("no loss node set".into()))?;
        Ok(ws.values[id].data()[0])
    }

    /// Reverse pass: gradient of the loss with respect to every parameter.
    ///
    /// `ws` must hold a completed forward evaluation for the same bindings.
    pub fn backward(
        &self,
        params: &ParamStore,
        inputs: &InputBindings,
        ws: &Workspace,
    ) -> Result<GradientVector> {
        let loss = self
            .loss
            .ok_or_else(|| CoreError::Graph("no loss node set".into()))?;
        if self.nodes[loss].shape != [1] {
            return Err(CoreError::Graph("loss node is not scalar".into()));
        }
        let mut adjoints: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.shape.clone()))
            .collect();
        adjoints[loss].data_mut()[0] = 1.0;

        let mut grads = GradientVector::zeros(self);
        for id in (0..self.nodes.len()).rev() {
            // Take this node's adjoint out so upstream accumulation can
            // borrow the rest of the buffer mutably.
            let adj = std::mem::replace(&mut adjoints[id], Tensor::zeros(vec![0; 0]));
            backprop_node(
                &self.nodes,
                id,
                params,
                inputs,
                ws,
                &adj,
                &mut adjoints,
                &mut grads,
            );
            adjoints[id] = adj;
        }
        Ok(grads)
    }

    /// Central-difference gradient oracle:
    /// (f(theta + eps e) - f(theta - eps e)) / (2 eps) per coordinate.
    ///
    /// Independent of the reverse pass; only the forward evaluator is shared.
    /// Recomputes only nodes downstream of the perturbed parameter.
    pub fn finite_diff(
        &self,
        params: &ParamStore,
        inputs: &InputBindings,
        epsilon: f64,
    ) -> Result<GradientVector> {
        if !(1e-7..=1e-3).contains(&epsilon) {
            return Err(CoreError::InvalidArgument(format!(
                "finite_diff epsilon {epsilon} outside [1e-7, 1e-3]"
            )));
        }
        let loss = self
            .loss
            .ok_or_else(|| CoreError::Graph("no loss node set".into()))?;
        let mut baseline = self.workspace();
        self.forward(params, inputs, &mut baseline)?;
        let mut scratch = baseline.clone();
        let mut params = params.clone();
        let mut grads = GradientVector::zeros(self);

        for slot in 0..self.params.len() {
            let is_dirty = self.downstream_of_param(slot);
            if !is_dirty[loss] {
                continue; // parameter does not influence the loss
            }
            // Leaves never need (re)evaluation; their values live in the
            // parameter and input stores.
            let dirty: Vec<NodeId> = (0..self.nodes.len())
                .filter(|&id| {
                    is_dirty[id]
                        && !matches!(self.nodes[id].op, Op::Input(_) | Op::Param(_) | Op::Const(_))
                })
                .collect();
            let n = params.values[slot].len();
            for coord in 0..n {
                let orig = params.values[slot].data()[coord];
                let mut eval_at = |p: &mut ParamStore, v: f64| -> Result<f64> {
                    p.values[slot].data_mut()[coord] = v;
                    for &id in &dirty {
                        let (before, rest) = scratch.values.split_at_mut(id);
                        let out = &mut rest[0];
                        let base = &baseline.values;
                        let is_dirty_ref = &is_dirty;
                        eval_node(
                            &self.nodes,
                            id,
                            p,
                            inputs,
                            |j| {
                                if is_dirty_ref[j] {
                                    &before[j]
                                } else {
                                    &base[j]
                                }
                            },
                            out,
                        )?;
                    }
                    Ok(scratch.values[loss].data()[0])
                };
                let plus = eval_at(&mut params, orig + epsilon)?;
                let minus = eval_at(&mut params, orig - epsilon)?;
                params.values[slot].data_mut()[coord] = orig;
                let d = (plus - minus) / (2.0 * epsilon);
                if !d.is_finite() {
                    return Err(CoreError::NonFinite {
                        context: format!("finite_diff of `{}`", self.params[slot].name),
                        index: coord,
                    });
                }
                grads.entries[slot].1.data_mut()[coord] = d;
            }
        }
        Ok(grads)
    }

    /// Membership mask of nodes whose value depends on parameter `slot`.
    fn downstream_of_param(&self, slot: usize) -> Vec<bool> {
        let mut affected = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Param(s) if *s == slot => affected[id] = true,
                op => {
                    if op.input_ids().iter().any(|&j| affected[j]) {
                        affected[id] = true;
                    }
                }
            }
        }
        affected
    }
}

// Chunked dot product; separate accumulators let LLVM vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn eval_node<'a, F>(
    nodes: &[Node],
    id: NodeId,
    params: &'a ParamStore,
    inputs: &'a InputBindings,
    get_computed: F,
    out: &mut Tensor,
) -> Result<()>
where
    F: Fn(NodeId) -> &'a Tensor,
    'a: 'a,
{
    // Resolve a source node's value: leaves read their backing store,
    // interior nodes read the workspace.
    let val = |j: NodeId| -> &Tensor {
        match &nodes[j].op {
            Op::Param(s) => params.value(*s),
            Op::Input(s) => inputs.value(*s),
            Op::Const(t) => t,
            _ => get_computed(j),
        }
    };

    let node = &nodes[id];
    match &node.op {
        // Leaves are resolved by `val`; nothing to compute.
        Op::Input(s) => out.data_mut().copy_from_slice(inputs.value(*s).data()),
        Op::Param(s) => out.data_mut().copy_from_slice(params.value(*s).data()),
        Op::Const(t) => out.data_mut().copy_from_slice(t.data()),
        Op::Add(a, b) => {
            let (a, b) = (val(*a), val(*b));
            for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o = x + y;
            }
        }
        Op::Sub(a, b) => {
            let (a, b) = (val(*a), val(*b));
            for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o = x - y;
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o = x * y;
            }
        }
        Op::AddRow(m, v) => {
            let (m, v) = (val(*m), val(*v));
            let d = v.len();
            for (orow, mrow) in out.data_mut().chunks_mut(d).zip(m.data().chunks(d)) {
                for ((o, x), y) in orow.iter_mut().zip(mrow).zip(v.data()) {
                    *o = x + y;
                }
            }
        }
        Op::MulRow(m, v) => {
            let (m, v) = (val(*m), val(*v));
            let d = v.len();
            for (orow, mrow) in out.data_mut().chunks_mut(d).zip(m.data().chunks(d)) {
                for ((o, x), y) in orow.iter_mut().zip(mrow).zip(v.data()) {
                    *o = x * y;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (m, k) = a.dims2()?;
            let (_, n) = b.dims2()?;
            for i in 0..m {
                let arow = &a.data()[i * k..(i + 1) * k];
                let orow = &mut out.data_mut()[i * n..(i + 1) * n];
                // First term written directly; avoids a zero-fill pass.
                let a0 = arow[0];
                for (o, x) in orow.iter_mut().zip(&b.data()[..n]) {
                    *o = a0 * x;
                }
                for (l, &av) in arow.iter().enumerate().skip(1) {
                    axpy(orow, av, &b.data()[l * n..(l + 1) * n]);
                }
            }
        }
        Op::MatMulTransB(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (m, k) = a.dims2()?;
            let (n, _) = b.dims2()?;
            for i in 0..m {
                let arow = &a.data()[i * k..(i + 1) * k];
                for j in 0..n {
                    out.data_mut()[i * n + j] = dot(arow, &b.data()[j * k..(j + 1) * k]);
                }
            }
        }
        Op::MatVec(a, x) => {
            let (a, x) = (val(*a), val(*x));
            let (m, k) = a.dims2()?;
            for i in 0..m {
                out.data_mut()[i] = dot(&a.data()[i * k..(i + 1) * k], x.data());
            }
        }
        Op::Scale(a, s) => {
            let a = val(*a);
            for (o, x) in out.data_mut().iter_mut().zip(a.data()) {
                *o = s * x;
            }
        }
        Op::Tanh(a) => {
            let a = val(*a);
            for (o, x) in out.data_mut().iter_mut().zip(a.data()) {
                *o = x.tanh();
            }
        }
        Op::Softsign(a) => {
            let a = val(*a);
            for (o, x) in out.data_mut().iter_mut().zip(a.data()) {
                *o = x / (1.0 + x.abs());
            }
        }
        Op::SoftmaxRows(a) => {
            let a = val(*a);
            let (_, n) = a.dims2()?;
            for (orow, arow) in out.data_mut().chunks_mut(n).zip(a.data().chunks(n)) {
                let mx = arow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, x) in orow.iter_mut().zip(arow) {
                    *o = (x - mx).exp();
                    z += *o;
                }
                let inv = 1.0 / z;
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
        }
        Op::LayerNormRows(a) => {
            let a = val(*a);
            let (_, n) = a.dims2()?;
            for (orow, arow) in out.data_mut().chunks_mut(n).zip(a.data().chunks(n)) {
                let mean = arow.iter().sum::<f64>() / n as f64;
                let var = arow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for (o, x) in orow.iter_mut().zip(arow) {
                    *o = (x - mean) * inv;
                }
            }
        }
        Op::BoundTanh(a, m) => {
            let a = val(*a);
            for (o, x) in out.data_mut().iter_mut().zip(a.data()) {
                *o = m * (x / m).tanh();
            }
        }
        Op::HardClamp(a, m) | Op::ClampSte(a, m) => {
            let a = val(*a);
            for (o, x) in out.data_mut().iter_mut().zip(a.data()) {
                *o = x.clamp(-m, *m);
            }
        }
        Op::SoftClampBand(a, m, eps) => {
            let a = val(*a);
            for (o, x) in out.data_mut().iter_mut().zip(a.data()) {
                *o = soft_clamp_band_scalar(*x, *m, *eps);
            }
        }
        Op::L2Clip(a, max_norm) => {
            let a = val(*a);
            let norm = a.l2_norm();
            let s = if norm > *max_norm { max_norm / norm } else { 1.0 };
            for (o, x) in out.data_mut().iter_mut().zip(a.data()) {
                *o = s * x;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut off = 0;
            for &p in parts {
                let t = val(p);
                let c = t.shape()[1];
                for r in 0..rows {
                    out.data_mut()[r * total + off..r * total + off + c]
                        .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
                off += c;
            }
        }
        Op::Sum(a) => {
            out.data_mut()[0] = val(*a).data().iter().sum();
        }
    }

    Ok(())
}

/// Smooth clamp: identity up to m - eps, quadratic blend on the band,
/// constant +-m beyond. C1, monotone, slope 1 - t across the band.
pub fn soft_clamp_band_scalar(x: f64, m: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        return x.clamp(-m, m);
    }
    let s = if x < 0.0 { -1.0 } else { 1.0 };
    let u = x.abs();
    let a = m - eps;
    let b = m + eps;
    let y = if u <= a {
        u
    } else if u >= b {
        m
    } else {
        u - (u - a) * (u - a) / (4.0 * eps)
    };
    s * y
}

/// Derivative of [`soft_clamp_band_scalar`] in x.
pub fn soft_clamp_band_deriv(x: f64, m: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        return if x.abs() <= m { 1.0 } else { 0.0 };
    }
    let u = x.abs();
    let a = m - eps;
    let b = m + eps;
    if u <= a {
        1.0
    } else if u >= b {
        0.0
    } else {
        1.0 - (u - a) / (2.0 * eps)
    }
}

#[allow(clippy::too_many_arguments)]
fn backprop_node(
    nodes: &[Node],
    id: NodeId,
    params: &ParamStore,
    inputs: &InputBindings,
    ws: &Workspace,
    adj: &Tensor,
    adjoints: &mut [Tensor],
    grads: &mut GradientVector,
) {
    let val = |j: NodeId| -> &Tensor {
        match &nodes[j].op {
            Op::Param(s) => params.value(*s),
            Op::Input(s) => inputs.value(*s),
            Op::Const(t) => t,
            _ => &ws.values[j],
        }
    };

    match &nodes[id].op {
        Op::Input(_) | Op::Const(_) => {}
        Op::Param(s) => {
            for (g, a) in grads.entries[*s].1.data_mut().iter_mut().zip(adj.data()) {
                *g += a;
            }
        }
        Op::Add(a, b) => {
            for (x, d) in adjoints[*a].data_mut().iter_mut().zip(adj.data()) {
                *x += d;
            }
            for (x, d) in adjoints[*b].data_mut().iter_mut().zip(adj.data()) {
                *x += d;
            }
        }
        Op::Sub(a, b) => {
            for (x, d) in adjoints[*a].data_mut().iter_mut().zip(adj.data()) {
                *x += d;
            }
            for (x, d) in adjoints[*b].data_mut().iter_mut().zip(adj.data()) {
                *x -= d;
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            for ((x, d), y) in adjoints[*a].data_mut().iter_mut().zip(adj.data()).zip(bv.data()) {
                *x += d * y;
            }
            for ((x, d), y) in adjoints[*b].data_mut().iter_mut().zip(adj.data()).zip(av.data()) {
                *x += d * y;
            }
        }
        Op::AddRow(mat, v) => {
            let d = nodes[*v].shape[0];
            for (x, a) in adjoints[*mat].data_mut().iter_mut().zip(adj.data()) {
                *x += a;
            }
            for row in adj.data().chunks(d) {
                for (x, a) in adjoints[*v].data_mut().iter_mut().zip(row) {
                    *x += a;
                }
            }
        }
        Op::MulRow(mat, v) => {
            let d = nodes[*v].shape[0];
            let mv = val(*mat).clone();
            let vv = val(*v).clone();
            for (xrow, arow) in adjoints[*mat].data_mut().chunks_mut(d).zip(adj.data().chunks(d)) {
                for ((x, a), y) in xrow.iter_mut().zip(arow).zip(vv.data()) {
                    *x += a * y;
                }
            }
            for (arow, mrow) in adj.data().chunks(d).zip(mv.data().chunks(d)) {
                for ((x, a), y) in adjoints[*v].data_mut().iter_mut().zip(arow).zip(mrow) {
                    *x += a * y;
                }
            }
        }
        Op::MatMul(a, b) => {
            // C = A B; dA += dC B^T, dB += A^T dC
            let av = val(*a).clone();
            let bv = val(*b).clone();
            let (m, k) = av.dims2().unwrap();
            let (_, n) = bv.dims2().unwrap();
            {
                let da = adjoints[*a].data_mut();
                for i in 0..m {
                    let dcrow = &adj.data()[i * n..(i + 1) * n];
                    for l in 0..k {
                        da[i * k + l] += dot(dcrow, &bv.data()[l * n..(l + 1) * n]);
                    }
                }
            }
            {
                let db = adjoints[*b].data_mut();
                for i in 0..m {
                    let dcrow = &adj.data()[i * n..(i + 1) * n];
                    for l in 0..k {
                        axpy(&mut db[l * n..(l + 1) * n], av.data()[i * k + l], dcrow);
                    }
                }
            }
        }
        Op::MatMulTransB(a, b) => {
            // C = A B^T; dA += dC B, dB += dC^T A
            let av = val(*a).clone();
            let bv = val(*b).clone();
            let (m, k) = av.dims2().unwrap();
            let (n, _) = bv.dims2().unwrap();
            {
                let da = adjoints[*a].data_mut();
                for i in 0..m {
                    for j in 0..n {
                        let d = adj.data()[i * n + j];
                        axpy(&mut da[i * k..(i + 1) * k], d, &bv.data()[j * k..(j + 1) * k]);
                    }
                }
            }
            {
                let db = adjoints[*b].data_mut();
                for i in 0..m {
                    for j in 0..n {
                        let d = adj.data()[i * n + j];
                        axpy(&mut db[j * k..(j + 1) * k], d, &av.data()[i * k..(i + 1) * k]);
                    }
                }
            }
        }
        Op::MatVec(a, x) => {
            let av = val(*a).clone();
            let xv = val(*x).clone();
            let (m, k) = av.dims2().unwrap();
            {
                let da = adjoints[*a].data_mut();
                for i in 0..m {
                    axpy(&mut da[i * k..(i + 1) * k], adj.data()[i], xv.data());
                }
            }
            {
                let dx = adjoints[*x].data_mut();
                for i in 0..m {
                    axpy(dx, adj.data()[i], &av.data()[i * k..(i + 1) * k]);
                }
            }
        }
        Op::Scale(a, s) => {
            for (x, d) in adjoints[*a].data_mut().iter_mut().zip(adj.data()) {
                *x += s * d;
            }
        }
        Op::Tanh(a) => {
            let yv = ws.values[id].clone();
            for ((x, d), y) in adjoints[*a].data_mut().iter_mut().zip(adj.data()).zip(yv.data()) {
                *x += d * (1.0 - y * y);
            }
        }
        Op::Softsign(a) => {
            let xv = val(*a).clone();
            for ((g, d), x) in adjoints[*a].data_mut().iter_mut().zip(adj.data()).zip(xv.data()) {
                let t = 1.0 + x.abs();
                *g += d / (t * t);
            }
        }
        Op::SoftmaxRows(a) => {
            let yv = ws.values[id].clone();
            let (_, n) = yv.dims2().unwrap();
            for ((grow, drow), yrow) in adjoints[*a]
                .data_mut()
                .chunks_mut(n)
                .zip(adj.data().chunks(n))
                .zip(yv.data().chunks(n))
            {
                let inner = dot(drow, yrow);
                for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                    *g += y * (d - inner);
                }
            }
        }
        Op::LayerNormRows(a) => {
            let xv = val(*a).clone();
            let yv = ws.values[id].clone();
            let (_, n) = xv.dims2().unwrap();
            for (((grow, drow), xrow), yrow) in adjoints[*a]
                .data_mut()
                .chunks_mut(n)
                .zip(adj.data().chunks(n))
                .zip(xv.data().chunks(n))
                .zip(yv.data().chunks(n))
            {
                let mean = xrow.iter().sum::<f64>() / n as f64;
                let var = xrow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                let mean_d = drow.iter().sum::<f64>() / n as f64;
                let mean_dy = dot(drow, yrow) / n as f64;
                for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                    *g += inv * (d - mean_d - y * mean_dy);
                }
            }
        }
        Op::BoundTanh(a, m) => {
            let yv = ws.values[id].clone();
            for ((g, d), y) in adjoints[*a].data_mut().iter_mut().zip(adj.data()).zip(yv.data()) {
                let t = y / m;
                *g += d * (1.0 - t * t);
            }
        }
        Op::HardClamp(a, m) => {
            let xv = val(*a).clone();
            for ((g, d), x) in adjoints[*a].data_mut().iter_mut().zip(adj.data()).zip(xv.data()) {
                if x.abs() <= *m {
                    *g += d;
                }
            }
        }
        Op::ClampSte(a, _) => {
            // Straight-through: pass the upstream gradient unchanged.
            for (g, d) in adjoints[*a].data_mut().iter_mut().zip(adj.data()) {
                *g += d;
            }
        }
        Op::SoftClampBand(a, m, eps) => {
            let xv = val(*a).clone();
            for ((g, d), x) in adjoints[*a].data_mut().iter_mut().zip(adj.data()).zip(xv.data()) {
                *g += d * soft_clamp_band_deriv(*x, *m, *eps);
            }
        }
        Op::L2Clip(a, max_norm) => {
            let xv = val(*a).clone();
            let norm = xv.l2_norm();
            if norm <= *max_norm {
                for (g, d) in adjoints[*a].data_mut().iter_mut().zip(adj.data()) {
                    *g += d;
                }
            } else {
                // y = M x / |x|; J = (M/|x|)(I - x x^T / |x|^2)
                let s = max_norm / norm;
                let xd = dot(xv.data(), adj.data()) / (norm * norm);
                for ((g, d), x) in adjoints[*a].data_mut().iter_mut().zip(adj.data()).zip(xv.data())
                {
                    *g += s * (d - x * xd);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let rows = nodes[id].shape[0];
            let total = nodes[id].shape[1];
            let mut off = 0;
            for &p in parts {
                let c = nodes[p].shape[1];
                let gp = adjoints[p].data_mut();
                for r in 0..rows {
                    for j in 0..c {
                        gp[r * c + j] += adj.data()[r * total + off + j];
                    }
                }
                off += c;
            }
        }
        Op::Sum(a) => {
            let d = adj.data()[0];
            for g in adjoints[*a].data_mut() {
                *g += d;
            }
        }
    }
}
