use std::rc::Rc;

use smallvec::{smallvec, SmallVec};

use super::tensor::{self, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded on a node. Row indices and segment ids are shared via
/// `Rc` so that backward rules can reuse them without copying.
#[derive(Clone, Debug)]
pub enum Op {
    Input,
    /// `op(a) * op(b)` where `op` optionally transposes.
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    Div,
    /// `scale * x + shift`
    Affine { scale: f64, shift: f64 },
    Sigmoid,
    Log,
    Clamp { lo: f64, hi: f64 },
    /// `g * 1[lo < x < hi]`; parents are `[g, x]`.
    ClampGrad { lo: f64, hi: f64 },
    /// Softmax over the rows of a column vector, independently per segment.
    Softmax { segments: Rc<[usize]>, n_segments: usize },
    Sum,
    Mean,
    /// Broadcast a single element to `shape`.
    Expand { shape: Vec<usize> },
    SumRows,
    BroadcastRows { rows: usize },
    SumCols,
    BroadcastCols { cols: usize },
    ConcatCols,
    SliceCols { start: usize, width: usize },
    PadCols { start: usize, total: usize },
    Gather { index: Rc<[usize]> },
    ScatterAdd { index: Rc<[usize]>, rows: usize },
    Detach,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Affine { .. } => "scale",
            Op::Sigmoid => "sigmoid",
            Op::Log => "log",
            Op::Clamp { .. } => "clamp",
            Op::ClampGrad { .. } => "clamp_grad",
            Op::Softmax { .. } => "softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Expand { .. } => "expand",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::ConcatCols => "concat",
            Op::SliceCols { .. } => "slice",
            Op::PadCols { .. } => "pad",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Detach => "detach",
        }
    }
}

/// Parent handles of a node, stored inline for up to two.
pub type Parents = SmallVec<[NodeId; 2]>;

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub parents: Parents,
    pub value: Tensor,
    /// False for nodes built while gradient tracking was off, and for
    /// detached nodes. Gradients never flow through an untracked node.
    pub tracked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradEntry {
    pub param: NodeId,
    pub grad: NodeId,
    /// False when the parameter does not influence the differentiated
    /// scalar; `grad` is then a zero tensor.
    pub reachable: bool,
}

/// Gradients of one scalar, keyed by the requested handles in request order.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    entries: Vec<GradEntry>,
}

impl GradMap {
    pub fn entries(&self) -> &[GradEntry] {
        &self.entries
    }

    pub fn get(&self, param: NodeId) -> Option<NodeId> {
        self.entries.iter().find(|e| e.param == param).map(|e| e.grad)
    }

    pub fn grads(&self) -> Vec<NodeId> {
        self.entries.iter().map(|e| e.grad).collect()
    }

    pub fn tensors(&self, graph: &Graph) -> Vec<Tensor> {
        self.entries.iter().map(|e| graph.value(e.grad).clone()).collect()
    }

    pub fn all_reachable(&self) -> bool {
        self.entries.iter().all(|e| e.reachable)
    }
}

/// Define-by-run computation graph. Values are computed eagerly as nodes are
/// added, so node order is a valid evaluation order.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    tracking: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), tracking: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    /// Toggle gradient tracking for nodes created afterwards. Returns the
    /// previous setting.
    pub fn set_tracking(&mut self, on: bool) -> bool {
        std::mem::replace(&mut self.tracking, on)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Input, parents: Parents::new(), value, tracked: true });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, parents: Parents, value: Tensor) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name(), node: id });
        }
        let tracked = self.tracking
            && !matches!(op, Op::Detach)
            && parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { op, parents, value, tracked });
        Ok(NodeId(id))
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dims()
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.dims(a) == self.dims(b) {
            Ok(())
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    // -- op builders --------------------------------------------------------

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let ka = if ta { ar } else { ac };
        let kb = if tb { bc } else { br };
        if ka != kb {
            return Err(self.mismatch("matmul", a, b));
        }
        let v = tensor::matmul(self.value(a), self.value(b), ta, tb);
        self.push(Op::MatMul { ta, tb }, smallvec![a, b], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add, smallvec![a, b], v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub, smallvec![a, b], v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul, smallvec![a, b], v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(Op::Div, smallvec![a, b], v)
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let v = self.value(x).map(|t| scale * t + shift);
        self.push(Op::Affine { scale, shift }, smallvec![x], v)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(tensor::sigmoid);
        self.push(Op::Sigmoid, smallvec![x], v)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::ln);
        self.push(Op::Log, smallvec![x], v)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.value(x).map(|t| t.clamp(lo, hi));
        self.push(Op::Clamp { lo, hi }, smallvec![x], v)
    }

    fn clamp_grad(&mut self, g: NodeId, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.value(g).zip_map(self.value(x), |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 });
        self.push(Op::ClampGrad { lo, hi }, smallvec![g, x], v)
    }

    /// Softmax of a column vector, taken separately within each segment.
    pub fn softmax_segments(&mut self, x: NodeId, segments: Rc<[usize]>, n_segments: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if c != 1 || segments.len() != r {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![segments.len(), 1],
            });
        }
        self.check_index("softmax", &segments, n_segments)?;
        let v = tensor::segment_softmax(self.value(x), &segments, n_segments);
        self.push(Op::Softmax { segments, n_segments }, smallvec![x], v)
    }

    /// Softmax over all elements of a column vector.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let r = self.dims(x).0;
        self.softmax_segments(x, vec![0; r].into(), 1)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum, smallvec![x], v)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(Op::Mean, smallvec![x], v)
    }

    pub fn expand(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.value(x).len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "expand",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let v = Tensor::filled(shape, self.value(x).item());
        self.push(Op::Expand { shape: shape.to_vec() }, smallvec![x], v)
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::sum_rows(self.value(x));
        self.push(Op::SumRows, smallvec![x], v)
    }

    /// Repeat a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        if self.dims(x).0 != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![1, self.dims(x).1],
            });
        }
        let v = tensor::broadcast_rows(self.value(x), rows);
        self.push(Op::BroadcastRows { rows }, smallvec![x], v)
    }

    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::sum_cols(self.value(x));
        self.push(Op::SumCols, smallvec![x], v)
    }

    /// Repeat an `m x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, x: NodeId, cols: usize) -> Result<NodeId> {
        if self.dims(x).1 != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_cols",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![self.dims(x).0, 1],
            });
        }
        let v = tensor::broadcast_cols(self.value(x), cols);
        self.push(Op::BroadcastCols { cols }, smallvec![x], v)
    }

    /// Add a `1 x n` bias row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let rows = self.dims(x).0;
        let b = self.broadcast_rows(bias, rows)?;
        self.add(x, b)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.dims(parts[0]).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).0 != rows) {
            return Err(self.mismatch("concat", parts[0], bad));
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&values);
        self.push(Op::ConcatCols, parts.into(), v)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if start + width > c {
            return Err(AutodiffError::ShapeMismatch { op: "slice", lhs: vec![r, c], rhs: vec![r, start + width] });
        }
        let v = tensor::slice_cols(self.value(x), start, width);
        self.push(Op::SliceCols { start, width }, smallvec![x], v)
    }

    fn pad_cols(&mut self, x: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let v = tensor::pad_cols(self.value(x), start, total);
        self.push(Op::PadCols { start, total }, smallvec![x], v)
    }

    fn check_index(&self, op: &'static str, index: &[usize], rows: usize) -> Result<()> {
        match index.iter().find(|&&i| i >= rows) {
            Some(&i) => Err(AutodiffError::IndexOutOfRange { op, index: i, rows }),
            None => Ok(()),
        }
    }

    /// Select rows of `x` by index; rows may repeat.
    pub fn gather(&mut self, x: NodeId, index: Rc<[usize]>) -> Result<NodeId> {
        self.check_index("gather", &index, self.dims(x).0)?;
        let v = tensor::gather_rows(self.value(x), &index);
        self.push(Op::Gather { index }, smallvec![x], v)
    }

    /// Row `i` of `x` is added into output row `index[i]`.
    pub fn scatter_add(&mut self, x: NodeId, index: Rc<[usize]>, rows: usize) -> Result<NodeId> {
        if index.len() != self.dims(x).0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![index.len(), self.dims(x).1],
            });
        }
        self.check_index("scatter_add", &index, rows)?;
        let v = tensor::scatter_add_rows(self.value(x), &index, rows);
        self.push(Op::ScatterAdd { index, rows }, smallvec![x], v)
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        self.push(Op::Detach, smallvec![x], v)
    }

    /// `sum(a * b)` as a `[1]` node.
    pub fn inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    // -- reverse mode -------------------------------------------------------

    /// Reverse-mode gradient of `output` (a single-element node) with respect
    /// to each handle in `wrt`.
    ///
    /// Backward rules are recorded as ordinary nodes. With `create_graph` the
    /// returned gradients stay tracked and can be differentiated again;
    /// without it they are constants.
    pub fn gradient(&mut self, output: NodeId, wrt: &[NodeId], create_graph: bool) -> Result<GradMap> {
        if self.value(output).len() != 1 {
            return Err(AutodiffError::NotScalar(self.value(output).shape().to_vec()));
        }
        let end = output.0 + 1;
        let mut depends = vec![false; end];
        for w in wrt {
            if w.0 < end {
                depends[w.0] = true;
            }
        }
        for i in 0..end {
            if !depends[i] && self.nodes[i].tracked {
                depends[i] = self.nodes[i].parents.iter().any(|p| depends[p.0]);
            }
        }
        let mut needed = vec![false; end];
        needed[output.0] = depends[output.0];
        for i in (0..end).rev() {
            if needed[i] && self.nodes[i].tracked {
                for p in &self.nodes[i].parents {
                    if depends[p.0] {
                        needed[p.0] = true;
                    }
                }
            }
        }

        let prev = self.set_tracking(create_graph);
        let result = self.backward(output, &needed, wrt);
        self.set_tracking(prev);
        result
    }

    fn backward(&mut self, output: NodeId, needed: &[bool], wrt: &[NodeId]) -> Result<GradMap> {
        let end = output.0 + 1;
        let mut adj: Vec<Option<NodeId>> = vec![None; end];
        if needed[output.0] {
            let shape = self.value(output).shape().to_vec();
            adj[output.0] = Some(self.input(Tensor::filled(&shape, 1.0)));
        }
        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !needed[i] || !self.nodes[i].tracked {
                continue;
            }
            let parents = self.nodes[i].parents.clone();
            for (slot, p) in parents.iter().enumerate() {
                if !needed[p.0] {
                    continue;
                }
                if let Some(contrib) = self.vjp(NodeId(i), g, slot)? {
                    adj[p.0] = Some(match adj[p.0] {
                        None => contrib,
                        Some(acc) => self.add(acc, contrib)?,
                    });
                }
            }
        }

        let mut entries: Vec<GradEntry> = Vec::with_capacity(wrt.len());
        for &w in wrt {
            if entries.iter().any(|e| e.param == w) {
                continue;
            }
            let found = if w.0 < end { adj[w.0] } else { None };
            let entry = match found {
                Some(grad) => GradEntry { param: w, grad, reachable: true },
                None => {
                    let shape = self.value(w).shape().to_vec();
                    let grad = self.input(Tensor::zeros(&shape));
                    GradEntry { param: w, grad, reachable: false }
                }
            };
            entries.push(entry);
        }
        Ok(GradMap { entries })
    }

    /// Adjoint contribution of node `id` to its parent in position `slot`,
    /// given the adjoint `g` of `id`.
    fn vjp(&mut self, id: NodeId, g: NodeId, slot: usize) -> Result<Option<NodeId>> {
        let node = &self.nodes[id.0];
        let op = node.op.clone();
        let parents = node.parents.clone();
        let out = match op {
            Op::Input | Op::Detach => return Ok(None),
            Op::MatMul { ta, tb } => {
                let (a, b) = (parents[0], parents[1]);
                match (slot, ta, tb) {
                    (0, false, _) => self.matmul_t(g, b, false, !tb)?,
                    (0, true, _) => self.matmul_t(b, g, tb, true)?,
                    (_, _, false) => self.matmul_t(a, g, !ta, false)?,
                    (_, _, true) => self.matmul_t(g, a, true, ta)?,
                }
            }
            Op::Add => g,
            Op::Sub => {
                if slot == 0 {
                    g
                } else {
                    self.neg(g)?
                }
            }
            Op::Mul => self.mul(g, parents[1 - slot])?,
            Op::Div => {
                if slot == 0 {
                    self.div(g, parents[1])?
                } else {
                    let t = self.mul(g, id)?;
                    let t = self.div(t, parents[1])?;
                    self.neg(t)?
                }
            }
            Op::Affine { scale, .. } => self.scale(g, scale)?,
            Op::Sigmoid => {
                let om = self.affine(id, -1.0, 1.0)?;
                let d = self.mul(id, om)?;
                self.mul(g, d)?
            }
            Op::Log => self.div(g, parents[0])?,
            Op::Clamp { lo, hi } => self.clamp_grad(g, parents[0], lo, hi)?,
            Op::ClampGrad { lo, hi } => {
                if slot == 0 {
                    self.clamp_grad(g, parents[1], lo, hi)?
                } else {
                    // piecewise constant in x
                    return Ok(None);
                }
            }
            Op::Softmax { segments, n_segments } => {
                let yg = self.mul(id, g)?;
                let s = self.scatter_add(yg, segments.clone(), n_segments)?;
                let b = self.gather(s, segments)?;
                let d = self.sub(g, b)?;
                self.mul(id, d)?
            }
            Op::Sum => {
                let shape = self.value(parents[0]).shape().to_vec();
                self.expand(g, &shape)?
            }
            Op::Mean => {
                let shape = self.value(parents[0]).shape().to_vec();
                let n = self.value(parents[0]).len() as f64;
                let e = self.expand(g, &shape)?;
                self.scale(e, 1.0 / n)?
            }
            Op::Expand { .. } => {
                let s = self.sum(g)?;
                let target = self.value(parents[0]).shape().to_vec();
                if target == [1] {
                    s
                } else {
                    self.expand(s, &target)?
                }
            }
            Op::SumRows => {
                let rows = self.dims(parents[0]).0;
                self.broadcast_rows(g, rows)?
            }
            Op::BroadcastRows { .. } => self.sum_rows(g)?,
            Op::SumCols => {
                let cols = self.dims(parents[0]).1;
                self.broadcast_cols(g, cols)?
            }
            Op::BroadcastCols { .. } => self.sum_cols(g)?,
            Op::ConcatCols => {
                let start: usize = parents[..slot].iter().map(|&p| self.dims(p).1).sum();
                let width = self.dims(parents[slot]).1;
                self.slice_cols(g, start, width)?
            }
            Op::SliceCols { start, .. } => {
                let total = self.dims(parents[0]).1;
                self.pad_cols(g, start, total)?
            }
            Op::PadCols { start, .. } => {
                let width = self.dims(parents[0]).1;
                self.slice_cols(g, start, width)?
            }
            Op::Gather { index } => {
                let rows = self.dims(parents[0]).0;
                self.scatter_add(g, index, rows)?
            }
            Op::ScatterAdd { index, .. } => self.gather(g, index)?,
        };
        Ok(Some(out))
    }

    // -- re-evaluation ------------------------------------------------------

    /// Re-evaluate every node with some input nodes rebound to new values and
    /// return the value of `root`. The recorded graph is left untouched.
    pub fn forward(&self, root: NodeId, bindings: &[(NodeId, Tensor)]) -> Result<Tensor> {
        let mut values: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        for (id, t) in bindings {
            if !matches!(self.nodes[id.0].op, Op::Input) {
                return Err(AutodiffError::NotAnInput(id.0));
            }
            if t.dims() != self.nodes[id.0].value.dims() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "bind",
                    lhs: self.nodes[id.0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            if id.0 <= root.0 {
                values[id.0] = Some(t.clone());
            }
        }
        for i in 0..=root.0 {
            if values[i].is_some() {
                continue;
            }
            let node = &self.nodes[i];
            let arg = |k: usize| values[node.parents[k].0].as_ref().expect("parents precede children");
            let v = match &node.op {
                Op::Input => node.value.clone(),
                Op::MatMul { ta, tb } => tensor::matmul(arg(0), arg(1), *ta, *tb),
                Op::Add => arg(0).zip_map(arg(1), |x, y| x + y),
                Op::Sub => arg(0).zip_map(arg(1), |x, y| x - y),
                Op::Mul => arg(0).zip_map(arg(1), |x, y| x * y),
                Op::Div => arg(0).zip_map(arg(1), |x, y| x / y),
                Op::Affine { scale, shift } => arg(0).map(|t| scale * t + shift),
                Op::Sigmoid => arg(0).map(tensor::sigmoid),
                Op::Log => arg(0).map(f64::ln),
                Op::Clamp { lo, hi } => arg(0).map(|t| t.clamp(*lo, *hi)),
                Op::ClampGrad { lo, hi } => {
                    arg(0).zip_map(arg(1), |g, x| if x > *lo && x < *hi { g } else { 0.0 })
                }
                Op::Softmax { segments, n_segments } => tensor::segment_softmax(arg(0), segments, *n_segments),
                Op::Sum => Tensor::scalar(arg(0).data().iter().sum()),
                Op::Mean => Tensor::scalar(arg(0).data().iter().sum::<f64>() / arg(0).len() as f64),
                Op::Expand { shape } => Tensor::filled(shape, arg(0).item()),
                Op::SumRows => tensor::sum_rows(arg(0)),
                Op::BroadcastRows { rows } => tensor::broadcast_rows(arg(0), *rows),
                Op::SumCols => tensor::sum_cols(arg(0)),
                Op::BroadcastCols { cols } => tensor::broadcast_cols(arg(0), *cols),
                Op::ConcatCols => {
                    let parts: Vec<&Tensor> = (0..node.parents.len()).map(arg).collect();
                    tensor::concat_cols(&parts)
                }
                Op::SliceCols { start, width } => tensor::slice_cols(arg(0), *start, *width),
                Op::PadCols { start, total } => tensor::pad_cols(arg(0), *start, *total),
                Op::Gather { index } => tensor::gather_rows(arg(0), index),
                Op::ScatterAdd { index, rows } => tensor::scatter_add_rows(arg(0), index, *rows),
                Op::Detach => arg(0).clone(),
            };
            if !v.is_finite() {
                return Err(AutodiffError::NonFinite { op: node.op.name(), node: i });
            }
            values[i] = Some(v);
        }
        Ok(values[root.0].take().expect("root evaluated"))
    }
}
