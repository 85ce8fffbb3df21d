use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;

use super::{GradientMap, Scalar, Tensor, TensorError};

#[derive(Clone)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, S),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    Expand(usize),
    Concat(Vec<usize>),
    SliceCols { input: usize, start: usize },
    Softmax(usize),
    SoftmaxCe { logits: usize, labels: Rc<[usize]> },
    EmbedMean { table: usize, seqs: Rc<Vec<Vec<usize>>> },
    EmbedScatter { grad: usize, seqs: Rc<Vec<Vec<usize>>> },
    FrobeniusSq(usize),
    GradReverse(usize, S),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Expand(_) => "expand",
            Op::Concat(_) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::EmbedMean { .. } => "embed_mean",
            Op::EmbedScatter { .. } => "embed_scatter",
            Op::FrobeniusSq(_) => "frobenius_sq",
            Op::GradReverse(..) => "grad_reverse",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::Softmax(a)
            | Op::FrobeniusSq(a)
            | Op::GradReverse(a, _) => vec![*a],
            Op::SliceCols { input, .. } => vec![*input],
            Op::Concat(parts) => parts.clone(),
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::EmbedMean { table, .. } => vec![*table],
            Op::EmbedScatter { grad, .. } => vec![*grad],
        }
    }
}

struct Node<S> {
    op: Op<S>,
    value: Rc<Tensor<S>>,
    requires_grad: bool,
    param: Option<String>,
}

/// Records operations for reverse-mode differentiation.
pub struct Graph<S = f64> {
    nodes: RefCell<Vec<Node<S>>>,
    params: RefCell<HashMap<String, usize>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S = f64> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<S>, value: Tensor<S>) -> Result<Var<'_, S>, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node { op, value: Rc::new(value), requires_grad, param: None });
        Ok(Var { graph: self, id: nodes.len() - 1 })
    }

    fn value_rc(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A grad-tracked leaf. Repeated calls with the same id return the
    /// existing node and ignore `value`.
    pub fn param(&self, id: &str, value: Tensor<S>) -> Var<'_, S> {
        if let Some(&existing) = self.params.borrow().get(id) {
            return Var { graph: self, id: existing };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, value: Rc::new(value), requires_grad: true, param: Some(id.to_string()) });
        let idx = nodes.len() - 1;
        self.params.borrow_mut().insert(id.to_string(), idx);
        Var { graph: self, id: idx }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, value: Rc::new(value), requires_grad: false, param: None });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub fn param_var(&self, id: &str) -> Option<Var<'_, S>> {
        self.params.borrow().get(id).map(|&idx| Var { graph: self, id: idx })
    }

    /// Gradient values of `loss` with respect to the named parameters.
    ///
    /// Nodes created by the backward pass are discarded afterwards unless
    /// `retain_graph` is set. Use [`Graph::grad_vars`] to differentiate the
    /// result again.
    pub fn backward(&self, loss: Var<'_, S>, wrt: &[&str], retain_graph: bool) -> Result<GradientMap<S>, TensorError> {
        let mark = self.len();
        let result = self.grad_vars(loss, wrt).map(|vars| {
            let mut out = GradientMap::new();
            for (k, v) in vars {
                out.insert(k, v.value());
            }
            out
        });
        if !retain_graph {
            self.nodes.borrow_mut().truncate(mark);
        }
        result
    }

    /// Gradients as graph nodes; they are grad-tracked wherever they depend on
    /// a parameter, so they can be differentiated again.
    pub fn grad_vars<'g>(&'g self, loss: Var<'g, S>, wrt: &[&str]) -> Result<BTreeMap<String, Var<'g, S>>, TensorError> {
        if wrt.is_empty() {
            return Err(TensorError::Contract("backward needs at least one parameter".into()));
        }
        if loss.value_rc().len() != 1 {
            return Err(TensorError::Contract(format!("backward needs a 1-element scalar, got shape {:?}", loss.shape())));
        }
        let mut out = BTreeMap::new();
        if !self.nodes.borrow()[loss.id].requires_grad {
            return Ok(out);
        }
        let root = loss.id;
        let mut grads: Vec<Option<usize>> = vec![None; root + 1];
        grads[root] = Some(self.constant(Tensor::ones(loss.shape().as_slice())).id);

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx] else { continue };
            let (op, requires_grad) = {
                let nodes = self.nodes.borrow();
                (nodes[idx].op.clone(), nodes[idx].requires_grad)
            };
            if !requires_grad {
                continue;
            }
            let g = Var { graph: self, id: g };
            for (parent, contrib) in self.vjp(idx, &op, g)? {
                if !self.nodes.borrow()[parent].requires_grad {
                    continue;
                }
                grads[parent] = Some(match grads[parent] {
                    Some(prev) => Var { graph: self, id: prev }.add(contrib)?.id,
                    None => contrib.id,
                });
            }
        }

        let params = self.params.borrow();
        for name in wrt {
            if let Some(&idx) = params.get(*name) {
                if idx <= root {
                    if let Some(g) = grads[idx] {
                        out.insert((*name).to_string(), Var { graph: self, id: g });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `idx` for each parent, built from
    /// forward ops so they stay differentiable.
    fn vjp<'g>(&'g self, idx: usize, op: &Op<S>, g: Var<'g, S>) -> Result<Vec<(usize, Var<'g, S>)>, TensorError> {
        let var = |id| Var { graph: self, id };
        let node = var(idx);
        Ok(match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (va, vb) = (var(*a), var(*b));
                vec![(*a, g.matmul(vb.t()?)?), (*b, va.t()?.matmul(g)?)]
            }
            Op::Transpose(a) => vec![(*a, g.t()?)],
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => vec![(*a, g), (*b, g.scale(S::lit(-1.0))?)],
            Op::Mul(a, b) => vec![(*a, g.mul(var(*b))?), (*b, g.mul(var(*a))?)],
            Op::AddRow(a, b) => {
                let n = g.shape()[0];
                let ones = self.constant(Tensor::ones(&[1, n]));
                vec![(*a, g), (*b, ones.matmul(g)?)]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c)?)],
            Op::Tanh(a) => {
                let ones = self.constant(Tensor::ones(&node.shape()));
                let deriv = ones.sub(node.mul(node)?)?;
                vec![(*a, g.mul(deriv)?)]
            }
            Op::Relu(a) => {
                let mask = self.value_rc(*a).map(|v| if v > S::zero() { S::one() } else { S::zero() });
                vec![(*a, g.mul(self.constant(mask))?)]
            }
            Op::Sum(a) => vec![(*a, g.expand(&var(*a).shape())?)],
            Op::Expand(a) => vec![(*a, g.sum()?)],
            Op::Concat(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = var(p).shape()[1];
                    out.push((p, g.slice_cols(start, w)?));
                    start += w;
                }
                out
            }
            Op::SliceCols { input, start } => {
                let in_shape = var(*input).shape();
                let (n, m) = (in_shape[0], in_shape[1]);
                let w = g.shape()[1];
                let mut pieces = Vec::new();
                if *start > 0 {
                    pieces.push(self.constant(Tensor::zeros(&[n, *start])));
                }
                pieces.push(g);
                if start + w < m {
                    pieces.push(self.constant(Tensor::zeros(&[n, m - start - w])));
                }
                vec![(*input, Var::concat(&pieces)?)]
            }
            Op::Softmax(a) => {
                let c = node.shape()[1];
                let ones = self.constant(Tensor::ones(&[c, c]));
                let row_dot = node.mul(g)?.matmul(ones)?;
                vec![(*a, node.mul(g.sub(row_dot)?)?)]
            }
            Op::SoftmaxCe { logits, labels } => {
                let lv = var(*logits);
                let shape = lv.shape();
                let (n, c) = (shape[0], shape[1]);
                let mut onehot = Tensor::zeros(&[n, c]);
                for (i, &y) in labels.iter().enumerate() {
                    onehot.data_mut()[i * c + y] = S::one();
                }
                let diff = lv.softmax()?.sub(self.constant(onehot))?;
                let scaled = g.expand(&shape)?.mul(diff)?.scale(S::one() / S::lit(n as f64))?;
                vec![(*logits, scaled)]
            }
            Op::EmbedMean { table, seqs } => {
                let vocab = var(*table).shape()[0];
                vec![(*table, g.embed_scatter(Rc::clone(seqs), vocab)?)]
            }
            Op::EmbedScatter { grad, seqs } => vec![(*grad, g.embed_mean_shared(Rc::clone(seqs))?)],
            Op::FrobeniusSq(a) => {
                let va = var(*a);
                vec![(*a, g.expand(&va.shape())?.mul(va)?.scale(S::lit(2.0))?)]
            }
            Op::GradReverse(a, lambda) => vec![(*a, g.scale(-*lambda)?)],
        })
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn index(&self) -> usize {
        self.id
    }

    fn value_rc(&self) -> Rc<Tensor<S>> {
        self.graph.value_rc(self.id)
    }

    pub fn value(&self) -> Tensor<S> {
        (*self.value_rc()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_rc().shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> S {
        self.value_rc().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn param_id(&self) -> Option<String> {
        self.graph.nodes.borrow()[self.id].param.clone()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'g, S> {
        self.graph.constant(self.value())
    }

    fn same_graph(&self, other: &Var<'g, S>) {
        assert!(std::ptr::eq(self.graph, other.graph), "operands belong to different graphs");
    }

    pub fn matmul(self, other: Var<'g, S>) -> Result<Var<'g, S>, TensorError> {
        self.same_graph(&other);
        let v = self.value_rc().matmul(&other.value_rc())?;
        self.graph.push(Op::MatMul(self.id, other.id), v)
    }

    pub fn t(self) -> Result<Var<'g, S>, TensorError> {
        let v = self.value_rc().transpose()?;
        self.graph.push(Op::Transpose(self.id), v)
    }

    pub fn add(self, other: Var<'g, S>) -> Result<Var<'g, S>, TensorError> {
        self.same_graph(&other);
        let v = self.value_rc().zip_map(&other.value_rc(), "add", |a, b| a + b)?;
        self.graph.push(Op::Add(self.id, other.id), v)
    }

    pub fn sub(self, other: Var<'g, S>) -> Result<Var<'g, S>, TensorError> {
        self.same_graph(&other);
        let v = self.value_rc().zip_map(&other.value_rc(), "sub", |a, b| a - b)?;
        self.graph.push(Op::Sub(self.id, other.id), v)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g, S>) -> Result<Var<'g, S>, TensorError> {
        self.same_graph(&other);
        let v = self.value_rc().zip_map(&other.value_rc(), "mul", |a, b| a * b)?;
        self.graph.push(Op::Mul(self.id, other.id), v)
    }

    /// Adds a `[1, m]` bias row to each row of an `[n, m]` matrix. The only
    /// broadcasting op.
    pub fn add_row(self, bias: Var<'g, S>) -> Result<Var<'g, S>, TensorError> {
        self.same_graph(&bias);
        let b = bias.value_rc();
        if b.shape().len() != 2 || b.shape()[0] != 1 {
            return Err(TensorError::shape("add_row", format!("bias must be [1, m], got {:?}", b.shape())));
        }
        let v = self.value_rc().add_row(&b)?;
        self.graph.push(Op::AddRow(self.id, bias.id), v)
    }

    pub fn scale(self, c: S) -> Result<Var<'g, S>, TensorError> {
        let v = self.value_rc().map(|x| x * c);
        self.graph.push(Op::Scale(self.id, c), v)
    }

    pub fn tanh(self) -> Result<Var<'g, S>, TensorError> {
        let v = self.value_rc().map(|x| x.tanh());
        self.graph.push(Op::Tanh(self.id), v)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Result<Var<'g, S>, TensorError> {
        let v = self.value_rc().map(|x| if x > S::zero() { x } else { S::zero() });
        self.graph.push(Op::Relu(self.id), v)
    }

    pub fn sum(self) -> Result<Var<'g, S>, TensorError> {
        let v = Tensor::scalar(self.value_rc().sum());
        self.graph.push(Op::Sum(self.id), v)
    }

    pub fn mean(self) -> Result<Var<'g, S>, TensorError> {
        let n = S::lit(self.value_rc().len() as f64);
        self.sum()?.scale(S::one() / n)
    }

    /// Broadcasts a 1-element node to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'g, S>, TensorError> {
        let v = self.value_rc();
        if v.len() != 1 {
            return Err(TensorError::shape("expand", format!("source must be 1-element, got {:?}", v.shape())));
        }
        let out = Tensor::filled(shape, v.item());
        self.graph.push(Op::Expand(self.id), out)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(parts: &[Var<'g, S>]) -> Result<Var<'g, S>, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::shape("concat", "no operands"))?;
        let values: Vec<_> = parts
            .iter()
            .map(|p| {
                first.same_graph(p);
                p.value_rc()
            })
            .collect();
        let refs: Vec<&Tensor<S>> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_cols(&refs)?;
        first.graph.push(Op::Concat(parts.iter().map(|p| p.id).collect()), v)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g, S>, TensorError> {
        let v = self.value_rc().slice_cols(start, len)?;
        self.graph.push(Op::SliceCols { input: self.id, start }, v)
    }

    pub fn softmax(self) -> Result<Var<'g, S>, TensorError> {
        let v = self.value_rc().softmax_rows()?;
        self.graph.push(Op::Softmax(self.id), v)
    }

    /// Mean over rows of `logsumexp(row) - row[label]`.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'g, S>, TensorError> {
        let per_row = self.value_rc().cross_entropy_rows(labels)?;
        let n = S::lit(per_row.len() as f64);
        let mean = per_row.iter().fold(S::zero(), |a, &b| a + b) / n;
        self.graph.push(Op::SoftmaxCe { logits: self.id, labels: labels.into() }, Tensor::scalar(mean))
    }

    /// Rows are means of embedding-table rows selected by each token sequence.
    /// An empty sequence yields a zero row.
    pub fn embed_mean(self, seqs: &[Vec<usize>]) -> Result<Var<'g, S>, TensorError> {
        self.embed_mean_shared(Rc::new(seqs.to_vec()))
    }

    fn embed_mean_shared(self, seqs: Rc<Vec<Vec<usize>>>) -> Result<Var<'g, S>, TensorError> {
        let table = self.value_rc();
        if table.shape().len() != 2 {
            return Err(TensorError::shape("embed_mean", format!("table must be a matrix, got {:?}", table.shape())));
        }
        if seqs.is_empty() {
            return Err(TensorError::shape("embed_mean", "empty batch"));
        }
        let (vocab, dim) = (table.shape()[0], table.shape()[1]);
        let mut out = vec![S::zero(); seqs.len() * dim];
        for (i, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                continue;
            }
            let inv = S::one() / S::lit(seq.len() as f64);
            let row = &mut out[i * dim..(i + 1) * dim];
            for &tok in seq {
                if tok >= vocab {
                    return Err(TensorError::shape("embed_mean", format!("token {tok} outside vocabulary of {vocab}")));
                }
                for (o, &e) in row.iter_mut().zip(table.row(tok)) {
                    *o = *o + e * inv;
                }
            }
        }
        let v = Tensor::new(&[seqs.len(), dim], out)?;
        self.graph.push(Op::EmbedMean { table: self.id, seqs }, v)
    }

    /// Transpose of [`Var::embed_mean`]: scatters row gradients back onto a
    /// `[vocab, dim]` table.
    fn embed_scatter(self, seqs: Rc<Vec<Vec<usize>>>, vocab: usize) -> Result<Var<'g, S>, TensorError> {
        let g = self.value_rc();
        let dim = g.shape()[1];
        let mut out = vec![S::zero(); vocab * dim];
        for (i, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                continue;
            }
            let inv = S::one() / S::lit(seq.len() as f64);
            for &tok in seq {
                let dst = &mut out[tok * dim..(tok + 1) * dim];
                for (o, &v) in dst.iter_mut().zip(g.row(i)) {
                    *o = *o + v * inv;
                }
            }
        }
        let v = Tensor::new(&[vocab, dim], out)?;
        self.graph.push(Op::EmbedScatter { grad: self.id, seqs }, v)
    }

    pub fn frobenius_sq(self) -> Result<Var<'g, S>, TensorError> {
        let v = self.value_rc();
        let total = v.data().iter().fold(S::zero(), |a, &x| a + x * x);
        self.graph.push(Op::FrobeniusSq(self.id), Tensor::scalar(total))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(self, lambda: S) -> Result<Var<'g, S>, TensorError> {
        let v = self.value();
        self.graph.push(Op::GradReverse(self.id, lambda), v)
    }
}
