//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records operations eagerly: every op constructor computes the
//! result value immediately and pushes a node describing how to propagate
//! gradients. The tape is rebuilt for every training step. Binary elementwise
//! ops broadcast a scalar operand or a 1-D row vector matching the last axis.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(#[allow(dead_code)] String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    SoftmaxLast(NodeId),
    SumLast(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SliceLast(NodeId, usize, usize),
    ConcatLast(Vec<NodeId>),
    GatherLast(NodeId, Rc<Vec<i64>>),
    Reshape(NodeId),
    Clamp(NodeId, f64, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// How a binary op's operands line up.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    RhsScalar,
    LhsScalar,
    RhsRow,
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Broadcast {
    if a.shape == b.shape {
        Broadcast::Same
    } else if b.is_scalar() {
        Broadcast::RhsScalar
    } else if a.is_scalar() {
        Broadcast::LhsScalar
    } else if b.shape.len() == 1 && b.len() == a.last_dim() {
        Broadcast::RhsRow
    } else {
        panic!(
            "shape mismatch in elementwise op: lhs {:?} vs rhs {:?}",
            a.shape, b.shape
        );
    }
}

fn broadcast_apply(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match broadcast_kind(a, b) {
        Broadcast::Same => a.zip(b, f),
        Broadcast::RhsScalar => {
            let s = b.data[0];
            a.map(|v| f(v, s))
        }
        Broadcast::LhsScalar => {
            let s = a.data[0];
            Tensor { shape: b.shape.clone(), data: b.data.iter().map(|&v| f(s, v)).collect() }
        }
        Broadcast::RhsRow => {
            let d = a.last_dim();
            let mut out = a.data.clone();
            for row in out.chunks_mut(d) {
                for (v, &bv) in row.iter_mut().zip(&b.data) {
                    *v = f(*v, bv);
                }
            }
            Tensor { shape: a.shape.clone(), data: out }
        }
    }
}

/// Reduce an upstream gradient with the output's shape down to `target`'s shape.
fn reduce_to(grad: &Tensor, target: &Tensor) -> Tensor {
    if grad.shape == target.shape {
        return grad.clone();
    }
    if target.is_scalar() {
        return Tensor::scalar(grad.sum());
    }
    // row-vector target: sum over rows
    let d = target.len();
    let mut out = vec![0.0; d];
    for row in grad.data.chunks(d) {
        for (o, &g) in out.iter_mut().zip(row) {
            *o += g;
        }
    }
    Tensor { shape: target.shape.clone(), data: out }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<String, NodeId>,
}

/// Gradients of a scalar root with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a node; zeros if the node is unreachable.
    pub fn wrt(&self, id: NodeId, like: &Tensor) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.shape.clone()),
        }
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.param_grads
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.param_grads
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), param_nodes: BTreeMap::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert!(value.all_finite() || matches!(op, Op::Leaf), "non-finite op result");
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf holding a constant; gradients stop here.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// A leaf bound to a named parameter in the store; gradients accumulate
    /// into the returned map of [`Graph::backward`].
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.param_nodes.get(name) {
            return id;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let id = self.push(value, Op::Param(name.to_string()));
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_apply(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_apply(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_apply(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert!(
            self.value(b).data.iter().all(|&v| v != 0.0),
            "division by zero in graph op"
        );
        let v = broadcast_apply(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let c = self.scalar(s);
        self.add(a, c)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let c = self.scalar(s);
        self.mul(a, c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        assert!(
            self.value(a).data.iter().all(|&v| v > 0.0),
            "ln requires strictly positive input"
        );
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(Tensor::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(Tensor::softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_last();
        self.push(v, Op::SoftmaxLast(a))
    }

    /// Sum over the last axis: [rows, d] -> [rows].
    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let d = t.last_dim();
        let rows = t.row_count();
        let data: Vec<f64> = t.data.chunks(d).map(|c| c.iter().sum()).collect();
        let shape = if t.shape.len() <= 1 { vec![1] } else { vec![rows] };
        self.push(Tensor { shape, data }, Op::SumLast(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice_last(start, len);
        self.push(v, Op::SliceLast(a, start, len))
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_last(&tensors);
        self.push(v, Op::ConcatLast(parts.to_vec()))
    }

    /// Per-row gather along the last axis; index -1 reads as 0 (used for padding).
    pub fn gather_last(&mut self, a: NodeId, indices: Rc<Vec<i64>>) -> NodeId {
        let v = self.value(a).gather_last(&indices);
        self.push(v, Op::GatherLast(a, indices))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(a).reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert!(
            self.value(root).is_scalar(),
            "backward requires a scalar root, got shape {:?}",
            self.value(root).shape
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut param_grads = BTreeMap::new();
        for (name, &id) in &self.param_nodes {
            if let Some(g) = &grads[id.0] {
                param_grads.insert(name.clone(), g.clone());
            }
        }
        Gradients { grads, param_grads }
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn binary_backward(
        &self,
        grads: &mut [Option<Tensor>],
        a: NodeId,
        b: NodeId,
        ga: Tensor,
        gb: Tensor,
    ) {
        let ga = reduce_to(&ga, self.value(a));
        let gb = reduce_to(&gb, self.value(b));
        Self::accumulate(grads, a, ga);
        Self::accumulate(grads, b, gb);
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => self.binary_backward(grads, *a, *b, g.clone(), g.clone()),
            Op::Sub(a, b) => self.binary_backward(grads, *a, *b, g.clone(), g.map(|x| -x)),
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = broadcast_apply(g, bv, |gi, bi| gi * bi);
                let gb = match broadcast_kind(av, bv) {
                    Broadcast::LhsScalar => {
                        Tensor { shape: g.shape.clone(), data: g.data.iter().map(|gi| gi * av.data[0]).collect() }
                    }
                    _ => broadcast_apply(g, av, |gi, ai| gi * ai),
                };
                self.binary_backward(grads, *a, *b, ga, gb);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let ga = broadcast_apply(g, bv, |gi, bi| gi / bi);
                // d/db (a/b) = -a / b^2, evaluated with broadcasting on the output shape
                let a_full = broadcast_apply(&node.value, bv, |y, bi| y * bi); // reconstruct broadcast a
                let gb = {
                    let num = g.zip(&a_full, |gi, ai| gi * ai);
                    let den = broadcast_apply(&num, bv, |n, bi| -n / (bi * bi));
                    den
                };
                self.binary_backward(grads, *a, *b, ga, gb);
            }
            Op::Neg(a) => Self::accumulate(grads, *a, g.map(|x| -x)),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = g.matmul_nt(bv);
                let gb = av.matmul_tn(g);
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => Self::accumulate(grads, *a, g.transpose()),
            Op::Exp(a) => Self::accumulate(grads, *a, g.zip(&node.value, |gi, y| gi * y)),
            Op::Ln(a) => {
                let av = self.value(*a);
                Self::accumulate(grads, *a, g.zip(av, |gi, x| gi / x));
            }
            Op::Tanh(a) => {
                Self::accumulate(grads, *a, g.zip(&node.value, |gi, y| gi * (1.0 - y * y)));
            }
            Op::Sigmoid(a) => {
                Self::accumulate(grads, *a, g.zip(&node.value, |gi, y| gi * y * (1.0 - y)));
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                Self::accumulate(grads, *a, g.zip(av, |gi, x| gi * Tensor::sigmoid(x)));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                Self::accumulate(grads, *a, g.zip(av, |gi, x| if x > 0.0 { gi } else { 0.0 }));
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                Self::accumulate(grads, *a, g.zip(av, |gi, x| gi * x.signum()));
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut out = vec![0.0; y.len()];
                for (r, (yrow, grow)) in y.data.chunks(d).zip(g.data.chunks(d)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
                    for (j, (&yi, &gi)) in yrow.iter().zip(grow).enumerate() {
                        out[r * d + j] = yi * (gi - dot);
                    }
                }
                Self::accumulate(grads, *a, Tensor { shape: y.shape.clone(), data: out });
            }
            Op::SumLast(a) => {
                let av = self.value(*a);
                let d = av.last_dim();
                let mut out = Vec::with_capacity(av.len());
                for &gi in &g.data {
                    out.extend(std::iter::repeat(gi).take(d));
                }
                Self::accumulate(grads, *a, Tensor { shape: av.shape.clone(), data: out });
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                Self::accumulate(grads, *a, Tensor::full(av.shape.clone(), g.data[0]));
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let s = g.data[0] / av.len() as f64;
                Self::accumulate(grads, *a, Tensor::full(av.shape.clone(), s));
            }
            Op::SliceLast(a, start, len) => {
                let av = self.value(*a);
                let d = av.last_dim();
                let mut out = Tensor::zeros(av.shape.clone());
                for (r, grow) in g.data.chunks(*len).enumerate() {
                    out.data[r * d + start..r * d + start + len].copy_from_slice(grow);
                }
                Self::accumulate(grads, *a, out);
            }
            Op::ConcatLast(parts) => {
                let d = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let pd = pv.last_dim();
                    let mut out = Tensor::zeros(pv.shape.clone());
                    for (r, chunk) in out.data.chunks_mut(pd).enumerate() {
                        chunk.copy_from_slice(&g.data[r * d + offset..r * d + offset + pd]);
                    }
                    Self::accumulate(grads, p, out);
                    offset += pd;
                }
            }
            Op::GatherLast(a, indices) => {
                let av = self.value(*a);
                let d = av.last_dim();
                let k = indices.len();
                let mut out = Tensor::zeros(av.shape.clone());
                for (r, grow) in g.data.chunks(k).enumerate() {
                    for (&ix, &gi) in indices.iter().zip(grow) {
                        if ix >= 0 {
                            out.data[r * d + ix as usize] += gi;
                        }
                    }
                }
                Self::accumulate(grads, *a, out);
            }
            Op::Reshape(a) => {
                let av = self.value(*a);
                Self::accumulate(grads, *a, g.reshaped(av.shape.clone()));
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                Self::accumulate(
                    grads,
                    *a,
                    g.zip(av, |gi, x| if x > *lo && x < *hi { gi } else { 0.0 }),
                );
            }
        }
    }
}

/// Max relative error between analytic gradients and central finite differences
/// for a scalar-valued function of a single tensor input.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Graph, NodeId) -> NodeId,
{
    let store = ParamStore::new();
    let analytic = {
        let mut g = Graph::new(&store);
        let x = g.constant(point.clone());
        let root = f(&mut g, x);
        g.backward(root).wrt(x, point)
    };

    let eval = |p: &Tensor| -> f64 {
        let mut g = Graph::new(&store);
        let x = g.constant(p.clone());
        let root = f(&mut g, x);
        g.value(root).item()
    };

    let mut max_err: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        let mut minus = point.clone();
        plus.data[i] += step;
        minus.data[i] -= step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let a = analytic.data[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    max_err
}

/// Finite-difference check of parameter gradients for a loss built on `store`.
/// Returns the max relative error across all coordinates of all parameters.
pub fn param_grad_check<F>(store: &mut ParamStore, build: F, step: f64) -> f64
where
    F: Fn(&mut Graph) -> NodeId,
{
    let analytic: BTreeMap<String, Tensor> = {
        let g0 = &mut Graph::new(store);
        let root = build(g0);
        g0.backward(root).into_params()
    };

    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let mut max_err: f64 = 0.0;
    for name in names {
        let len = store.get(&name).unwrap().len();
        for i in 0..len {
            let orig = store.get(&name).unwrap().data[i];
            store.set_value_at(&name, i, orig + step);
            let fp = {
                let mut g = Graph::new(store);
                let root = build(&mut g);
                g.value(root).item()
            };
            store.set_value_at(&name, i, orig - step);
            let fm = {
                let mut g = Graph::new(store);
                let root = build(&mut g);
                g.value(root).item()
            };
            store.set_value_at(&name, i, orig);
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.get(&name).map(|t| t.data[i]).unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}
