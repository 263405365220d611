//! Reverse-mode automatic differentiation with higher-order support.
//!
//! Every vector-Jacobian product is itself written in terms of [`Var`]
//! operations, so calling [`grad`] with `create_graph = true` yields
//! gradients that can be differentiated again. The Lipschitz and gradient
//! penalties rely on this: the penalty is a function of input gradients and
//! is minimized with respect to critic parameters.
//!
//! Graphs are single-threaded (`Rc`); values are plain [`Tensor`]s.

pub mod index;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::tensor::{numel, Tensor};
use index::{IndexMap, PAD};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let previous = GRAD_ENABLED.with(|c| c.replace(false));
        Self { previous }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.previous));
    }
}

/// Runs `f` without recording any graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    /// `max(x, slope·x)`; slope 0 is ReLU.
    LeakyRelu(f64),
    MatMul { ta: bool, tb: bool },
    Reshape,
    Gather(Rc<IndexMap>),
    ScatterAdd(Rc<IndexMap>),
    ConcatLast,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Op,
    parents: Vec<Var>,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

fn leaf(value: Tensor, requires_grad: bool) -> Var {
    Var(Rc::new(Node {
        id: next_id(),
        value,
        requires_grad,
        op: Op::Leaf,
        parents: Vec::new(),
    }))
}

fn make(value: Tensor, op: Op, parents: Vec<Var>) -> Var {
    let track = grad_enabled() && parents.iter().any(Var::requires_grad);
    if !track {
        return leaf(value, false);
    }
    Var(Rc::new(Node {
        id: next_id(),
        value,
        requires_grad: true,
        op,
        parents,
    }))
}

fn gemm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    assert!(a.ndim() == 2 && b.ndim() == 2, "matmul needs 2-D operands");
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    // Row-major strides; a transpose just swaps them.
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the pointers address buffers of the sizes implied by the
        // shapes and strides computed above; `out` is exclusively borrowed.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[m, n], out)
}

fn gather_values(src: &Tensor, map: &IndexMap, shape: &[usize]) -> Tensor {
    debug_assert_eq!(src.len(), map.src_len);
    let data = src.data();
    let out = map
        .idx
        .iter()
        .map(|&i| if i == PAD { 0.0 } else { data[i as usize] })
        .collect();
    Tensor::from_vec(shape, out)
}

fn scatter_values(src: &Tensor, map: &IndexMap, shape: &[usize]) -> Tensor {
    debug_assert_eq!(src.len(), map.idx.len());
    let mut out = vec![0.0; map.src_len];
    for (&i, &v) in map.idx.iter().zip(src.data()) {
        if i != PAD {
            out[i as usize] += v;
        }
    }
    Tensor::from_vec(shape, out)
}

impl Var {
    /// A value that gradients do not flow into.
    pub fn constant(value: Tensor) -> Var {
        leaf(value, false)
    }

    /// A differentiable input.
    pub fn parameter(value: Tensor) -> Var {
        leaf(value, true)
    }

    pub fn scalar(value: f64) -> Var {
        Var::constant(Tensor::scalar(value))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn broadcast_pair(&self, other: &Var) -> (Var, Var) {
        if self.shape() == other.shape() {
            return (self.clone(), other.clone());
        }
        let shape = index::broadcast_shape(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!(
                "incompatible shapes {:?} and {:?}",
                self.shape(),
                other.shape()
            )
        });
        (self.expand(&shape), other.expand(&shape))
    }

    pub fn add(&self, other: &Var) -> Var {
        let (a, b) = self.broadcast_pair(other);
        let v = a.value().zip_map(b.value(), |x, y| x + y);
        make(v, Op::Add, vec![a, b])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let (a, b) = self.broadcast_pair(other);
        let v = a.value().zip_map(b.value(), |x, y| x - y);
        make(v, Op::Sub, vec![a, b])
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (a, b) = self.broadcast_pair(other);
        let v = a.value().zip_map(b.value(), |x, y| x * y);
        make(v, Op::Mul, vec![a, b])
    }

    pub fn div(&self, other: &Var) -> Var {
        let (a, b) = self.broadcast_pair(other);
        let v = a.value().zip_map(b.value(), |x, y| x / y);
        make(v, Op::Div, vec![a, b])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        make(self.value().map(|x| x + c), Op::AddScalar, vec![self.clone()])
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        make(self.value().map(|x| x * c), Op::MulScalar(c), vec![self.clone()])
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn exp(&self) -> Var {
        make(self.value().map(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn log(&self) -> Var {
        make(self.value().map(f64::ln), Op::Log, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var {
        make(self.value().map(f64::sqrt), Op::Sqrt, vec![self.clone()])
    }

    pub fn tanh(&self) -> Var {
        make(self.value().map(f64::tanh), Op::Tanh, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        make(v, Op::Sigmoid, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        make(v, Op::LeakyRelu(slope), vec![self.clone()])
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    /// 2-D matrix product `op(self) · op(other)` where `op` optionally
    /// transposes.
    pub fn matmul_t(&self, other: &Var, ta: bool, tb: bool) -> Var {
        let v = gemm(self.value(), other.value(), ta, tb);
        make(v, Op::MatMul { ta, tb }, vec![self.clone(), other.clone()])
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.matmul_t(other, false, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        assert_eq!(
            numel(shape),
            self.value().len(),
            "cannot reshape {:?} into {:?}",
            self.shape(),
            shape
        );
        if shape == self.shape() {
            return self.clone();
        }
        make(self.value().with_shape(shape), Op::Reshape, vec![self.clone()])
    }

    /// `out[i] = self[map[i]]`, zero where the map holds [`PAD`].
    pub fn gather(&self, map: Rc<IndexMap>, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), map.idx.len());
        let v = gather_values(self.value(), &map, shape);
        make(v, Op::Gather(map), vec![self.clone()])
    }

    /// `out[map[i]] += self[i]`; the adjoint of [`Var::gather`].
    pub fn scatter_add(&self, map: Rc<IndexMap>, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), map.src_len);
        let v = scatter_values(self.value(), &map, shape);
        make(v, Op::ScatterAdd(map), vec![self.clone()])
    }

    pub fn expand(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        self.gather(index::broadcast(self.shape(), shape), shape)
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        self.scatter_add(index::broadcast(shape, self.shape()), shape)
    }

    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        let rows = numel(lead);
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(&s[..s.len() - 1], lead, "concat leading axes differ");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value().data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        make(Tensor::from_vec(&shape, out), Op::ConcatLast, parts.to_vec())
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Var {
        let mut shape = self.shape().to_vec();
        let map = index::slice_last(&shape, start, len);
        *shape.last_mut().unwrap() = len;
        self.gather(map, &shape)
    }

    /// Per-row Euclidean norm of a `(B, ...)` tensor, `sqrt(Σ x² + eps)`.
    pub fn row_norms(&self, eps: f64) -> Var {
        let b = self.shape()[0];
        let flat = self.reshape(&[b, self.value().len() / b]);
        flat.square().sum_to(&[b, 1]).add_scalar(eps).sqrt().reshape(&[b])
    }
}

/// Vector-Jacobian product of one node. Returns one optional gradient per
/// parent, each expressed with differentiable operations.
fn vjp(node: &Var, g: &Var) -> Vec<Option<Var>> {
    let n = &node.0;
    let p = &n.parents;
    let want = |i: usize| p[i].requires_grad();
    match &n.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            want(0).then(|| g.clone()),
            want(1).then(|| g.clone()),
        ],
        Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.neg())],
        Op::Mul => vec![
            want(0).then(|| g.mul(&p[1])),
            want(1).then(|| g.mul(&p[0])),
        ],
        Op::Div => vec![
            want(0).then(|| g.div(&p[1])),
            want(1).then(|| g.mul(node).div(&p[1]).neg()),
        ],
        Op::AddScalar => vec![Some(g.clone())],
        Op::MulScalar(c) => vec![Some(g.mul_scalar(*c))],
        Op::Exp => vec![Some(g.mul(node))],
        Op::Log => vec![Some(g.div(&p[0]))],
        Op::Sqrt => vec![Some(g.div(node).mul_scalar(0.5))],
        Op::Tanh => {
            let d = node.square().neg().add_scalar(1.0);
            vec![Some(g.mul(&d))]
        }
        Op::Sigmoid => {
            let d = node.mul(&node.neg().add_scalar(1.0));
            vec![Some(g.mul(&d))]
        }
        Op::LeakyRelu(slope) => {
            // Piecewise-linear: the local slope is a constant mask.
            let mask = p[0].value().map(|x| if x > 0.0 { 1.0 } else { *slope });
            vec![Some(g.mul(&Var::constant(mask)))]
        }
        Op::MatMul { ta, tb } => {
            let (a, b) = (&p[0], &p[1]);
            let (ga, gb) = match (ta, tb) {
                (false, false) => (
                    want(0).then(|| g.matmul_t(b, false, true)),
                    want(1).then(|| a.matmul_t(g, true, false)),
                ),
                (false, true) => (
                    want(0).then(|| g.matmul_t(b, false, false)),
                    want(1).then(|| g.matmul_t(a, true, false)),
                ),
                (true, false) => (
                    want(0).then(|| b.matmul_t(g, false, true)),
                    want(1).then(|| a.matmul_t(g, false, false)),
                ),
                (true, true) => (
                    want(0).then(|| b.matmul_t(g, true, true)),
                    want(1).then(|| g.matmul_t(a, true, true)),
                ),
            };
            vec![ga, gb]
        }
        Op::Reshape => vec![Some(g.reshape(p[0].shape()))],
        Op::Gather(map) => vec![Some(g.scatter_add(Rc::clone(map), p[0].shape()))],
        Op::ScatterAdd(map) => vec![Some(g.gather(Rc::clone(map), p[0].shape()))],
        Op::ConcatLast => {
            let mut start = 0;
            p.iter()
                .map(|part| {
                    let w = *part.shape().last().unwrap();
                    let piece = part.requires_grad().then(|| g.slice_last(start, w));
                    start += w;
                    piece
                })
                .collect()
        }
    }
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // (node, parents expanded?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Gradients of `output` (summed over its elements, or weighted by `seed`)
/// with respect to `inputs`. `None` marks an input that `output` does not
/// depend on.
///
/// With `create_graph` the returned gradients are themselves differentiable.
pub fn grad_with_seed(
    output: &Var,
    seed: Option<&Tensor>,
    inputs: &[&Var],
    create_graph: bool,
) -> Vec<Option<Var>> {
    let _guard = (!create_graph).then(NoGradGuard::new);
    let seed = match seed {
        Some(s) => {
            assert_eq!(s.shape(), output.shape(), "seed shape mismatch");
            Var::constant(s.clone())
        }
        None => Var::constant(Tensor::ones(output.shape())),
    };
    let keep: std::collections::HashSet<u64> = inputs.iter().map(|v| v.id()).collect();
    let mut grads: HashMap<u64, Var> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), seed);
    }
    for node in topo_order(output).iter().rev() {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        for (parent, pg) in node.0.parents.iter().zip(vjp(node, &g)) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() {
                continue;
            }
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
        if !node.0.parents.is_empty() && !keep.contains(&node.id()) {
            // Interior gradients are no longer needed once propagated.
            grads.remove(&node.id());
        }
    }
    inputs
        .iter()
        .map(|v| {
            grads.get(&v.id()).map(|g| {
                if create_graph {
                    g.clone()
                } else {
                    g.detach()
                }
            })
        })
        .collect()
}

pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    grad_with_seed(output, None, inputs, create_graph)
}

/// Like [`grad`] but returns zero tensors for unreachable inputs.
pub fn grad_dense(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Var> {
    grad(output, inputs, create_graph)
        .into_iter()
        .zip(inputs)
        .map(|(g, v)| g.unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape()))))
        .collect()
}
