//! Dense f64 tensors with tape-based reverse-mode differentiation and
//! per-operation multiply-add instrumentation.
//!
//! A [`Graph`] owns the tape for one forward pass; it is rebuilt every step
//! and never shared across threads. Every primitive validates its output for
//! finiteness — NaN/Inf surfaces as an error, not a silent value. The
//! [`FlopLedger`] counts multiply-adds of matmul and conv2d only; softmax,
//! normalization and elementwise costs are excluded by convention so the
//! instrumented counts stay comparable with the analytic complexity model.

mod kernels;
mod ops;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Operation kinds tracked by the FLOP ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FlopKind {
    MatMul,
    Conv2d,
}

impl FlopKind {
    pub fn name(self) -> &'static str {
        match self {
            FlopKind::MatMul => "matmul",
            FlopKind::Conv2d => "conv2d",
        }
    }
}

/// Multiply-add counters per operation kind.
///
/// Counters only advance while enabled and only during forward execution;
/// one multiply-add is reported as 2 FLOPs by consumers that print "FLOPs".
#[derive(Debug, Default, Clone)]
pub struct FlopLedger {
    matmul: u128,
    conv2d: u128,
    enabled: bool,
}

impl FlopLedger {
    fn new() -> Self {
        FlopLedger {
            matmul: 0,
            conv2d: 0,
            enabled: true,
        }
    }

    fn add(&mut self, kind: FlopKind, madds: u128) {
        if !self.enabled {
            return;
        }
        match kind {
            FlopKind::MatMul => self.matmul += madds,
            FlopKind::Conv2d => self.conv2d += madds,
        }
    }
}

/// A copy of the ledger counters at a point in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopSnapshot {
    pub matmul: u128,
    pub conv2d: u128,
}

impl FlopSnapshot {
    pub fn total(&self) -> u128 {
        self.matmul + self.conv2d
    }

    pub fn counters(&self) -> BTreeMap<FlopKind, u128> {
        let mut m = BTreeMap::new();
        m.insert(FlopKind::MatMul, self.matmul);
        m.insert(FlopKind::Conv2d, self.conv2d);
        m
    }
}

/// Gradient buffers keyed by node id, allocated on first touch.
pub(crate) struct GradBuf {
    bufs: Vec<Option<Vec<f64>>>,
}

impl GradBuf {
    fn new(n: usize) -> Self {
        GradBuf {
            bufs: vec![None; n],
        }
    }

    pub(crate) fn accum(&mut self, id: usize, len: usize) -> &mut [f64] {
        self.bufs[id].get_or_insert_with(|| vec![0.0; len])
    }
}

type BackFn = Box<dyn Fn(&[f64], &mut GradBuf)>;

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    /// Leaf marked as differentiable.
    requires_grad: bool,
    /// Reachable from a differentiable leaf (so backward must visit it).
    needs_grad: bool,
    back: Option<BackFn>,
}

pub(crate) struct GraphInner {
    nodes: Vec<Node>,
    ledger: FlopLedger,
    recording: bool,
    rng: ChaCha8Rng,
}

/// Tape for one forward pass: owns all nodes, the FLOP ledger and the
/// dropout RNG. Single-threaded; concurrent callers each build their own.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Summary of one backward pass.
#[derive(Debug, Clone, Copy)]
pub struct BackwardReport {
    /// Differentiable leaves that received a nonzero-path gradient. Zero
    /// means the loss was detached from every parameter.
    pub leaves_reached: usize,
}

impl Graph {
    /// Recording graph (gradients enabled), dropout RNG seeded to 0.
    pub fn new() -> Self {
        Graph::with_seed(0)
    }

    pub fn with_seed(seed: u64) -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                ledger: FlopLedger::new(),
                recording: true,
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
        }
    }

    /// Inference graph: no backward closures are recorded.
    pub fn eval() -> Self {
        let g = Graph::with_seed(0);
        g.inner.borrow_mut().recording = false;
        g
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Constant leaf.
    pub fn tensor(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, data, false, "tensor")
    }

    /// Differentiable leaf.
    pub fn param(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, data, true, "param")
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        self.tensor(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(&self, shape: &[usize], v: f64) -> Result<Tensor> {
        self.tensor(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(&self, v: f64) -> Result<Tensor> {
        self.tensor(&[1], vec![v])
    }

    fn leaf(&self, shape: &[usize], data: Vec<f64>, requires_grad: bool, op: &'static str) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                op,
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = requires_grad && self.is_recording();
        Ok(self.push(Node {
            shape: shape.to_vec(),
            value: Rc::new(data),
            grad: None,
            requires_grad,
            needs_grad,
            back: None,
        }))
    }

    fn push(&self, node: Node) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let shape = node.shape.clone();
        inner.nodes.push(node);
        Tensor {
            id,
            shape,
            graph: self.clone(),
        }
    }

    pub(crate) fn count_flops(&self, kind: FlopKind, madds: u128) {
        self.inner.borrow_mut().ledger.add(kind, madds);
    }

    /// Observation-only node over an existing value buffer (no backward).
    pub(crate) fn adopt_value(&self, shape: Vec<usize>, value: Rc<Vec<f64>>) -> Tensor {
        self.push(Node {
            shape,
            value,
            grad: None,
            requires_grad: false,
            needs_grad: false,
            back: None,
        })
    }

    pub fn flop_snapshot(&self) -> FlopSnapshot {
        let inner = self.inner.borrow();
        FlopSnapshot {
            matmul: inner.ledger.matmul,
            conv2d: inner.ledger.conv2d,
        }
    }

    pub fn flop_reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.ledger.matmul = 0;
        inner.ledger.conv2d = 0;
    }

    pub fn set_ledger_enabled(&self, enabled: bool) {
        self.inner.borrow_mut().ledger.enabled = enabled;
    }

    pub(crate) fn draw_uniform(&self, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut inner = self.inner.borrow_mut();
        (0..n).map(|_| inner.rng.random::<f64>()).collect()
    }

    /// Reverse-mode pass from a scalar loss. Populates `grad` on every
    /// differentiable leaf (zeros where the loss does not reach the leaf).
    pub fn backward(&self, loss: &Tensor) -> Result<BackwardReport> {
        if !self.same_graph(&loss.graph) {
            return Err(Error::contract("backward", "loss belongs to a different graph"));
        }
        if loss.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape),
            ));
        }
        {
            let inner = self.inner.borrow();
            let v = inner.nodes[loss.id].value[0];
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }

        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        let mut grads = GradBuf::new(n);
        grads.accum(loss.id, 1)[0] = 1.0;

        let mut leaves_reached = 0;
        // The tape is already topologically ordered by construction.
        for id in (0..=loss.id).rev() {
            let Some(g) = grads.bufs[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if node.requires_grad {
                leaves_reached += 1;
            }
            if let Some(back) = node.back.as_ref() {
                back(&g, &mut grads);
            }
            if inner.nodes[id].requires_grad {
                inner.nodes[id].grad = Some(g);
            }
        }

        // Unreached differentiable leaves get zero gradients.
        for node in inner.nodes.iter_mut() {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(BackwardReport { leaves_reached })
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Handle to one node on a [`Graph`]. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor {
    id: usize,
    shape: Vec<usize>,
    graph: Graph,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape)
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    /// Copy of the node's values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].value.as_ref().clone()
    }

    /// Zero-copy read access to the node's values.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        let inner = self.graph.inner.borrow();
        f(&inner.nodes[self.id].value)
    }

    pub(crate) fn value_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.graph.inner.borrow().nodes[self.id].value)
    }

    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "scalar",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.with_data(|d| d[0]))
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient populated by the last backward pass, for differentiable leaves.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].needs_grad
    }

    /// Record `value` as the result of an op over `parents`. The backward
    /// closure is only stored while the graph records and some parent needs
    /// gradients.
    pub(crate) fn new_op(
        graph: &Graph,
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: &[&Tensor],
        op: &'static str,
        back: impl Fn(&[f64], &mut GradBuf) + 'static,
    ) -> Result<Tensor> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = graph.is_recording() && parents.iter().any(|p| p.needs_grad());
        Ok(graph.push(Node {
            shape,
            value: Rc::new(value),
            grad: None,
            requires_grad: false,
            needs_grad,
            back: if needs_grad { Some(Box::new(back)) } else { None },
        }))
    }
}
