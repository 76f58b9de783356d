use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations on the graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync>;

pub(crate) struct GradFn {
    name: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
    grad: Mutex<Option<Vec<f32>>>,
}

/// Dense row-major f32 tensor. Cloning is cheap and shares storage.
///
/// Values are immutable once created; the only mutable state is the
/// accumulated gradient of a leaf.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f32>>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
            grad: Mutex::new(None),
        }))
    }

    /// Creates a leaf tensor.
    pub fn leaf(data: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if numel(shape) != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::DataLength {
                op: "tensor",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), requires_grad, None))
    }

    /// Creates a constant (non-trainable) tensor.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    pub fn scalar(v: f32) -> Self {
        Self::build(vec![1], Arc::new(vec![v]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![v; numel(shape)]), false, None)
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::build(shape.to_vec(), Arc::new(data), false, None)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Self::build(shape.to_vec(), Arc::new(data), false, None)
    }

    /// Result of an operation. Records `backward` only when grad mode is on
    /// and some input requires a gradient.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static,
    ) -> Tensor {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = track.then(|| GradFn {
            name,
            inputs,
            backward: Box::new(backward),
        });
        Self::build(shape, Arc::new(data), track, grad_fn)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.grad_fn.as_ref().map_or("leaf", |g| g.name)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
    }

    /// Fresh trainable leaf with this tensor's values.
    pub fn to_param(&self) -> Tensor {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), true, None)
    }

    pub(crate) fn inputs(&self) -> &[Tensor] {
        self.0.grad_fn.as_ref().map_or(&[], |g| g.inputs.as_slice())
    }

    /// Topologically ordered record of the operations that produced `self`.
    pub fn graph(&self) -> OpGraph {
        let order = topo_order(self);
        let nodes = order
            .iter()
            .map(|t| GraphNode {
                id: t.id(),
                op: t.op_name(),
                inputs: t.inputs().iter().filter(|i| i.requires_grad()).map(|i| i.id()).collect(),
            })
            .collect();
        OpGraph { nodes }
    }

    /// Reverse-mode differentiation of a scalar loss. Gradients accumulate
    /// into every reachable leaf that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        propagate(self, vec![1.0], &HashSet::new(), true);
        Ok(())
    }
}

/// Gradients of a scalar `output` with respect to `wrt`, which may be
/// intermediate tensors. Leaf gradients are left untouched.
pub fn grad(output: &Tensor, wrt: &[&Tensor]) -> Result<Vec<Vec<f32>>> {
    if output.numel() != 1 {
        return Err(TensorError::NonScalarLoss(output.shape().to_vec()));
    }
    let wanted: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let mut found = if output.requires_grad() {
        propagate(output, vec![1.0], &wanted, false)
    } else {
        HashMap::new()
    };
    Ok(wrt
        .iter()
        .map(|t| found.remove(&t.id()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub id: u64,
    pub op: &'static str,
    pub inputs: Vec<u64>,
}

/// Executed operations in topological order (inputs before consumers).
#[derive(Debug, Clone)]
pub struct OpGraph {
    pub nodes: Vec<GraphNode>,
}

impl OpGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut visited = HashSet::new();
    // (node, expanded)
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for inp in t.inputs().iter().rev() {
            if inp.requires_grad() && !visited.contains(&inp.id()) {
                stack.push((inp.clone(), false));
            }
        }
    }
    order
}

fn accumulate(dst: &mut Vec<f32>, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(root: &Tensor, seed: Vec<f32>, wanted: &HashSet<u64>, into_leaves: bool) -> HashMap<u64, Vec<f32>> {
    let order = topo_order(root);
    let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
    let mut found = HashMap::new();
    grads.insert(root.id(), seed);

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if wanted.contains(&node.id()) {
            found.insert(node.id(), g.clone());
        }
        match &node.0.grad_fn {
            Some(gf) => {
                let input_grads = (gf.backward)(&g);
                debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.name);
                for (inp, ig) in gf.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !inp.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), inp.numel(), "{} grad size", gf.name);
                    match grads.get_mut(&inp.id()) {
                        Some(acc) => accumulate(acc, &ig),
                        None => {
                            grads.insert(inp.id(), ig);
                        }
                    }
                }
            }
            None if into_leaves => {
                let mut slot = node.0.grad.lock().expect("grad lock");
                match slot.as_mut() {
                    Some(acc) => accumulate(acc, &g),
                    None => *slot = Some(g),
                }
            }
            None => {}
        }
    }
    found
}
