use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Result, TensorError};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// What a backward rule sees: the forward output, the incoming gradient and
/// the forward inputs.
pub(crate) struct BackwardCtx<'a> {
    pub out: &'a [f64],
    pub grad: &'a [f64],
    pub parents: &'a [Tensor],
}

pub(crate) trait Backward {
    fn name(&self) -> &'static str;

    /// One entry per parent; `None` means no contribution.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    parents: Vec<Tensor>,
    op: Box<dyn Backward>,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Dense row-major `f64` tensor. Feature maps are laid out as N×C×H×W.
///
/// Cloning is cheap and shares storage; use [`Tensor::detach`] for a copy.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::dim("Tensor::new", "numel", expected, data.len()));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// A leaf that accumulates gradients during [`Tensor::backward`].
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.requiring_grad())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::build(shape.to_vec(), (0..n).map(&mut f).collect(), false, None)
    }

    /// Copy of the data as a fresh leaf with no history.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Copy of the data as a fresh gradient-accumulating leaf.
    pub fn requiring_grad(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), true, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        op: Option<Box<dyn Backward>>,
    ) -> Tensor {
        let node = op.map(|op| Node {
            parents: parents.iter().map(|&p| p.clone()).collect(),
            op,
        });
        Self::build(shape, data, false, node)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::Rank {
                op,
                expected: 4,
                shape: self.shape().to_vec(),
            }),
        }
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.data.borrow(), |d| d.as_slice())
    }

    /// Mutable access for optimizers and test harnesses. Changing the data of
    /// a tensor that is part of a live graph invalidates that graph.
    pub fn data_mut(&self) -> RefMut<'_, [f64]> {
        RefMut::map(self.0.data.borrow_mut(), |d| d.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when gradients can flow through this tensor.
    pub fn tracks(&self) -> bool {
        self.0.requires_grad || self.0.node.is_some()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op.name())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Back-propagates from a scalar, accumulating into every reachable
    /// gradient-requiring leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar or an explicit seed, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with(&[1.0])
    }

    pub fn backward_with(&self, seed: &[f64]) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(TensorError::dim("backward", "seed", self.numel(), seed.len()));
        }
        if !self.tracks() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), seed.to_vec());

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let out = t.0.data.borrow();
                let contributions = node.op.backward(&BackwardCtx {
                    out: &out,
                    grad: &g,
                    parents: &node.parents,
                });
                debug_assert_eq!(contributions.len(), node.parents.len());
                for (parent, contribution) in node.parents.iter().zip(contributions) {
                    let Some(contribution) = contribution else {
                        continue;
                    };
                    if !parent.tracks() {
                        continue;
                    }
                    match grads.get_mut(&parent.id()) {
                        Some(acc) => add_into(acc, &contribution),
                        None => {
                            grads.insert(parent.id(), contribution);
                        }
                    }
                }
            }
            if t.0.requires_grad {
                let mut slot = t.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => add_into(acc, &g),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Tracking nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in node.parents.iter().rev() {
                    if p.tracks() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Whether an op over `parents` should record a backward node.
pub(crate) fn tracking(parents: &[&Tensor]) -> bool {
    is_grad_enabled() && parents.iter().any(|p| p.tracks())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if let Some(op) = self.op_name() {
            s.field("op", &op);
        }
        if self.requires_grad() {
            s.field("requires_grad", &true);
        }
        if self.numel() <= 8 {
            s.field("data", &self.to_vec());
        }
        s.finish()
    }
}
