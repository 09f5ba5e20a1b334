use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

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

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Suspends graph recording for its lifetime; forwards run under it keep no
/// backward state, so intermediates free as soon as they go out of scope.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

// Backward step of one recorded op: (out_data, out_grad, parents).
type BackwardFn<E> = Box<dyn Fn(&[E], &[E], &[Tensor<E>])>;

struct OpRecord<E: Scalar> {
    parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Node<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    op: Option<OpRecord<E>>,
    // set once backward consumed the graph rooted here
    loss_consumed: Cell<bool>,
}

/// Dense tensor with an optional reverse-mode record. Values are immutable
/// after creation; only the gradient buffer mutates, during backward.
pub struct Tensor<E: Scalar>(Rc<Node<E>>);

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Scalar> Tensor<E> {
    fn new_node(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Option<OpRecord<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op,
            loss_consumed: Cell::new(false),
        }))
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BadShape {
                op: "from_vec",
                shape: shape.to_vec(),
                why: format!("shape wants {} values, got {}", shape.iter().product::<usize>(), data.len()),
            });
        }
        Ok(Self::new_node(shape.to_vec(), data, false, None))
    }

    /// Leaf that participates in backward (weights and gradient-checked inputs).
    pub fn leaf(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BadShape {
                op: "leaf",
                shape: shape.to_vec(),
                why: format!("shape wants {} values, got {}", shape.iter().product::<usize>(), data.len()),
            });
        }
        Ok(Self::new_node(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![E::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let n = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![v; n], false, None)
    }

    pub fn scalar(v: E) -> Self {
        Self::new_node(vec![1], vec![v], false, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if record {
            Self::new_node(shape, data, true, Some(OpRecord { parents, backward }))
        } else {
            Self::new_node(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Gradient buffer, zeros if backward never reached this tensor.
    pub fn grad_or_zeros(&self) -> Vec<E> {
        self.grad().unwrap_or_else(|| vec![E::zero(); self.numel()])
    }

    pub(crate) fn accum_grad(&self, f: impl FnOnce(&mut [E])) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![E::zero(); self.0.data.len()]);
        f(buf);
    }

    fn grad_ref(&self) -> Ref<'_, Option<Vec<E>>> {
        self.0.grad.borrow()
    }

    /// Reverse pass from a scalar loss. Visits each recorded op exactly once
    /// in reverse creation order (a valid reverse topological order, since
    /// every op's inputs are created before it). Gradients accumulate on
    /// every reachable leaf with requires_grad; intermediate gradients are
    /// dropped as soon as their op has propagated them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.0.shape.clone()));
        }
        if self.0.loss_consumed.get() {
            return Err(Error::DoubleBackward);
        }
        self.0.loss_consumed.set(true);
        if !self.0.requires_grad {
            return Ok(());
        }

        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.0.requires_grad || !seen.insert(t.0.id) {
                continue;
            }
            if let Some(op) = &t.0.op {
                for p in &op.parents {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        self.accum_grad(|g| g[0] = g[0] + E::one());
        for t in &order {
            let node = &t.0;
            let Some(op) = &node.op else { continue };
            {
                let guard = t.grad_ref();
                let Some(g) = guard.as_ref() else { continue };
                (op.backward)(&node.data, g, &op.parents);
            }
            // intermediate grads are dead once propagated
            *node.grad.borrow_mut() = None;
        }
        Ok(())
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}, grad={})", self.0.shape, self.0.requires_grad)
    }
}
