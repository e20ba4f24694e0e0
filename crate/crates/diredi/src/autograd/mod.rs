//! Minimal reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! Tensors hold `f64` data. Operations build a dynamic tape; calling
//! [`Tensor::backward`] on a scalar output propagates gradients to every
//! leaf with `requires_grad`. Constant subgraphs (e.g. a frozen teacher
//! forward pass) carry no tape and cost nothing at backward time.

mod conv;
mod norm;
mod ops;

pub use conv::conv2d;
pub use norm::{batch_norm_eval, batch_norm_train};

use ndarray::{ArrayD, IxDyn};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[Tensor])>;

pub(crate) struct Node {
    pub id: usize,
    pub data: ArrayD<f64>,
    pub grad: Option<ArrayD<f64>>,
    pub requires_grad: bool,
    op: Option<OpRecord>,
}

struct OpRecord {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

/// A reference-counted node in the autodiff tape.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<RefCell<Node>>);

impl Tensor {
    fn new_node(data: ArrayD<f64>, requires_grad: bool, op: Option<OpRecord>) -> Tensor {
        Tensor(Rc::new(RefCell::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            grad: None,
            requires_grad,
            op,
        })))
    }

    /// Constant tensor; never receives gradient.
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor::new_node(data, false, None)
    }

    /// Trainable leaf.
    pub fn leaf(data: ArrayD<f64>) -> Tensor {
        Tensor::new_node(data, true, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let op = requires_grad.then_some(OpRecord { parents, backward });
        Tensor::new_node(data, requires_grad, op)
    }

    pub fn id(&self) -> usize {
        self.0.borrow().id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Toggle gradient tracking on a leaf. Freezing a model's parameters
    /// makes its forward passes tape-free.
    pub fn set_requires_grad(&self, value: bool) {
        self.0.borrow_mut().requires_grad = value;
    }

    /// Borrow the underlying array.
    pub fn data(&self) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.0.borrow(), |n| &n.data)
    }

    /// Clone the underlying array out.
    pub fn value(&self) -> ArrayD<f64> {
        self.0.borrow().data.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().data.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.borrow();
        assert_eq!(d.data.len(), 1, "item() on non-scalar tensor");
        *d.data.iter().next().unwrap()
    }

    /// Replace the stored data in place (optimizer updates). Shape must match.
    pub fn set_data(&self, data: ArrayD<f64>) {
        let mut n = self.0.borrow_mut();
        assert_eq!(n.data.shape(), data.shape(), "set_data shape mismatch");
        n.data = data;
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// A constant view of this tensor's current data, cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.value())
    }

    pub(crate) fn accumulate_grad(&self, g: &ArrayD<f64>) {
        let mut n = self.0.borrow_mut();
        if !n.requires_grad {
            return;
        }
        match &mut n.grad {
            Some(acc) => *acc += g,
            None => n.grad = Some(g.clone()),
        }
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// every reachable tensor with `requires_grad`.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        let order = topo_order(self);
        {
            let mut n = self.0.borrow_mut();
            let ones = ArrayD::from_elem(n.data.raw_dim(), 1.0);
            match &mut n.grad {
                Some(g) => *g += &ones,
                None => n.grad = Some(ones),
            }
        }
        for t in order.iter().rev() {
            let grad = {
                let n = t.0.borrow();
                if n.op.is_none() {
                    continue;
                }
                match &n.grad {
                    Some(g) => g.clone(),
                    None => continue,
                }
            };
            // The borrow is dropped before invoking the closure so parents
            // (which may alias through shared subexpressions) can be
            // mutably borrowed one at a time inside.
            let n = t.0.borrow();
            let op = n.op.as_ref().unwrap();
            (op.backward)(&grad, &op.parents);
        }
    }
}

/// Iterative postorder over the tape (graphs can be deep).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((t, child_idx)) = stack.pop() {
        let id = t.id();
        if child_idx == 0 {
            if visited.contains(&id) {
                continue;
            }
        }
        let next_child = {
            let n = t.0.borrow();
            n.op.as_ref().and_then(|op| op.parents.get(child_idx).cloned())
        };
        match next_child {
            Some(child) => {
                stack.push((t, child_idx + 1));
                if !visited.contains(&child.id()) {
                    stack.push((child, 0));
                }
            }
            None => {
                visited.insert(id);
                order.push(t);
            }
        }
    }
    order
}

/// Numpy-style broadcast shape of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum a gradient of broadcast shape back down to the original shape.
pub(crate) fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(ndarray::Axis(0));
    }
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if want == 1 && have != 1 {
            out = out
                .sum_axis(ndarray::Axis(ax))
                .insert_axis(ndarray::Axis(ax));
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::Tensor;
    use ndarray::ArrayD;

    /// Central-difference gradient of `f` at `x`, one element at a time.
    pub fn numeric_grad(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in ndarray::indices(x.raw_dim()) {
            let orig = xp[&idx];
            xp[&idx] = orig + eps;
            let fp = f(&xp);
            xp[&idx] = orig - eps;
            let fm = f(&xp);
            xp[&idx] = orig;
            g[&idx] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    /// Max relative error between analytic and numeric gradients of the
    /// scalar-valued tape function `build` with respect to its input.
    pub fn check(build: &dyn Fn(&Tensor) -> Tensor, x: &ArrayD<f64>, eps: f64) -> f64 {
        let leaf = Tensor::leaf(x.clone());
        let out = build(&leaf);
        out.backward();
        let analytic = leaf.grad().expect("no gradient reached the input");
        let f = |v: &ArrayD<f64>| build(&Tensor::leaf(v.clone())).item();
        let numeric = numeric_grad(&f, x, eps);
        let mut worst: f64 = 0.0;
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            worst = worst.max((a - n).abs() / denom);
        }
        worst
    }
}
