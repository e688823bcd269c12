//! Dense f32 tensors with define-by-run reverse-mode autodiff.
//!
//! Tensors are cheap handles (`Rc`) onto shared storage. Every op validates
//! shapes, computes its output eagerly and, when any input requires
//! gradients, records a backward rule. [`Tensor::backward`] walks the
//! recorded graph in reverse topological order, accumulating gradients into
//! every participating tensor that requires them; fan-out adds. The graph is
//! consumed by the walk, so a second `backward` on the same scalar errors
//! instead of silently recomputing.
//!
//! Storage is `f32`; the finite difference checker does its differencing in
//! `f64` to keep the oracle sharper than the thing it checks. All data and
//! gradients are validated to stay finite; the first op to produce a
//! non-finite value errors out by name.

mod check;
mod ops;
mod optim;

pub use check::{OpCheck, finite_difference_check, op_check_suite};
pub use optim::{Optimizer, OptimizerRule};

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

pub type Result<T> = core::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Incompatible or invalid shapes for an op.
    Shape { op: &'static str, message: String },
    /// An op produced or was handed a non-finite value.
    NonFinite { op: &'static str, message: String },
    /// `backward` was invoked on a non-scalar tensor.
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// A gradient was required but absent.
    MissingGrad { message: String },
    /// `backward` was called again on an already-consumed graph.
    BackwardConsumed,
    /// The finite difference checker was handed a non-deterministic function.
    NonDeterministic { op: &'static str },
    /// Invalid argument (probabilities out of range, zero stride, ...).
    Invalid { op: &'static str, message: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape { op, message } => write!(f, "{op}: shape error: {message}"),
            TensorError::NonFinite { op, message } => {
                write!(f, "{op}: non-finite value: {message}")
            }
            TensorError::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar tensor, got shape {shape:?}")
            }
            TensorError::MissingGrad { message } => write!(f, "missing gradient: {message}"),
            TensorError::BackwardConsumed => {
                write!(f, "backward: graph already consumed; rebuild the forward pass")
            }
            TensorError::NonDeterministic { op } => {
                write!(f, "{op}: function is not deterministic between evaluations")
            }
            TensorError::Invalid { op, message } => write!(f, "{op}: {message}"),
        }
    }
}

impl core::error::Error for TensorError {}

pub(crate) struct BackCtx<'a> {
    /// Upstream gradient w.r.t. the op output.
    pub gy: &'a [f32],
    /// The op's own output data (for rules like sigmoid that reuse it).
    pub out_data: &'a [f32],
    /// The op inputs, in the order they were passed.
    pub parents: &'a [Tensor],
}

type BackFn = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<Vec<f32>>>>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    back: BackFn,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    node: Option<Node>,
    spent: bool,
}

/// Shared handle onto tensor storage. `clone` aliases; use [`Tensor::detach`]
/// for an independent copy outside the graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn ensure_finite(op: &'static str, data: &[f32]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op,
                message: format!("element {i} is {v}"),
            });
        }
    }
    Ok(())
}

impl Tensor {
    /// New leaf tensor. Data length must match the shape product and every
    /// element must be finite.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n = numel_of(shape);
        if data.len() != n {
            return Err(TensorError::Shape {
                op: "new",
                message: format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            });
        }
        ensure_finite("new", &data)?;
        Ok(Self::raw(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::raw(shape.to_vec(), vec![0.0; numel_of(shape)], false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::raw(shape.to_vec(), vec![1.0; numel_of(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Tensor> {
        Self::new(shape, vec![value; numel_of(shape)])
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f32) -> Result<Tensor> {
        Self::new(&[], vec![value])
    }

    /// True when both handles share the same storage.
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn raw(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<Node>) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad,
                node,
                spent: false,
            })),
        }
    }

    pub(crate) fn from_op(
        op: &'static str,
        parents: Vec<Tensor>,
        shape: Vec<usize>,
        data: Vec<f32>,
        back: BackFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel_of(&shape), data.len());
        ensure_finite(op, &data)?;
        let requires = parents.iter().any(|p| p.requires_grad());
        let node = if requires {
            Some(Node { op, parents, back })
        } else {
            None
        };
        Ok(Self::raw(shape, data, requires, node))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Copy of the raw data, row-major.
    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "item",
                shape: inner.shape.clone(),
            });
        }
        Ok(inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, yes: bool) {
        self.inner.borrow_mut().requires_grad = yes;
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Independent leaf copy of the data; not connected to any graph.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Self::raw(inner.shape.clone(), inner.data.clone(), false, None)
    }

    /// Overwrite the stored data in place (parameter updates). The tensor
    /// must be a leaf; shapes must match.
    pub(crate) fn replace_data(&self, data: Vec<f32>) {
        let mut inner = self.inner.borrow_mut();
        debug_assert!(inner.node.is_none(), "data replacement on a non-leaf");
        debug_assert_eq!(inner.data.len(), data.len());
        inner.data = data;
    }

    fn ptr_key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn accumulate_grad(&self, contribution: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(inner.data.len(), contribution.len());
        match &mut inner.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => inner.grad = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Populates `grad` on every tensor in
    /// the graph that requires gradients (fan-out sums), consuming the graph
    /// as it goes.
    pub fn backward(&self) -> Result<()> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.data.len() != 1 {
                return Err(TensorError::NotScalar {
                    op: "backward",
                    shape: inner.shape.clone(),
                });
            }
            if inner.spent {
                return Err(TensorError::BackwardConsumed);
            }
            if !inner.requires_grad {
                return Err(TensorError::MissingGrad {
                    message: String::from("backward target does not require gradients"),
                });
            }
            inner.spent = true;
            inner.grad = Some(vec![1.0]);
        }

        for t in self.topo_order() {
            let node = match t.inner.borrow_mut().node.take() {
                Some(n) => n,
                None => continue,
            };
            let (gy, out_data) = {
                let inner = t.inner.borrow();
                let gy = match &inner.grad {
                    Some(g) => g.clone(),
                    // No downstream contribution reached this node; its
                    // parents get nothing either.
                    None => continue,
                };
                (gy, inner.data.clone())
            };
            let ctx = BackCtx {
                gy: &gy,
                out_data: &out_data,
                parents: &node.parents,
            };
            let contributions = (node.back)(&ctx);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (parent, contribution) in node.parents.iter().zip(contributions) {
                if !parent.requires_grad() {
                    continue;
                }
                let Some(c) = contribution else { continue };
                ensure_finite(node.op, &c).map_err(|_| TensorError::NonFinite {
                    op: node.op,
                    message: String::from("backward produced a non-finite gradient"),
                })?;
                parent.accumulate_grad(&c);
            }
        }
        Ok(())
    }

    /// Reverse post-order over op nodes reachable from `self`: a valid
    /// topological order with every consumer before its producers.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: BTreeSet<usize> = BTreeSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            let key = t.ptr_key();
            if visited.contains(&key) {
                continue;
            }
            visited.insert(key);
            let inner = t.inner.borrow();
            let Some(node) = &inner.node else { continue };
            stack.push((t.clone(), true));
            for p in &node.parents {
                if !visited.contains(&p.ptr_key()) && p.inner.borrow().node.is_some() {
                    stack.push((p.clone(), false));
                }
            }
        }
        order.reverse();
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("has_grad", &inner.grad.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new(&[2, 2], vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "new", .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(&[2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(3.5).unwrap();
        assert_eq!(s.shape(), Vec::<usize>::new());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item().unwrap(), 3.5);
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        t.set_requires_grad(true);
        let y = t.mul(&t).unwrap();
        let err = y.backward().unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { op: "backward", .. }));
    }

    #[test]
    fn backward_twice_errors() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        t.set_requires_grad(true);
        let y = t.sum().unwrap();
        y.backward().unwrap();
        assert!(matches!(y.backward(), Err(TensorError::BackwardConsumed)));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let t = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 7.0]).unwrap();
        t.set_requires_grad(true);
        let y = t.sum().unwrap();
        y.backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_elementwise_square_sums_is_two_x() {
        let data = vec![0.5, -1.25, 3.0];
        let t = Tensor::new(&[3], data.clone()).unwrap();
        t.set_requires_grad(true);
        let y = t.mul(&t).unwrap().sum().unwrap();
        y.backward().unwrap();
        let g = t.grad().unwrap();
        for (gi, xi) in g.iter().zip(&data) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn fan_out_gradients_add_exactly() {
        // y = sum(x) + sum(x): each use contributes ones, so grad is 2.
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        t.set_requires_grad(true);
        let a = t.sum().unwrap();
        let b = t.sum().unwrap();
        let y = a.add(&b).unwrap();
        y.backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn grad_accumulates_across_backward_passes_until_cleared() {
        let t = Tensor::new(&[2], vec![1.0, 4.0]).unwrap();
        t.set_requires_grad(true);
        t.sum().unwrap().backward().unwrap();
        t.sum().unwrap().backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![2.0; 2]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn repeated_forward_backward_is_bitwise_identical() {
        let t = Tensor::new(&[4], vec![0.3, -0.7, 1.9, 0.0]).unwrap();
        t.set_requires_grad(true);
        let run = |t: &Tensor| {
            let y = t.mul(t).unwrap().sigmoid().unwrap().sum().unwrap();
            y.backward().unwrap();
            let g = t.grad().unwrap();
            t.clear_grad();
            g
        };
        let g1 = run(&t);
        let g2 = run(&t);
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn detach_cuts_the_graph() {
        let t = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        t.set_requires_grad(true);
        let mid = t.mul(&t).unwrap().detach();
        assert!(!mid.requires_grad());
        let y = mid.sum().unwrap();
        assert!(y.backward().is_err());
        assert!(t.grad().is_none());
    }
}
