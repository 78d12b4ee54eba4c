//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `Vec`-backed buffers behind an `Rc`; ops that
//! run while gradient tracking is enabled record a backward closure and
//! keep handles to their parents, forming a DAG that [`Tensor::backward`]
//! walks in reverse topological order. Gradients accumulate across
//! fan-out, so a tensor used twice gets the sum of both contributions.
//!
//! The engine is single-threaded by design (`Rc`, not `Arc`); given the
//! same inputs and seed, forward and backward are bit-reproducible.

mod conv;
mod gradcheck;
mod ops;

pub use gradcheck::{check_gradient, GradCheckReport};
pub use ops::{mse, softmax_cross_entropy};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        len: usize,
        shape: Vec<usize>,
        expected: usize,
    },
    #[error("{what} must have rank {expected}, got shape {got:?}")]
    RankMismatch {
        what: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{axis}: expected {expected}, got {got}")]
    DimMismatch {
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shapes {left:?} and {right:?} do not match for {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("reshape to {shape:?} ({to} elements) from {from} elements")]
    ReshapeMismatch {
        shape: Vec<usize>,
        to: usize,
        from: usize,
    },
    #[error("output {axis} collapsed to {computed} (input {input}, kernel {kernel}, stride {stride}, padding {padding})")]
    OutputCollapsed {
        axis: &'static str,
        computed: i64,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("pool window must be at least 1")]
    ZeroWindow,
    #[error("backward requires a scalar, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },
    #[error("backward on a tensor with no tracked graph")]
    UntrackedBackward,
    #[error("dropout rate {rate} outside [0, 1)")]
    InvalidRate { rate: f64 },
    #[error("noise standard deviation {std} is negative")]
    InvalidStd { std: f64 },
    #[error("label {label} at index {index} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("batch norm needs more than one value per channel, got {count}")]
    BatchTooSmall { count: usize },
    #[error("clamp bounds inverted: lo {lo} > hi {hi}")]
    InvertedClamp { lo: f64, hi: f64 },
}

/// Element types the engine runs on. f32 is the working precision for
/// training and attacks; f64 exists for finite-difference verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Standard normal CDF, computed through the error function.
    fn normal_cdf(self) -> Self;
    /// Standard normal density.
    fn normal_pdf(self) -> Self;

    /// c = alpha * a·b + beta * c for an m×k by k×n product with explicit
    /// row/column strides on every operand.
    ///
    /// # Safety
    /// Pointers must cover every element addressed by the given
    /// dimensions and strides, and c must not alias a or b.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($ty:ty, $gemm:path, $erf:expr) => {
        impl Scalar for $ty {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $ty
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                <$ty>::abs(self)
            }
            fn exp(self) -> Self {
                <$ty>::exp(self)
            }
            fn ln(self) -> Self {
                <$ty>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$ty>::sqrt(self)
            }
            fn maximum(self, other: Self) -> Self {
                <$ty>::max(self, other)
            }
            fn minimum(self, other: Self) -> Self {
                <$ty>::min(self, other)
            }
            fn is_finite(self) -> bool {
                <$ty>::is_finite(self)
            }
            fn normal_cdf(self) -> Self {
                let x = self as f64;
                (0.5 * (1.0 + $erf(x / std::f64::consts::SQRT_2))) as $ty
            }
            fn normal_pdf(self) -> Self {
                let x = self as f64;
                ((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()) as $ty
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, libm::erf);
impl_scalar!(f64, matrixmultiply::dgemm, libm::erf);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Whether ops currently record backward graphs on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` with gradient tracking disabled; ops inside produce leaves.
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

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn<S> = Box<dyn Fn(&[S], &[Tensor<S>])>;

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor<S>>,
    backward_fn: Option<BackwardFn<S>>,
}

/// A shared handle to a tensor node. Cloning is cheap and aliases the
/// same storage, which is how parameters stay live inside a graph while
/// the optimizer updates them in place.
pub struct Tensor<S: Scalar = f32> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad.get())
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn leaf(data: Vec<S>, shape: Vec<usize>) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    /// Result of an op: tracks the graph only if some parent requires
    /// grad and tracking is enabled, otherwise degrades to a plain leaf.
    pub(crate) fn from_op(
        data: Vec<S>,
        shape: Vec<usize>,
        parents: Vec<Tensor<S>>,
        backward_fn: impl Fn(&[S], &[Tensor<S>]) + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        if grad_enabled() && parents.iter().any(|p| p.requires_grad()) {
            Tensor {
                node: Rc::new(Node {
                    id: next_id(),
                    shape,
                    data: RefCell::new(data),
                    grad: RefCell::new(None),
                    requires_grad: Cell::new(true),
                    parents,
                    backward_fn: Some(Box::new(backward_fn)),
                }),
            }
        } else {
            Self::leaf(data, shape)
        }
    }

    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
                expected,
            });
        }
        Ok(Self::leaf(data, shape.to_vec()))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::ZERO)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::leaf(vec![value; shape.iter().product()], shape.to_vec())
    }

    pub fn scalar(value: S) -> Self {
        Self::leaf(vec![value], Vec::new())
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<S>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    /// The single element of a scalar tensor.
    ///
    /// Panics if the tensor has more than one element; that is a bug at
    /// the call site, not a recoverable condition.
    pub fn item(&self) -> S {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.node.shape
        );
        self.node.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.node.requires_grad.set(flag);
    }

    /// Builder-style `set_requires_grad`.
    pub fn with_grad(self) -> Self {
        self.node.requires_grad.set(true);
        self
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Fresh leaf with copied data and no graph attached.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.node.shape.clone())
    }

    pub(crate) fn accumulate_grad(&self, delta: &[S]) {
        if !self.requires_grad() {
            return;
        }
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Fills `grad` on every leaf that
    /// requires grad and is reachable from this tensor; intermediate
    /// grads are dropped as soon as their rule has fired.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: self.node.shape.clone(),
            });
        }
        if !self.requires_grad() {
            return Err(TensorError::UntrackedBackward);
        }
        let order = self.topo_order();
        *self.node.grad.borrow_mut() = Some(vec![S::ONE]);
        for t in order.iter().rev() {
            let Some(rule) = &t.node.backward_fn else {
                continue;
            };
            let g = t.node.grad.borrow_mut().take();
            let Some(g) = g else { continue };
            rule(&g, &t.node.parents);
        }
        Ok(())
    }

    /// Post-order over the op DAG; reversing it yields a topological
    /// order with every consumer before its inputs.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = Vec::new();
        visited.insert(self.node.id);
        stack.push((self.clone(), 0));
        while let Some(frame) = stack.last_mut() {
            let t = frame.0.clone();
            let next = frame.1;
            if next < t.node.parents.len() {
                frame.1 += 1;
                let p = t.node.parents[next].clone();
                if visited.insert(p.node.id) {
                    stack.push((p, 0));
                }
            } else {
                stack.pop();
                order.push(t);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { len: 3, .. }));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap().with_grad();
        let y = x.relu();
        assert!(matches!(
            y.backward(),
            Err(TensorError::NonScalarBackward { .. })
        ));
    }

    #[test]
    fn backward_rejects_untracked_graph() {
        let x = Tensor::<f32>::from_vec(vec![1.0], &[1]).unwrap();
        let y = x.sum();
        assert!(matches!(y.backward(), Err(TensorError::UntrackedBackward)));
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let x = Tensor::<f64>::from_vec(vec![3.0], &[1]).unwrap().with_grad();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn no_grad_produces_leaves() {
        let x = Tensor::<f32>::from_vec(vec![1.0], &[1]).unwrap().with_grad();
        let y = no_grad(|| x.relu());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn no_grad_restores_on_panic() {
        let caught = std::panic::catch_unwind(|| no_grad(|| panic!("boom")));
        assert!(caught.is_err());
        assert!(grad_enabled());
    }

    #[test]
    fn leaves_without_requires_grad_stay_untouched() {
        let x = Tensor::<f64>::from_vec(vec![2.0], &[1]).unwrap().with_grad();
        let c = Tensor::<f64>::from_vec(vec![5.0], &[1]).unwrap();
        let y = x.mul(&c).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn detach_cuts_the_graph() {
        let x = Tensor::<f64>::from_vec(vec![2.0], &[1]).unwrap().with_grad();
        let d = x.mul(&x).unwrap().detach();
        assert!(!d.requires_grad());
        assert_eq!(d.to_vec(), vec![4.0]);
    }
}
