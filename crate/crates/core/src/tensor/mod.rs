//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record the op and its parents; calling
//! [`Tensor::backward`] on a scalar walks that graph once in reverse
//! topological order and accumulates (`+=`) gradients into every leaf that
//! requires them.

mod backward;
mod conv;
pub mod gradcheck;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive};

use crate::{Error, Result};

pub use conv::{conv_output_len, receptive_field, ConvSpec, Padding};
pub use gradcheck::{finite_diff_check, finite_diff_check_at, GradCheckReport, ScalarFunction};
pub use ops::{Activation, PoolKind, PoolOver};

/// Scalar types a tensor can hold. Model math runs in `f32`; `f64` exists for
/// high-precision gradient verification.
pub trait Element:
    Float + FromPrimitive + Default + fmt::Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Row-major `c[m,n] = a·b + beta·c`, with arbitrary element strides for
    /// `a` (`m×k`) and `b` (`k×n`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
    );
}

#[allow(clippy::too_many_arguments)]
fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &[T],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_bounds(m, k, n, a, a_strides, b, b_strides, c);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                // SAFETY: every index touched by the kernel was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// A recorded operation: parents plus whatever the backward pass needs.
pub(crate) enum Op<E: Element> {
    Add(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Scale(Tensor<E>, E),
    MatMul(Tensor<E>, Tensor<E>),
    BatchMatMul(Tensor<E>, Tensor<E>),
    Reshape(Tensor<E>),
    Permute(Tensor<E>, Vec<usize>),
    Expand(Tensor<E>),
    Concat(Vec<Tensor<E>>, usize),
    Narrow {
        input: Tensor<E>,
        axis: usize,
        start: usize,
    },
    Conv2d {
        input: Tensor<E>,
        kernel: Tensor<E>,
        bias: Option<Tensor<E>>,
        spec: conv::ConvGeometry,
    },
    Activation(Tensor<E>, Activation),
    Softmax(Tensor<E>, usize),
    LayerNorm {
        input: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        normalized: Vec<E>,
        rstd: Vec<E>,
    },
    Pool {
        input: Tensor<E>,
        kind: PoolKind,
        over: PoolOver,
        argmax: Vec<usize>,
    },
    Dropout(Tensor<E>, Vec<E>),
    CrossEntropy {
        logits: Tensor<E>,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
    Sum(Tensor<E>),
    Mean(Tensor<E>),
}

impl<E: Element> Op<E> {
    fn parents(&self) -> Vec<&Tensor<E>> {
        match self {
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::BatchMatMul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Expand(a)
            | Op::Activation(a, _)
            | Op::Softmax(a, _)
            | Op::Dropout(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::Narrow { input, .. } | Op::Pool { input, .. } => vec![input],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![input, kernel];
                v.extend(bias.iter());
                v
            }
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node<E: Element> {
    data: Vec<E>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<E>>>,
    op: Option<Op<E>>,
}

/// An n-dimensional array in row-major order, optionally tracked for
/// gradients. Cloning is cheap and shares storage.
pub struct Tensor<E: Element = f32>(Arc<Node<E>>);

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.0.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn leaf(data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            data,
            shape,
            requires_grad,
            grad: Mutex::new(None),
            op: None,
        }))
    }

    /// Builds an op output; the op is only kept when some parent needs gradients.
    pub(crate) fn from_op(data: Vec<E>, shape: Vec<usize>, op: Op<E>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Tensor(Arc::new(Node {
            data,
            shape,
            requires_grad,
            grad: Mutex::new(None),
            op: requires_grad.then_some(op),
        }))
    }

    /// A constant tensor (no gradient tracking).
    pub fn new(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if shape.contains(&0) {
            return Err(Error::shape(format!("shape {shape:?} has a zero dimension")));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// A trainable leaf.
    pub fn parameter(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn scalar(v: E) -> Self {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![E::zero(); numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Self::leaf(vec![v; numel(shape)], shape.to_vec(), false)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::leaf(data, shape.to_vec(), false)
    }

    /// A fresh leaf sharing this tensor's values, with the given grad flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), requires_grad)
    }

    /// Drops graph history.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    pub fn data(&self) -> &[E] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.clone()
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

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn same_storage(&self, other: &Tensor<E>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self.0.data.iter().map(|v| F::lit(v.as_f64())).collect();
        Tensor::leaf(data, self.0.shape.clone(), self.0.requires_grad)
    }

    /// Reverse-mode sweep from a scalar. Gradients are added to any existing
    /// leaf gradients; call [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut grads: HashMap<usize, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    for (parent, pg) in backward::backward(op, node, &g) {
                        if !parent.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require gradients.
    fn topological_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests;
