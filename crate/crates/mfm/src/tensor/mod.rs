//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! Every operation is differentiable and unit-tested against central finite
//! differences in double precision (see the `fdiff` module).
//!
//! The engine is generic over the element type so the same network code runs
//! in `f32` for training and `f64` for gradient checks.

mod conv;
mod corr;
mod ops;

pub mod fdiff;

use std::cell::{Ref, RefCell};

use ndarray::{ArrayD, IxDyn};

pub use conv::{conv3d_shape, Conv3dSpec};
pub(crate) use corr::{val_cat_corr, val_gwc_corr};
pub(crate) use ops::{
    val_bilinear_up2d, val_deinterleave, val_interleave, val_soft_argmax1,
    val_softmax1,
};

/// Element type of all tensors: `f32` or `f64`.
pub trait Scalar:
    ndarray::NdFloat + num_traits::FromPrimitive + std::iter::Sum + Send + Sync + 'static
{
    /// Lossy constant conversion from `f64`.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant conversion")
    }
}

impl Scalar for f32 {}

impl Scalar for f64 {}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<F> = Box<dyn Fn(&[ArrayD<F>], &ArrayD<F>, &mut [Option<ArrayD<F>>])>;

struct Inner<F: Scalar> {
    values: Vec<ArrayD<F>>,
    backs: Vec<Option<BackFn<F>>>,
    grads: Vec<Option<ArrayD<F>>>,
}

/// Records one forward computation. Create a fresh tape per training
/// iteration; parameters are re-registered as leaves each time.
pub struct Tape<F: Scalar> {
    inner: RefCell<Inner<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner { values: Vec::new(), backs: Vec::new(), grads: Vec::new() }),
        }
    }

    pub(crate) fn push(&self, value: ArrayD<F>, back: Option<BackFn<F>>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.backs.push(back);
        Var(inner.values.len() - 1)
    }

    /// Registers a leaf tensor (input or parameter).
    pub fn input(&self, value: ArrayD<F>) -> Var {
        self.push(value, None)
    }

    /// Borrow of a node's value.
    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<F>> {
        Ref::map(self.inner.borrow(), |inner| &inner.values[v.0])
    }

    pub fn value_owned(&self, v: Var) -> ArrayD<F> {
        self.inner.borrow().values[v.0].clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().values[v.0].shape().to_vec()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<ArrayD<F>> {
        self.inner.borrow().grads.get(v.0).and_then(|g| g.clone())
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.values.len();
        assert_eq!(inner.values[loss.0].ndim(), 0, "backward target must be a scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(IxDyn(&[])));
        let Inner { values, backs, .. } = &mut *inner;
        for i in (0..n).rev() {
            if let Some(back) = &backs[i] {
                if let Some(g) = grads[i].take() {
                    back(values, &g, &mut grads);
                    grads[i] = Some(g);
                }
            }
        }
        inner.grads = grads;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Adds `delta` into the gradient slot `idx`.
pub(crate) fn accum<F: Scalar>(grads: &mut [Option<ArrayD<F>>], idx: usize, delta: ArrayD<F>) {
    match &mut grads[idx] {
        Some(g) => {
            g.zip_mut_with(&delta, |a, b| *a += *b);
        }
        slot @ None => *slot = Some(delta),
    }
}
