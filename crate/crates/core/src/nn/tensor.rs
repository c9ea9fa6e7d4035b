//! Reverse-mode autodiff over dynamically shaped dense arrays.
//!
//! Small tape-free design: every `Tensor` is a reference-counted graph node
//! holding its value, an optional gradient, its parents, and a backward
//! closure. Calling [`Tensor::backward`] on a scalar walks the graph in
//! reverse topological order and accumulates gradients into trainable
//! leaves. Graphs are built per forward pass and freed when the output is
//! dropped; under [`no_grad`] no graph is recorded at all.
//!
//! Values are kept in standard (C-contiguous) layout throughout so raw-slice
//! kernels and the matmul dispatch stay fast.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

/// Element type of the engine: `f32` for training speed, `f64` for
/// finite-difference gradient checks.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + PartialOrd
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn maximum(self, o: Self) -> Self;
    fn minimum(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
}

/// Storage dtype tag used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: Dtype = $dtype;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn powi(self, n: i32) -> Self {
                self.powi(n)
            }
            fn maximum(self, o: Self) -> Self {
                if self > o {
                    self
                } else {
                    o
                }
            }
            fn minimum(self, o: Self) -> Self {
                if self < o {
                    self
                } else {
                    o
                }
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32);
impl_scalar!(f64, Dtype::F64);

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
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` without recording any autodiff graph (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _guard = Guard(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

type BackwardFn<S> = Box<dyn Fn(&ArrayD<S>, &[Tensor<S>])>;

struct Node<S: Scalar> {
    id: u64,
    value: RefCell<ArrayD<S>>,
    grad: RefCell<Option<ArrayD<S>>>,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
    trainable: Cell<bool>,
}

pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> Tensor<S> {
    fn new_node(
        value: ArrayD<S>,
        parents: Vec<Tensor<S>>,
        backward: Option<BackwardFn<S>>,
        trainable: bool,
    ) -> Self {
        debug_assert!(value.is_standard_layout());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents,
                backward,
                trainable: Cell::new(trainable),
            }),
        }
    }

    /// Constant leaf: participates in forward math, receives no gradient.
    pub fn from_array(value: ArrayD<S>) -> Self {
        Self::new_node(as_standard(value), Vec::new(), None, false)
    }

    /// Trainable leaf: gradients accumulate here and optimizers update it.
    pub fn param(value: ArrayD<S>) -> Self {
        Self::new_node(as_standard(value), Vec::new(), None, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_array(ArrayD::from_elem(IxDyn(shape), S::ZERO))
    }

    pub fn scalar(v: S) -> Self {
        Self::from_array(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn value(&self) -> Ref<'_, ArrayD<S>> {
        self.node.value.borrow()
    }

    pub fn to_array(&self) -> ArrayD<S> {
        self.node.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads a scalar (0-d or single-element) tensor.
    pub fn item(&self) -> S {
        let v = self.node.value.borrow();
        assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    pub fn is_trainable(&self) -> bool {
        self.node.trainable.get()
    }

    /// Freezing a parameter removes it from future graphs; ops that only see
    /// frozen/constant inputs are not recorded.
    pub fn set_trainable(&self, trainable: bool) {
        self.node.trainable.set(trainable);
    }

    pub fn tracked(&self) -> bool {
        self.node.backward.is_some() || self.node.trainable.get()
    }

    pub fn grad(&self) -> Option<ArrayD<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrite the stored value (optimizer updates, checkpoint loads).
    pub fn set_value(&self, value: ArrayD<S>) {
        let mut v = self.node.value.borrow_mut();
        assert_eq!(v.shape(), value.shape(), "set_value shape mismatch");
        *v = as_standard(value);
    }

    /// In-place update of the stored value through a closure.
    pub fn update_value(&self, f: impl FnOnce(&mut ArrayD<S>)) {
        f(&mut self.node.value.borrow_mut());
    }

    pub fn accumulate_grad(&self, g: &ArrayD<S>) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Accumulate an owned gradient without copying when the slot is empty.
    pub fn accumulate_grad_owned(&self, g: ArrayD<S>) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Cut the graph: returns a constant leaf holding a copy of the value.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::from_array(self.to_array())
    }

    /// Reverse-mode sweep from a scalar output. Gradients of trainable
    /// leaves persist; intermediate gradients are freed as soon as consumed.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        if !self.tracked() {
            return;
        }
        let order = self.topo_order();
        self.accumulate_grad(&ArrayD::from_elem(self.node.value.borrow().raw_dim(), S::ONE));
        for t in order.iter().rev() {
            let Some(bf) = t.node.backward.as_ref() else {
                continue;
            };
            let g = t.node.grad.borrow().clone();
            if let Some(g) = g {
                bf(&g, &t.node.parents);
                // Intermediate grads are no longer needed once propagated.
                *t.node.grad.borrow_mut() = None;
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((t, i)) = stack.pop() {
            if i < t.node.parents.len() {
                let parent = t.node.parents[i].clone();
                stack.push((t, i + 1));
                if parent.node.backward.is_some() && !visited.contains(&parent.node.id) {
                    visited.insert(parent.node.id);
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

fn as_standard<S: Scalar>(a: ArrayD<S>) -> ArrayD<S> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Builds an op node; skips graph recording when no parent is tracked or
/// gradients are globally disabled.
pub(crate) fn make_op<S: Scalar>(
    value: ArrayD<S>,
    parents: Vec<Tensor<S>>,
    backward: impl Fn(&ArrayD<S>, &[Tensor<S>]) + 'static,
) -> Tensor<S> {
    let value = as_standard(value);
    if grad_enabled() && parents.iter().any(|p| p.tracked()) {
        Tensor::new_node(value, parents, Some(Box::new(backward)), false)
    } else {
        Tensor::from_array(value)
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("incompatible broadcast shapes {a:?} vs {b:?}");
        };
    }
    out
}

fn bview<'a, S: Scalar>(a: &'a ArrayD<S>, shape: &[usize]) -> ndarray::ArrayViewD<'a, S> {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", a.shape()))
}

/// Sum a broadcast gradient back down to `shape`, consuming the input.
pub(crate) fn reduce_to_shape_owned<S: Scalar>(g: ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    if g.shape() == shape {
        return g;
    }
    let mut out = g;
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            let summed = out.sum_axis(Axis(ax));
            out = summed.insert_axis(Axis(ax));
        }
    }
    debug_assert_eq!(out.shape(), shape);
    out
}

/// Sum a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to_shape<S: Scalar>(g: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    if g.shape() == shape {
        return g.clone();
    }
    reduce_to_shape_owned(g.clone(), shape)
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (broadcasting)
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, o: &Tensor<S>) -> Tensor<S> {
        let shape = broadcast_shape(&self.shape(), &o.shape());
        let out = &bview(&self.value(), &shape) + &bview(&o.value(), &shape);
        make_op(out, vec![self.clone(), o.clone()], move |g, ps| {
            if ps[0].tracked() {
                ps[0].accumulate_grad_owned(reduce_to_shape(g, &ps[0].shape()));
            }
            if ps[1].tracked() {
                ps[1].accumulate_grad_owned(reduce_to_shape(g, &ps[1].shape()));
            }
        })
    }

    pub fn sub(&self, o: &Tensor<S>) -> Tensor<S> {
        let shape = broadcast_shape(&self.shape(), &o.shape());
        let out = &bview(&self.value(), &shape) - &bview(&o.value(), &shape);
        make_op(out, vec![self.clone(), o.clone()], move |g, ps| {
            if ps[0].tracked() {
                ps[0].accumulate_grad_owned(reduce_to_shape(g, &ps[0].shape()));
            }
            if ps[1].tracked() {
                let neg = g.mapv(|x| -x);
                ps[1].accumulate_grad_owned(reduce_to_shape_owned(neg, &ps[1].shape()));
            }
        })
    }

    pub fn mul(&self, o: &Tensor<S>) -> Tensor<S> {
        let shape = broadcast_shape(&self.shape(), &o.shape());
        let out = &bview(&self.value(), &shape) * &bview(&o.value(), &shape);
        make_op(out, vec![self.clone(), o.clone()], move |g, ps| {
            let shape = g.shape().to_vec();
            if ps[0].tracked() {
                let gb = g * &bview(&ps[1].value(), &shape);
                ps[0].accumulate_grad_owned(reduce_to_shape_owned(gb, &ps[0].shape()));
            }
            if ps[1].tracked() {
                let gb = g * &bview(&ps[0].value(), &shape);
                ps[1].accumulate_grad_owned(reduce_to_shape_owned(gb, &ps[1].shape()));
            }
        })
    }

    pub fn div(&self, o: &Tensor<S>) -> Tensor<S> {
        let shape = broadcast_shape(&self.shape(), &o.shape());
        let out = &bview(&self.value(), &shape) / &bview(&o.value(), &shape);
        make_op(out, vec![self.clone(), o.clone()], move |g, ps| {
            let shape = g.shape().to_vec();
            if ps[0].tracked() {
                let gb = g / &bview(&ps[1].value(), &shape);
                ps[0].accumulate_grad_owned(reduce_to_shape_owned(gb, &ps[0].shape()));
            }
            if ps[1].tracked() {
                let bv = &ps[1].value();
                let av = &ps[0].value();
                let mut gb = g * &bview(av, &shape);
                let bb = bview(bv, &shape);
                ndarray::Zip::from(&mut gb).and(&bb).for_each(|x, &b| {
                    *x = -*x / (b * b);
                });
                ps[1].accumulate_grad_owned(reduce_to_shape_owned(gb, &ps[1].shape()));
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    fn unary(
        &self,
        out: ArrayD<S>,
        dfdx: impl Fn(&ArrayD<S> /* x */, &ArrayD<S> /* g */) -> ArrayD<S> + 'static,
    ) -> Tensor<S> {
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                let gx = dfdx(&ps[0].value(), g);
                ps[0].accumulate_grad(&gx);
            }
        })
    }

    pub fn neg(&self) -> Tensor<S> {
        self.unary(self.value().mapv(|x| -x), |_, g| g.mapv(|x| -x))
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        self.unary(self.value().mapv(|x| x * c), move |_, g| g.mapv(|x| x * c))
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        self.unary(self.value().mapv(|x| x + c), |_, g| g.clone())
    }

    pub fn exp(&self) -> Tensor<S> {
        let out = self.value().mapv(Scalar::exp);
        let saved = out.clone();
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                ps[0].accumulate_grad(&(g * &saved));
            }
        })
    }

    pub fn ln(&self) -> Tensor<S> {
        self.unary(self.value().mapv(Scalar::ln), |x, g| g / x)
    }

    pub fn sqrt(&self) -> Tensor<S> {
        let out = self.value().mapv(Scalar::sqrt);
        let saved = out.clone();
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                let two = S::from_f64(2.0);
                let gx = ndarray::Zip::from(g)
                    .and(&saved)
                    .map_collect(|&gi, &yi| gi / (two * yi));
                ps[0].accumulate_grad(&gx);
            }
        })
    }

    pub fn powi(&self, n: i32) -> Tensor<S> {
        self.unary(self.value().mapv(|x| x.powi(n)), move |x, g| {
            let nf = S::from_f64(n as f64);
            ndarray::Zip::from(g)
                .and(x)
                .map_collect(|&gi, &xi| gi * nf * xi.powi(n - 1))
        })
    }

    pub fn abs(&self) -> Tensor<S> {
        self.unary(self.value().mapv(Scalar::abs), |x, g| {
            ndarray::Zip::from(g).and(x).map_collect(|&gi, &xi| {
                if xi > S::ZERO {
                    gi
                } else if xi < S::ZERO {
                    -gi
                } else {
                    S::ZERO
                }
            })
        })
    }

    pub fn tanh(&self) -> Tensor<S> {
        let out = self.value().mapv(Scalar::tanh);
        let saved = out.clone();
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                let gx = ndarray::Zip::from(g)
                    .and(&saved)
                    .map_collect(|&gi, &yi| gi * (S::ONE - yi * yi));
                ps[0].accumulate_grad(&gx);
            }
        })
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let out = self.value().mapv(|x| S::ONE / (S::ONE + (-x).exp()));
        let saved = out.clone();
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                let gx = ndarray::Zip::from(g)
                    .and(&saved)
                    .map_collect(|&gi, &yi| gi * yi * (S::ONE - yi));
                ps[0].accumulate_grad(&gx);
            }
        })
    }

    pub fn relu(&self) -> Tensor<S> {
        self.unary(
            self.value().mapv(|x| if x > S::ZERO { x } else { S::ZERO }),
            |x, g| {
                ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gi, &xi| if xi > S::ZERO { gi } else { S::ZERO })
            },
        )
    }

    pub fn silu(&self) -> Tensor<S> {
        self.unary(
            self.value().mapv(|x| x / (S::ONE + (-x).exp())),
            |x, g| {
                ndarray::Zip::from(g).and(x).map_collect(|&gi, &xi| {
                    let s = S::ONE / (S::ONE + (-xi).exp());
                    gi * s * (S::ONE + xi * (S::ONE - s))
                })
            },
        )
    }

    /// Clamp with pass-through gradient on the closed interval.
    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        self.unary(
            self.value().mapv(|x| x.maximum(lo).minimum(hi)),
            move |x, g| {
                ndarray::Zip::from(g).and(x).map_collect(|&gi, &xi| {
                    if xi >= lo && xi <= hi {
                        gi
                    } else {
                        S::ZERO
                    }
                })
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    pub fn sum_all(&self) -> Tensor<S> {
        let s = self.value().sum();
        let shape = self.shape();
        make_op(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            move |g, ps| {
                if ps[0].tracked() {
                    let gv = *g.iter().next().unwrap();
                    ps[0].accumulate_grad(&ArrayD::from_elem(IxDyn(&shape), gv));
                }
            },
        )
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::from_f64(self.len() as f64);
        self.sum_all().scale(S::ONE / n)
    }

    /// Sum over `axes` (ascending order), optionally keeping reduced dims.
    pub fn sum_axes(&self, axes: &[usize], keep: bool) -> Tensor<S> {
        let mut out = self.to_array();
        for &ax in axes.iter().rev() {
            let summed = out.sum_axis(Axis(ax));
            out = if keep {
                summed.insert_axis(Axis(ax))
            } else {
                summed
            };
        }
        let in_shape = self.shape();
        let axes = axes.to_vec();
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                let mut gk = g.clone();
                if !keep {
                    for &ax in axes.iter() {
                        gk = gk.insert_axis(Axis(ax));
                    }
                }
                let gb = gk
                    .broadcast(IxDyn(&in_shape))
                    .expect("sum_axes backward broadcast")
                    .to_owned();
                ps[0].accumulate_grad(&gb);
            }
        })
    }

    pub fn mean_axes(&self, axes: &[usize], keep: bool) -> Tensor<S> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes, keep)
            .scale(S::ONE / S::from_f64(n as f64))
    }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    pub fn reshape(&self, shape: &[usize]) -> Tensor<S> {
        let in_shape = self.shape();
        let out = self
            .to_array()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {in_shape:?} to {shape:?}"));
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                let gr = g
                    .clone()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape backward");
                ps[0].accumulate_grad(&gr);
            }
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<S> {
        let out = {
            let v = self.value();
            v.view()
                .permuted_axes(IxDyn(axes))
                .as_standard_layout()
                .to_owned()
        };
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                let gp = g.view().permuted_axes(IxDyn(&inverse));
                ps[0].accumulate_grad_owned(gp.as_standard_layout().to_owned());
            }
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<S> {
        let out = bview(&self.value(), shape).to_owned();
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                ps[0].accumulate_grad(&reduce_to_shape(g, &ps[0].shape()));
            }
        })
    }

    pub fn slice_axis_op(&self, axis: usize, start: usize, end: usize) -> Tensor<S> {
        let out = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let in_shape = self.shape();
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                let mut gx = ArrayD::from_elem(IxDyn(&in_shape), S::ZERO);
                gx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                ps[0].accumulate_grad(&gx);
            }
        })
    }

    pub fn concat(axis: usize, parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.to_array()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &view_refs).expect("concat shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        make_op(out, parts.to_vec(), move |g, ps| {
            let mut offset = 0usize;
            for (i, p) in ps.iter().enumerate() {
                let len = sizes[i];
                if p.tracked() {
                    let gp = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + len))
                        .to_owned();
                    p.accumulate_grad(&gp.as_standard_layout().to_owned());
                }
                offset += len;
            }
        })
    }

    /// Row gather from a 2-D table; backward scatter-adds into the table.
    pub fn index_select0(&self, indices: &[usize]) -> Tensor<S> {
        let table = self.value();
        assert_eq!(table.ndim(), 2, "index_select0 requires a 2-D table");
        let cols = table.shape()[1];
        let mut out = ArrayD::from_elem(IxDyn(&[indices.len(), cols]), S::ZERO);
        {
            let t = table.as_slice().unwrap();
            let o = out.as_slice_mut().unwrap();
            for (r, &idx) in indices.iter().enumerate() {
                o[r * cols..(r + 1) * cols].copy_from_slice(&t[idx * cols..(idx + 1) * cols]);
            }
        }
        drop(table);
        let indices = indices.to_vec();
        let table_shape = self.shape();
        make_op(out, vec![self.clone()], move |g, ps| {
            if ps[0].tracked() {
                let mut gt = ArrayD::from_elem(IxDyn(&table_shape), S::ZERO);
                let cols = table_shape[1];
                let gs = g.as_slice().unwrap();
                let gm = gt.as_slice_mut().unwrap();
                for (r, &idx) in indices.iter().enumerate() {
                    for c in 0..cols {
                        gm[idx * cols + c] += gs[r * cols + c];
                    }
                }
                ps[0].accumulate_grad(&gt);
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    /// 2-D matrix product `(M,K)·(K,N)`.
    pub fn matmul(&self, o: &Tensor<S>) -> Tensor<S> {
        let out = {
            let av = self.value();
            let bv = o.value();
            let a = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let b = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            a.dot(&b).into_dyn()
        };
        make_op(out, vec![self.clone(), o.clone()], move |g, ps| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            if ps[0].tracked() {
                let bvv = ps[1].value();
                let bv = bvv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                ps[0].accumulate_grad_owned(g2.dot(&bv.t()).into_dyn());
            }
            if ps[1].tracked() {
                let avv = ps[0].value();
                let av = avv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                ps[1].accumulate_grad_owned(av.t().dot(&g2).into_dyn());
            }
        })
    }

    /// Batched matrix product `(B,M,K)·(B,K,N)`.
    pub fn bmm(&self, o: &Tensor<S>) -> Tensor<S> {
        let out = {
            let avv = self.value();
            let bvv = o.value();
            let a = avv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let b = bvv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (bs, m, _k) = a.dim();
            let n = b.dim().2;
            assert_eq!(a.dim().0, b.dim().0, "bmm batch mismatch");
            assert_eq!(a.dim().2, b.dim().1, "bmm inner-dim mismatch");
            let mut out = ndarray::Array3::<S>::from_elem((bs, m, n), S::ZERO);
            for i in 0..bs {
                let prod = a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i));
                out.index_axis_mut(Axis(0), i).assign(&prod);
            }
            out.into_dyn()
        };
        make_op(out, vec![self.clone(), o.clone()], move |g, ps| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let bs = g3.dim().0;
            if ps[0].tracked() {
                let bvv = ps[1].value();
                let bv = bvv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut ga =
                    ndarray::Array3::<S>::from_elem((bs, g3.dim().1, bv.dim().1), S::ZERO);
                for i in 0..bs {
                    let prod = g3
                        .index_axis(Axis(0), i)
                        .dot(&bv.index_axis(Axis(0), i).t());
                    ga.index_axis_mut(Axis(0), i).assign(&prod);
                }
                ps[0].accumulate_grad_owned(ga.into_dyn());
            }
            if ps[1].tracked() {
                let avv = ps[0].value();
                let av = avv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut gb =
                    ndarray::Array3::<S>::from_elem((bs, av.dim().2, g3.dim().2), S::ZERO);
                for i in 0..bs {
                    let prod = av
                        .index_axis(Axis(0), i)
                        .t()
                        .dot(&g3.index_axis(Axis(0), i));
                    gb.index_axis_mut(Axis(0), i).assign(&prod);
                }
                ps[1].accumulate_grad_owned(gb.into_dyn());
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Softmax (composed from primitives; max-shift is a constant)
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    pub fn softmax(&self, axis: usize) -> Tensor<S> {
        let maxes = {
            let v = self.value();
            let mut m = v.map_axis(Axis(axis), |lane| {
                lane.iter().cloned().fold(S::from_f64(f64::NEG_INFINITY), Scalar::maximum)
            });
            m = m.insert_axis(Axis(axis));
            m
        };
        let shifted = self.sub(&Tensor::from_array(maxes));
        let e = shifted.exp();
        let denom = e.sum_axes(&[axis], true);
        e.div(&denom)
    }
}
