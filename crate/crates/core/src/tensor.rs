//! Reverse-mode autodiff over `ndarray` tensors.
//!
//! Graphs are built eagerly: every op computes its value and records a
//! backward closure referencing its parents. `backward()` walks the graph in
//! reverse creation order and accumulates gradients into leaves. Graphs are
//! per-step and dropped after the optimizer update, so leaf values may be
//! mutated between steps without invalidating anything.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Per-parent gradient contributions returned by a backward closure.
type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &ArrayD<S>) -> Vec<Option<ArrayD<S>>>>;

struct Inner<S: Scalar> {
    id: u64,
    value: RefCell<ArrayD<S>>,
    grad: RefCell<Option<ArrayD<S>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// A node in the autodiff graph. Cloning is cheap (shared reference).
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Trainable leaf (parameter).
    pub fn leaf(value: ArrayD<S>) -> Self {
        Self::new(value, true, Vec::new(), None)
    }

    /// Non-trainable constant.
    pub fn constant(value: ArrayD<S>) -> Self {
        Self::new(value, false, Vec::new(), None)
    }

    /// 0-d constant scalar.
    pub fn scalar(value: S) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn new(
        value: ArrayD<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward: Option<BackwardFn<S>>,
    ) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents,
                backward,
            }),
        }
    }

    fn from_op(value: ArrayD<S>, parents: Vec<Tensor<S>>, backward: BackwardFn<S>) -> Self {
        let requires = parents.iter().any(|p| p.inner.requires_grad.get());
        if requires {
            Self::new(value, true, parents, Some(backward))
        } else {
            Self::new(value, false, Vec::new(), None)
        }
    }

    pub fn value(&self) -> Ref<'_, ArrayD<S>> {
        self.inner.value.borrow()
    }

    pub fn array(&self) -> ArrayD<S> {
        self.inner.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Disable gradient tracking on a leaf (freezing a parameter).
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    /// Scalar view of a 0-d or single-element tensor.
    pub fn item(&self) -> S {
        let v = self.inner.value.borrow();
        debug_assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        *v.iter().next().expect("empty tensor")
    }

    pub fn grad(&self) -> Option<ArrayD<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite a leaf's value in place (optimizer update).
    pub fn set_value(&self, value: ArrayD<S>) {
        debug_assert_eq!(self.inner.value.borrow().shape(), value.shape());
        *self.inner.value.borrow_mut() = value;
    }

    /// Mutate the leaf value through a closure.
    pub fn update_value(&self, f: impl FnOnce(&mut ArrayD<S>)) {
        f(&mut self.inner.value.borrow_mut());
    }

    fn accumulate_grad(&self, g: ArrayD<S>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse pass seeded with `dL/dself = 1`. `self` must be a scalar.
    pub fn backward(&self) {
        let seed = ArrayD::from_elem(self.inner.value.borrow().raw_dim(), S::one());
        self.backward_with(seed);
    }

    pub fn backward_with(&self, seed: ArrayD<S>) {
        if !self.inner.requires_grad.get() {
            return;
        }
        // Topological order: ids increase with creation, parents precede children.
        let mut topo: Vec<Tensor<S>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<Tensor<S>> = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                if p.inner.requires_grad.get() && !seen.contains(&p.inner.id) {
                    stack.push(p.clone());
                }
            }
            topo.push(t);
        }
        topo.sort_unstable_by_key(|t| std::cmp::Reverse(t.inner.id));

        self.accumulate_grad(seed);
        for node in &topo {
            let gout = match node.inner.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            if let Some(bw) = node.inner.backward.as_ref() {
                let contributions = bw(node, &gout);
                debug_assert_eq!(contributions.len(), node.inner.parents.len());
                for (parent, contrib) in node.inner.parents.iter().zip(contributions) {
                    if let (true, Some(g)) = (parent.inner.requires_grad.get(), contrib) {
                        debug_assert_eq!(
                            g.shape(),
                            parent.inner.value.borrow().shape(),
                            "gradient shape mismatch"
                        );
                        parent.accumulate_grad(g);
                    }
                }
                // Intermediate grads are not needed once consumed.
                if node.inner.id != self.inner.id || node.inner.backward.is_some() {
                    node.zero_grad();
                }
            }
        }
    }

    /// Value-only copy severed from the graph.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::constant(self.array())
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Sum `g` down to `shape` (inverse of broadcasting).
pub(crate) fn reduce_to_shape<S: Scalar>(g: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, (&od, &td)) in out.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if od != td {
            debug_assert_eq!(td, 1);
            let summed = out.sum_axis(Axis(axis));
            out = summed.insert_axis(Axis(axis));
        }
    }
    out
}

fn broadcast_val<'a, S: Scalar>(v: &'a ArrayD<S>, shape: &[usize]) -> ArrayViewD<'a, S> {
    v.broadcast(IxDyn(shape)).expect("checked broadcast")
}

// ---------------------------------------------------------------------------
// elementwise binary ops (with broadcasting)

macro_rules! binary_op {
    ($name:ident, $fwd:expr, $bwd_a:expr, $bwd_b:expr) => {
        pub fn $name(&self, other: &Tensor<S>) -> Tensor<S> {
            let av = self.array();
            let bv = other.array();
            let shape = broadcast_shape(av.shape(), bv.shape()).expect("broadcast");
            let a = broadcast_val(&av, &shape);
            let b = broadcast_val(&bv, &shape);
            let mut out = ArrayD::zeros(IxDyn(&shape));
            ndarray::azip!((o in &mut out, &x in &a, &y in &b) *o = $fwd(x, y));
            let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
            Tensor::from_op(
                out,
                vec![self.clone(), other.clone()],
                Box::new(move |node, g| {
                    let av = node.inner.parents[0].array();
                    let bv = node.inner.parents[1].array();
                    let a = broadcast_val(&av, g.shape());
                    let b = broadcast_val(&bv, g.shape());
                    let mut ga = ArrayD::zeros(g.raw_dim());
                    ndarray::azip!((o in &mut ga, &gg in g, &x in &a, &y in &b) *o = $bwd_a(gg, x, y));
                    let mut gb = ArrayD::zeros(g.raw_dim());
                    ndarray::azip!((o in &mut gb, &gg in g, &x in &a, &y in &b) *o = $bwd_b(gg, x, y));
                    vec![
                        Some(reduce_to_shape(&ga, &sa)),
                        Some(reduce_to_shape(&gb, &sb)),
                    ]
                }),
            )
        }
    };
}

impl<S: Scalar> Tensor<S> {
    binary_op!(add, |x: S, y: S| x + y, |g: S, _x: S, _y: S| g, |g: S,
     _x: S,
     _y: S| g);
    binary_op!(sub, |x: S, y: S| x - y, |g: S, _x: S, _y: S| g, |g: S,
     _x: S,
     _y: S| -g);
    binary_op!(mul, |x: S, y: S| x * y, |g: S, _x: S, y: S| g * y, |g: S,
     x: S,
     _y: S| g * x);
    binary_op!(
        div,
        |x: S, y: S| x / y,
        |g: S, _x: S, y: S| g / y,
        |g: S, x: S, y: S| -g * x / (y * y)
    );
}

// ---------------------------------------------------------------------------
// elementwise unary ops

impl<S: Scalar> Tensor<S> {
    fn unary(
        &self,
        fwd: impl Fn(S) -> S,
        bwd: impl Fn(S, S, S) -> S + 'static, // (gout, x, y) -> gin
    ) -> Tensor<S> {
        let value = self.value().mapv(&fwd);
        let y = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |node, g| {
                let x = node.inner.parents[0].array();
                let mut gi = ArrayD::zeros(g.raw_dim());
                ndarray::azip!((o in &mut gi, &gg in g, &xv in &x, &yv in &y) *o = bwd(gg, xv, yv));
                vec![Some(gi)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<S> {
        self.unary(|x| -x, |g, _, _| -g)
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        self.unary(move |x| x * c, move |g, _, _| g * c)
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        self.unary(move |x| x + c, |g, _, _| g)
    }

    pub fn relu(&self) -> Tensor<S> {
        self.unary(
            |x| if x > S::zero() { x } else { S::zero() },
            |g, x, _| if x > S::zero() { g } else { S::zero() },
        )
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.unary(|x| x.tanh(), |g, _, y| g * (S::one() - y * y))
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.unary(
            |x| S::one() / (S::one() + (-x).exp()),
            |g, _, y| g * y * (S::one() - y),
        )
    }

    pub fn exp(&self) -> Tensor<S> {
        self.unary(|x| x.exp(), |g, _, y| g * y)
    }

    pub fn ln(&self) -> Tensor<S> {
        self.unary(|x| x.ln(), |g, x, _| g / x)
    }

    pub fn sqrt(&self) -> Tensor<S> {
        self.unary(
            |x| x.sqrt(),
            |g, _, y| g / (S::of_f64(2.0) * y),
        )
    }

    /// Clamp into `[lo, hi]`; gradient passes inside the interval.
    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |g, x, _| {
                if x >= lo && x <= hi {
                    g
                } else {
                    S::zero()
                }
            },
        )
    }

    /// Elementwise `max(x, m)` against a broadcastable constant floor.
    pub fn max_with(&self, floor: &ArrayD<S>) -> Tensor<S> {
        let xv = self.array();
        let f = broadcast_val(floor, xv.shape()).to_owned();
        let mut out = ArrayD::zeros(xv.raw_dim());
        ndarray::azip!((o in &mut out, &x in &xv, &m in &f) *o = x.max(m));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |node, g| {
                let x = node.inner.parents[0].array();
                let mut gi = ArrayD::zeros(g.raw_dim());
                ndarray::azip!((o in &mut gi, &gg in g, &xv in &x, &m in &f)
                    *o = if xv >= m { gg } else { S::zero() });
                vec![Some(gi)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// reductions & movement

impl<S: Scalar> Tensor<S> {
    pub fn sum_all(&self) -> Tensor<S> {
        let v = self.value().sum();
        let shape = self.shape();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), v),
            vec![self.clone()],
            Box::new(move |_, g| {
                let gs = *g.iter().next().expect("scalar grad");
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gs))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::from_count(self.value().len());
        self.sum_all().scale(S::one() / n)
    }

    /// Sum over `axes`, keeping reduced axes as size 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor<S> {
        let mut v = self.array();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            let summed = v.sum_axis(Axis(ax));
            v = summed.insert_axis(Axis(ax));
        }
        let in_shape = self.shape();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |_, g| {
                let gb = broadcast_val(g, &in_shape).to_owned();
                vec![Some(gb)]
            }),
        )
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Tensor<S> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(S::one() / S::from_count(n))
    }

    /// Global average pool over the two trailing spatial axes of a 4-d tensor,
    /// producing `(b, c)`.
    pub fn gap(&self) -> Tensor<S> {
        debug_assert_eq!(self.shape().len(), 4);
        let (b, c) = (self.shape()[0], self.shape()[1]);
        self.mean_axes(&[2, 3]).reshape(&[b, c])
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<S> {
        let in_shape = self.shape();
        let v = self
            .array()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |_, g| {
                let gb = g
                    .clone()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape grad");
                vec![Some(gb)]
            }),
        )
    }

    /// Row selection (axis 0) with duplicate indices allowed; backward
    /// scatter-adds into the source rows.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor<S> {
        let v = self.array();
        let picked = v.select(Axis(0), indices);
        let idx = indices.to_vec();
        let in_shape = self.shape();
        Tensor::from_op(
            picked.into_dyn(),
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gi = ArrayD::zeros(IxDyn(&in_shape));
                for (row, &src) in idx.iter().enumerate() {
                    let gslice = g.index_axis(Axis(0), row);
                    let mut dst = gi.index_axis_mut(Axis(0), src);
                    dst += &gslice;
                }
                vec![Some(gi)]
            }),
        )
    }
}

/// Concatenate along axis 0.
pub fn concat0<S: Scalar>(tensors: &[Tensor<S>]) -> Tensor<S> {
    assert!(!tensors.is_empty());
    if tensors.len() == 1 {
        // still insert a node so backward splits stay uniform
        return tensors[0].reshape(&tensors[0].shape());
    }
    let arrays: Vec<ArrayD<S>> = tensors.iter().map(|t| t.array()).collect();
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    let out = ndarray::concatenate(Axis(0), &views).expect("concat0 shape mismatch");
    let sizes: Vec<usize> = arrays.iter().map(|a| a.shape()[0]).collect();
    Tensor::from_op(
        out,
        tensors.to_vec(),
        Box::new(move |_, g| {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut offset = 0usize;
            for &n in &sizes {
                let part = g
                    .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + n))
                    .to_owned();
                grads.push(Some(part));
                offset += n;
            }
            grads
        }),
    )
}

// ---------------------------------------------------------------------------
// linear algebra

impl<S: Scalar> Tensor<S> {
    /// 2-d matrix product.
    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        let a = self
            .array()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let b = other
            .array()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        let out = a.dot(&b);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(move |node, g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad 2-d");
                let a = node.inner.parents[0]
                    .array()
                    .into_dimensionality::<Ix2>()
                    .expect("lhs 2-d");
                let b = node.inner.parents[1]
                    .array()
                    .into_dimensionality::<Ix2>()
                    .expect("rhs 2-d");
                let ga = g2.dot(&b.t()).into_dyn();
                let gb = a.t().dot(&g2).into_dyn();
                vec![Some(ga), Some(gb)]
            }),
        )
    }
}

impl<S: Scalar> Tensor<S> {
    /// Column selection (axis 1) with scatter-add backward.
    pub fn select_cols(&self, indices: &[usize]) -> Tensor<S> {
        let v = self.array();
        let picked = v.select(Axis(1), indices);
        let idx = indices.to_vec();
        let in_shape = self.shape();
        Tensor::from_op(
            picked.into_dyn(),
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gi = ArrayD::zeros(IxDyn(&in_shape));
                for (col, &src) in idx.iter().enumerate() {
                    let gslice = g.index_axis(Axis(1), col);
                    let mut dst = gi.index_axis_mut(Axis(1), src);
                    dst += &gslice;
                }
                vec![Some(gi)]
            }),
        )
    }

    /// 2-d transpose.
    pub fn transpose2d(&self) -> Tensor<S> {
        let v = self
            .array()
            .into_dimensionality::<Ix2>()
            .expect("transpose2d on non-2d tensor");
        Tensor::from_op(
            v.t().as_standard_layout().to_owned().into_dyn(),
            vec![self.clone()],
            Box::new(|_, g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad 2-d");
                vec![Some(g2.t().as_standard_layout().to_owned().into_dyn())]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// fused NN ops

impl<S: Scalar> Tensor<S> {
    /// Mean cross-entropy of row logits against integer labels.
    pub fn cross_entropy_mean(&self, labels: &[usize]) -> Tensor<S> {
        let logits = self.array().into_dimensionality::<Ix2>().expect("2-d logits");
        let (b, c) = logits.dim();
        assert_eq!(b, labels.len(), "label count mismatch");
        assert!(labels.iter().all(|&y| y < c), "label out of range");
        let mut probs = ndarray::Array2::<S>::zeros((b, c));
        let mut total = S::zero();
        for (i, row) in logits.outer_iter().enumerate() {
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for &x in row.iter() {
                z += (x - m).exp();
            }
            let lse = m + z.ln();
            total += lse - row[labels[i]];
            for (j, &x) in row.iter().enumerate() {
                probs[(i, j)] = (x - m).exp() / z;
            }
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / S::from_count(b));
        let labels = labels.to_vec();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |_, g| {
                let gs = *g.iter().next().expect("scalar grad");
                let mut gi = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gi[(i, y)] -= S::one();
                }
                gi *= gs / S::from_count(b);
                vec![Some(gi.into_dyn())]
            }),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Tensor<S> {
        let logits = self.array().into_dimensionality::<Ix2>().expect("2-d logits");
        let (b, c) = logits.dim();
        let mut out = ndarray::Array2::<S>::zeros((b, c));
        for (i, row) in logits.outer_iter().enumerate() {
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for &x in row.iter() {
                z += (x - m).exp();
            }
            let lse = m + z.ln();
            for (j, &x) in row.iter().enumerate() {
                out[(i, j)] = x - lse;
            }
        }
        let probs = out.mapv(|v| v.exp());
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |_, g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad 2-d");
                let rowsum = g2.sum_axis(Axis(1)).insert_axis(Axis(1));
                let gi = &g2 - &(&probs * &rowsum);
                vec![Some(gi.into_dyn())]
            }),
        )
    }

    /// Straight-through estimator: forward emits `hard`, backward passes the
    /// upstream gradient to the (soft) parent unchanged.
    pub fn straight_through(&self, hard: ArrayD<S>) -> Tensor<S> {
        debug_assert_eq!(hard.shape(), self.value().shape());
        Tensor::from_op(
            hard,
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.clone())]),
        )
    }
}

impl<S: Scalar> Tensor<S> {
    /// Fused batch normalization over the given reduction axes (training
    /// mode, batch statistics). `gamma`/`beta` are broadcastable to `x`.
    /// Returns `(y, batch_mean, batch_var)`; the statistics are plain values
    /// for running-average upkeep.
    pub fn batchnorm_train(
        &self,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        axes: &[usize],
        eps: S,
    ) -> (Tensor<S>, ArrayD<S>, ArrayD<S>) {
        let x = self.array();
        let m: usize = axes.iter().map(|&a| x.shape()[a]).product();
        let inv_m = S::one() / S::from_count(m);
        let mut mean = x.clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            let s = mean.sum_axis(Axis(ax));
            mean = s.insert_axis(Axis(ax));
        }
        mean.mapv_inplace(|v| v * inv_m);
        let meanb = broadcast_val(&mean, x.shape()).to_owned();
        let mut var = ArrayD::zeros(x.raw_dim());
        ndarray::azip!((o in &mut var, &xv in &x, &mu in &meanb) *o = (xv - mu) * (xv - mu));
        for &ax in sorted.iter().rev() {
            let s = var.sum_axis(Axis(ax));
            var = s.insert_axis(Axis(ax));
        }
        var.mapv_inplace(|v| v * inv_m);
        let inv_sigma = var.mapv(|v| S::one() / (v + eps).sqrt());
        let inv_sigma_b = broadcast_val(&inv_sigma, x.shape()).to_owned();
        let mut xhat = ArrayD::zeros(x.raw_dim());
        ndarray::azip!((o in &mut xhat, &xv in &x, &mu in &meanb, &is in &inv_sigma_b)
            *o = (xv - mu) * is);
        let gv = gamma.array();
        let bv = beta.array();
        let gb = broadcast_val(&gv, x.shape()).to_owned();
        let bb = broadcast_val(&bv, x.shape()).to_owned();
        let mut y = ArrayD::zeros(x.raw_dim());
        ndarray::azip!((o in &mut y, &xh in &xhat, &g in &gb, &b in &bb) *o = xh * g + b);

        let axes_bw = sorted.clone();
        let gshape = gv.shape().to_vec();
        let bshape = bv.shape().to_vec();
        let out = Tensor::from_op(
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node, g| {
                let gv = node.inner.parents[1].array();
                let gb = broadcast_val(&gv, g.shape()).to_owned();
                // reductions of g and g*xhat over the normalization axes
                let reduce = |a: &ArrayD<S>| {
                    let mut r = a.clone();
                    for &ax in axes_bw.iter().rev() {
                        let s = r.sum_axis(Axis(ax));
                        r = s.insert_axis(Axis(ax));
                    }
                    r
                };
                let sum_g = reduce(g);
                let mut gxhat = ArrayD::zeros(g.raw_dim());
                ndarray::azip!((o in &mut gxhat, &gg in g, &xh in &xhat) *o = gg * xh);
                let sum_gx = reduce(&gxhat);
                let dgamma = reduce_to_shape(&sum_gx, &gshape);
                let dbeta = reduce_to_shape(&sum_g, &bshape);
                let sum_g_b = broadcast_val(&sum_g, g.shape()).to_owned();
                let sum_gx_b = broadcast_val(&sum_gx, g.shape()).to_owned();
                let mut dx = ArrayD::zeros(g.raw_dim());
                ndarray::azip!((o in &mut dx, &gg in g, &xh in &xhat,
                                &sg in &sum_g_b, &sgx in &sum_gx_b)
                    *o = gg - (sg + xh * sgx) * inv_m);
                ndarray::azip!((o in &mut dx, &ga in &gb, &is in &inv_sigma_b)
                    *o = *o * ga * is);
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        );
        (out, mean, var)
    }

    /// Fused batch normalization with fixed statistics (evaluation mode).
    pub fn batchnorm_eval(
        &self,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        mean: &ArrayD<S>,
        var: &ArrayD<S>,
        eps: S,
    ) -> Tensor<S> {
        let x = self.array();
        let inv_sigma = var.mapv(|v| S::one() / (v + eps).sqrt());
        let meanb = broadcast_val(mean, x.shape()).to_owned();
        let inv_sigma_b = broadcast_val(&inv_sigma, x.shape()).to_owned();
        let gv = gamma.array();
        let bv = beta.array();
        let gb = broadcast_val(&gv, x.shape()).to_owned();
        let bb = broadcast_val(&bv, x.shape()).to_owned();
        let mut y = ArrayD::zeros(x.raw_dim());
        let mut xhat = ArrayD::zeros(x.raw_dim());
        ndarray::azip!((o in &mut xhat, &xv in &x, &mu in &meanb, &is in &inv_sigma_b)
            *o = (xv - mu) * is);
        ndarray::azip!((o in &mut y, &xh in &xhat, &g in &gb, &b in &bb) *o = xh * g + b);
        let gshape = gv.shape().to_vec();
        let bshape = bv.shape().to_vec();
        Tensor::from_op(
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node, g| {
                let gv = node.inner.parents[1].array();
                let gb = broadcast_val(&gv, g.shape()).to_owned();
                let mut dx = ArrayD::zeros(g.raw_dim());
                ndarray::azip!((o in &mut dx, &gg in g, &ga in &gb, &is in &inv_sigma_b)
                    *o = gg * ga * is);
                let mut gxhat = ArrayD::zeros(g.raw_dim());
                ndarray::azip!((o in &mut gxhat, &gg in g, &xh in &xhat) *o = gg * xh);
                let dgamma = reduce_to_shape(&gxhat, &gshape);
                let dbeta = reduce_to_shape(g, &bshape);
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// convolution

/// 2-d convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - self.dilation * (kernel - 1) - 1) / self.stride + 1
    }
}

fn im2col<S: Scalar>(
    x: &ArrayD<S>,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> (ndarray::Array2<S>, usize, usize) {
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = spec.out_size(h, kh);
    let ow = spec.out_size(w, kw);
    let mut cols = ndarray::Array2::<S>::zeros((b * oh * ow, cin * kh * kw));
    let xs = x.as_slice().expect("contiguous input");
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let mut col = 0usize;
                for ci in 0..cin {
                    let base = (bi * cin + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize
                            - spec.padding as isize;
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                - spec.padding as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                cols[(row, col)] =
                                    xs[base + iy as usize * w + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    gcols: &ndarray::Array2<S>,
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> ArrayD<S> {
    let oh = spec.out_size(h, kh);
    let ow = spec.out_size(w, kw);
    let mut gx = ArrayD::<S>::zeros(IxDyn(&[b, cin, h, w]));
    let gs = gx.as_slice_mut().expect("contiguous grad");
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                let mut col = 0usize;
                for ci in 0..cin {
                    let base = (bi * cin + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize
                            - spec.padding as isize;
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                - spec.padding as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                gs[base + iy as usize * w + ix as usize] += gcols[(row, col)];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    gx
}

impl<S: Scalar> Tensor<S> {
    /// 2-d convolution: input `(b, cin, h, w)`, weight `(cout, cin, kh, kw)`,
    /// optional bias `(cout,)`.
    pub fn conv2d(&self, weight: &Tensor<S>, bias: Option<&Tensor<S>>, spec: ConvSpec) -> Tensor<S> {
        let x = self.array().as_standard_layout().to_owned();
        let wv = weight.array();
        let (cout, cin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(
            x.shape()[1],
            cin,
            "conv2d: input channels {} != weight channels {}",
            x.shape()[1],
            cin
        );
        let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        // pointwise convolutions reduce to a matrix product on the raw layout
        let pointwise =
            kh == 1 && kw == 1 && spec.stride == 1 && spec.padding == 0 && spec.dilation == 1;
        let (cols, oh, ow) = if pointwise {
            let m = x
                .view()
                .into_shape_with_order((b, cin, h * w))
                .expect("pointwise reshape")
                .permuted_axes([0, 2, 1])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((b * h * w, cin))
                .expect("pointwise cols");
            (m, h, w)
        } else {
            im2col(&x, kh, kw, spec)
        };
        let wmat = wv
            .clone()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("weight reshape");
        // (b*oh*ow, cout)
        let mut out2 = cols.dot(&wmat.t());
        if let Some(bt) = bias {
            let bv = bt.array();
            let brow = bv.view().into_shape_with_order((1, cout)).expect("bias row");
            out2 += &brow;
        }
        let out = out2
            .into_shape_with_order((b, oh, ow, cout))
            .expect("out reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
            .into_dyn();

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            out,
            parents,
            Box::new(move |node, g| {
                // g: (b, cout, oh, ow) -> (b*oh*ow, cout)
                let gmat = g
                    .view()
                    .permuted_axes(vec![0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((b * oh * ow, cout))
                    .expect("grad reshape");
                let wv = node.inner.parents[1].array();
                let wmat = wv
                    .clone()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .expect("weight reshape");
                let gw = gmat
                    .t()
                    .dot(&cols)
                    .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                    .expect("gw reshape");
                let gcols = gmat.dot(&wmat);
                let gx = if pointwise {
                    gcols
                        .into_shape_with_order((b, h * w, cin))
                        .expect("pointwise grad")
                        .permuted_axes([0, 2, 1])
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(IxDyn(&[b, cin, h, w]))
                        .expect("pointwise grad reshape")
                } else {
                    col2im(&gcols, b, cin, h, w, kh, kw, spec)
                };
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    let gb = gmat.sum_axis(Axis(0)).into_dyn();
                    grads.push(Some(gb));
                }
                grads
            }),
        )
    }
}
