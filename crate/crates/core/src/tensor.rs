//! Dense tensors and a reverse-mode differentiation tape.
//!
//! A [`Tensor`] is a row-major buffer with a shape; a [`Tape`] records the
//! operations of one forward pass and replays them backwards to accumulate
//! gradients. The tape is rebuilt for every forward pass, which keeps the
//! lifetime story trivial: values live in the tape, gradients are produced
//! by [`Tape::backward`], and parameter updates read them out by [`Var`].
//!
//! The element type is generic over [`Scalar`] so the same graph code runs
//! in `f32` for training and in `f64` inside the finite-difference checks,
//! where single precision would drown the comparison in rounding noise.

use crate::rng::Rng;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of tensors: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to scalar")
    }
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match buffer length {}", shape, data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Glorot-uniform init: U(-l, l) with l = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64c(rng.uniform(-limit, limit))).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64c(rng.uniform(lo, hi))).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn size(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.size(), 1, "item() requires a one-element tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Cast elementwise through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
        }
    }
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// Run `f(i, row_i)` over the rows of `out`. Each row is written by exactly
/// one call with a fixed internal accumulation order, so the result does not
/// depend on the number of threads.
#[cfg(feature = "parallel")]
fn for_each_row<T: Send, F: Fn(usize, &mut [T]) + Sync>(out: &mut [T], cols: usize, f: F) {
    use rayon::prelude::*;
    if out.len() >= 1 << 14 {
        out.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
}

#[cfg(not(feature = "parallel"))]
fn for_each_row<T: Send, F: Fn(usize, &mut [T]) + Sync>(out: &mut [T], cols: usize, f: F) {
    out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

/// c += a · b with a: [m,k], b: [k,n], c: [m,n].
pub(crate) fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            axpy(aip, &b[p * n..(p + 1) * n], crow);
        }
    });
}

/// c += a · bᵀ with a: [m,k], b: [n,k], c: [m,n].
pub(crate) fn matmul_nt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cij) in crow.iter_mut().enumerate() {
            *cij += dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
}

/// c += aᵀ · b with a: [m,k], b: [m,n], c: [k,n].
pub(crate) fn matmul_tn_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for_each_row(c, n, |p, crow| {
        for i in 0..m {
            axpy(a[i * k + p], &b[i * n..(i + 1) * n], crow);
        }
    });
}

/// Handle into a [`Tape`]: identifies one recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackFn<T> = Box<dyn Fn(&[Tensor<T>], &Tensor<T>, &mut GradSink<T>)>;

/// Mutable view of the gradient buffers during backpropagation.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    /// Gradient buffer for `v`, allocated as zeros on first touch.
    pub fn entry(&mut self, v: Var, shape: &[usize]) -> &mut Tensor<T> {
        self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }
}

/// Records one forward pass and differentiates it in reverse.
pub struct Tape<T> {
    vals: Vec<Tensor<T>>,
    backs: Vec<Option<BackFn<T>>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), backs: Vec::new(), grads: Vec::new() }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, back: Option<BackFn<T>>) -> Var {
        debug_assert!(value.all_finite(), "tape op produced a non-finite value");
        self.vals.push(value);
        self.backs.push(back);
        Var(self.vals.len() - 1)
    }

    pub(crate) fn push_op(&mut self, value: Tensor<T>, back: BackFn<T>) -> Var {
        self.push(value, Some(back))
    }

    /// Index the next pushed node will receive; lets a backward closure
    /// refer to its own output value.
    fn next_idx(&self) -> usize {
        self.vals.len()
    }

    /// Record an input value. Its gradient is available after `backward`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0]
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` took part.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Propagate from a scalar loss. Gradients accumulate additively over
    /// every use of a value; calling again re-runs from scratch.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.vals[loss.0].size(), 1, "backward requires a scalar loss");
        let n = self.vals.len();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..n).rev() {
            if self.backs[i].is_none() || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            let back = self.backs[i].as_ref().expect("checked above");
            back(&self.vals, &g, &mut GradSink { grads: &mut grads });
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    // ---- arithmetic ----

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.rank(), 2, "matmul lhs must be rank 2, got {:?}", ta.shape());
        assert_eq!(tb.rank(), 2, "matmul rhs must be rank 2, got {:?}", tb.shape());
        let (m, k) = (ta.dim(0), ta.dim(1));
        let (k2, n) = (tb.dim(0), tb.dim(1));
        assert_eq!(k, k2, "matmul inner dimensions disagree: {} vs {}", k, k2);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(out.data_mut(), ta.data(), tb.data(), m, k, n);
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let ga = sink.entry(a, &[m, k]);
                matmul_nt_acc(ga.data_mut(), g.data(), vals[b.0].data(), m, n, k);
                let gb = sink.entry(b, &[k, n]);
                matmul_tn_acc(gb.data_mut(), vals[a.0].data(), g.data(), m, k, n);
            })),
        )
    }

    fn binary_out_shape(&self, a: Var, b: Var, name: &str) -> Vec<usize> {
        let (sa, sb) = (self.vals[a.0].shape(), self.vals[b.0].shape());
        if self.vals[a.0].size() == 1 && self.vals[b.0].size() != 1 {
            sb.to_vec()
        } else if self.vals[b.0].size() == 1 || sa == sb {
            sa.to_vec()
        } else {
            panic!("{}: shapes {:?} and {:?} are incompatible", name, sa, sb);
        }
    }

    /// Sum of gradient elements, for the broadcast-scalar side of a binary op.
    fn reduce_into<const NEGATE: bool>(gv: &mut Tensor<T>, g: &Tensor<T>, scalar_side: bool) {
        if scalar_side && g.size() != 1 {
            let mut s = T::zero();
            for &gi in g.data() {
                s += gi;
            }
            if NEGATE {
                gv.data_mut()[0] += -s;
            } else {
                gv.data_mut()[0] += s;
            }
        } else {
            axpy(if NEGATE { -T::one() } else { T::one() }, g.data(), gv.data_mut());
        }
    }

    /// Elementwise sum; either side may be a one-element tensor (broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_out_shape(a, b, "add");
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let out = if ta.size() == 1 && tb.size() != 1 {
            tb.map(|v| ta.data[0] + v)
        } else if tb.size() == 1 && ta.size() != 1 {
            ta.map(|v| v + tb.data[0])
        } else {
            Tensor::from_vec(&shape, ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect())
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                for v in [a, b] {
                    let vshape = vals[v.0].shape().to_vec();
                    let scalar_side = vals[v.0].size() == 1;
                    let gv = sink.entry(v, &vshape);
                    Self::reduce_into::<false>(gv, g, scalar_side);
                }
            })),
        )
    }

    /// Elementwise difference; either side may be a one-element tensor.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_out_shape(a, b, "sub");
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let out = if ta.size() == 1 && tb.size() != 1 {
            tb.map(|v| ta.data[0] - v)
        } else if tb.size() == 1 && ta.size() != 1 {
            ta.map(|v| v - tb.data[0])
        } else {
            Tensor::from_vec(&shape, ta.data.iter().zip(&tb.data).map(|(&x, &y)| x - y).collect())
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let ashape = vals[a.0].shape().to_vec();
                let a_scalar = vals[a.0].size() == 1;
                let ga = sink.entry(a, &ashape);
                Self::reduce_into::<false>(ga, g, a_scalar);
                let bshape = vals[b.0].shape().to_vec();
                let b_scalar = vals[b.0].size() == 1;
                let gb = sink.entry(b, &bshape);
                Self::reduce_into::<true>(gb, g, b_scalar);
            })),
        )
    }

    /// Elementwise (Hadamard) product; either side may be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_out_shape(a, b, "mul");
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let out = if ta.size() == 1 && tb.size() != 1 {
            tb.map(|v| ta.data[0] * v)
        } else if tb.size() == 1 && ta.size() != 1 {
            ta.map(|v| v * tb.data[0])
        } else {
            Tensor::from_vec(&shape, ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect())
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                for (v, other) in [(a, b), (b, a)] {
                    let vshape = vals[v.0].shape().to_vec();
                    let v_scalar = vals[v.0].size() == 1;
                    let o_scalar = vals[other.0].size() == 1;
                    let gv = sink.entry(v, &vshape);
                    if v_scalar && g.size() != 1 {
                        let mut s = T::zero();
                        for (&gi, &oi) in g.data().iter().zip(vals[other.0].data()) {
                            s += gi * oi;
                        }
                        gv.data_mut()[0] += s;
                    } else if o_scalar && !v_scalar {
                        axpy(vals[other.0].data()[0], g.data(), gv.data_mut());
                    } else {
                        for ((gvi, &gi), &oi) in
                            gv.data_mut().iter_mut().zip(g.data()).zip(vals[other.0].data())
                        {
                            *gvi += gi * oi;
                        }
                    }
                }
            })),
        )
    }

    /// Add a bias row vector to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (&self.vals[x.0], &self.vals[bias.0]);
        assert_eq!(tx.rank(), 2, "add_bias input must be rank 2");
        let (rows, cols) = (tx.dim(0), tx.dim(1));
        assert_eq!(tb.shape(), [cols], "bias must have shape [{}], got {:?}", cols, tb.shape());
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let gx = sink.entry(x, &[rows, cols]);
                axpy(T::one(), g.data(), gx.data_mut());
                let gb = sink.entry(bias, &[cols]);
                for row in g.data().chunks(cols) {
                    for (b, &gi) in gb.data_mut().iter_mut().zip(row) {
                        *b += gi;
                    }
                }
            })),
        )
    }

    // ---- activations ----

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.vals[x.0].map(|v| T::one() / (T::one() + (-v).exp()));
        let shape = self.vals[x.0].shape().to_vec();
        let out_idx = self.next_idx();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let gx = sink.entry(x, &shape);
                for ((gxi, &gi), &si) in
                    gx.data_mut().iter_mut().zip(g.data()).zip(vals[out_idx].data())
                {
                    *gxi += gi * si * (T::one() - si);
                }
            })),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.vals[x.0].map(|v| v.tanh());
        let shape = self.vals[x.0].shape().to_vec();
        let out_idx = self.next_idx();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let gx = sink.entry(x, &shape);
                for ((gxi, &gi), &ti) in
                    gx.data_mut().iter_mut().zip(g.data()).zip(vals[out_idx].data())
                {
                    *gxi += gi * (T::one() - ti * ti);
                }
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.vals[x.0].map(|v| v.max(T::zero()));
        let shape = self.vals[x.0].shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let gx = sink.entry(x, &shape);
                for ((gxi, &gi), &xi) in
                    gx.data_mut().iter_mut().zip(g.data()).zip(vals[x.0].data())
                {
                    if xi > T::zero() {
                        *gxi += gi;
                    }
                }
            })),
        )
    }

    // ---- reductions and structure ----

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.vals[x.0].data() {
            acc += v;
        }
        let shape = self.vals[x.0].shape().to_vec();
        self.push(
            Tensor::scalar(acc),
            Some(Box::new(move |_, g, sink| {
                let gx = sink.entry(x, &shape);
                let g0 = g.data()[0];
                for v in gx.data_mut() {
                    *v += g0;
                }
            })),
        )
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let tx = &self.vals[x.0];
        let n: usize = shape.iter().product();
        assert_eq!(n, tx.size(), "reshape {:?} -> {:?} changes element count", tx.shape(), shape);
        let out = Tensor::from_vec(shape, tx.data().to_vec());
        let xshape = tx.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let gx = sink.entry(x, &xshape);
                axpy(T::one(), g.data(), gx.data_mut());
            })),
        )
    }

    /// Concatenate two rank-2 tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.rank(), 2, "concat_cols lhs must be rank 2");
        assert_eq!(tb.rank(), 2, "concat_cols rhs must be rank 2");
        let rows = ta.dim(0);
        assert_eq!(rows, tb.dim(0), "concat_cols row counts disagree");
        let (ca, cb) = (ta.dim(1), tb.dim(1));
        let cw = ca + cb;
        let mut out = Tensor::zeros(&[rows, cw]);
        for i in 0..rows {
            out.data_mut()[i * cw..i * cw + ca].copy_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            out.data_mut()[i * cw + ca..(i + 1) * cw]
                .copy_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let ga = sink.entry(a, &[rows, ca]);
                for i in 0..rows {
                    axpy(T::one(), &g.data()[i * cw..i * cw + ca], &mut ga.data_mut()[i * ca..(i + 1) * ca]);
                }
                let gb = sink.entry(b, &[rows, cb]);
                for i in 0..rows {
                    axpy(T::one(), &g.data()[i * cw + ca..(i + 1) * cw], &mut gb.data_mut()[i * cb..(i + 1) * cb]);
                }
            })),
        )
    }

    /// Extract timestep `t` of a [batch, time, channels] tensor as [batch, channels].
    pub fn slice_time(&mut self, x: Var, t: usize) -> Var {
        let tx = &self.vals[x.0];
        assert_eq!(tx.rank(), 3, "slice_time input must be rank 3");
        let (b, steps, c) = (tx.dim(0), tx.dim(1), tx.dim(2));
        assert!(t < steps, "timestep {} out of range 0..{}", t, steps);
        let mut out = Tensor::zeros(&[b, c]);
        for i in 0..b {
            out.data_mut()[i * c..(i + 1) * c]
                .copy_from_slice(&tx.data()[(i * steps + t) * c..(i * steps + t + 1) * c]);
        }
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let gx = sink.entry(x, &[b, steps, c]);
                for i in 0..b {
                    axpy(
                        T::one(),
                        &g.data()[i * c..(i + 1) * c],
                        &mut gx.data_mut()[(i * steps + t) * c..(i * steps + t + 1) * c],
                    );
                }
            })),
        )
    }

    /// Stack per-timestep [batch, channels] tensors into [batch, time, channels].
    pub fn stack_time(&mut self, steps: &[Var]) -> Var {
        assert!(!steps.is_empty(), "stack_time needs at least one step");
        let first = &self.vals[steps[0].0];
        assert_eq!(first.rank(), 2, "stack_time steps must be rank 2");
        let (b, c) = (first.dim(0), first.dim(1));
        let t_len = steps.len();
        for v in steps {
            assert_eq!(self.vals[v.0].shape(), [b, c], "stack_time steps must share a shape");
        }
        let mut out = Tensor::zeros(&[b, t_len, c]);
        for (t, v) in steps.iter().enumerate() {
            let tv = &self.vals[v.0];
            for i in 0..b {
                out.data_mut()[(i * t_len + t) * c..(i * t_len + t + 1) * c]
                    .copy_from_slice(&tv.data()[i * c..(i + 1) * c]);
            }
        }
        let steps = steps.to_vec();
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                for (t, v) in steps.iter().enumerate() {
                    let gv = sink.entry(*v, &[b, c]);
                    for i in 0..b {
                        axpy(
                            T::one(),
                            &g.data()[(i * t_len + t) * c..(i * t_len + t + 1) * c],
                            &mut gv.data_mut()[i * c..(i + 1) * c],
                        );
                    }
                }
            })),
        )
    }

    /// Multiply by a fixed mask (no gradient into the mask). Used for dropout.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Var {
        let tx = &self.vals[x.0];
        assert_eq!(tx.size(), mask.len(), "mask length must match input size");
        let out = Tensor::from_vec(
            tx.shape(),
            tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        );
        let shape = tx.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let gx = sink.entry(x, &shape);
                for ((gxi, &gi), &mi) in gx.data_mut().iter_mut().zip(g.data()).zip(&mask) {
                    *gxi += gi * mi;
                }
            })),
        )
    }
}

/// Max over elements of |analytic − central-difference| / max(1e-8, |analytic| + |central|)
/// for a scalar-valued function of one tensor.
pub fn gradient_check<T: Scalar>(
    f: impl Fn(&mut Tape<T>, Var) -> Var,
    x: &Tensor<T>,
    eps: f64,
) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v);
    assert_eq!(tape.value(out).size(), 1, "gradient_check requires a scalar-valued function");
    tape.backward(out);
    let analytic = match tape.grad(v) {
        Some(g) => g.clone(),
        None => Tensor::zeros(x.shape()),
    };

    let eval = |t: &Tensor<T>| -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let out = f(&mut tape, v);
        assert_eq!(tape.value(out).size(), 1, "gradient_check requires a scalar-valued function");
        tape.value(out).item().to_f64c()
    };

    let mut max_rel = 0.0_f64;
    for i in 0..x.size() {
        let base = x.data()[i];
        let mut plus = x.clone();
        plus.data_mut()[i] = base + T::from_f64c(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = base - T::from_f64c(eps);
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let analytic_i = analytic.data()[i].to_f64c();
        let rel = (analytic_i - numeric).abs() / f64::max(1e-8, analytic_i.abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], data.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let mut tape: Tape<f64> = Tape::new();
        let eye = tape.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.leaf(t2(2, 2, &[3.0, -1.0, 2.5, 7.0]));
        let y = tape.matmul(eye, x);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_hand_product() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t2(2, 1, &[1.0, 1.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[2, 3]));
        let x = tape.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(z, x);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_shape_mismatch_panics() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        tape.matmul(a, b);
    }

    #[test]
    fn activation_fixed_points() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![0.0]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).item(), 0.5);
        let t = tape.tanh(x);
        assert_eq!(tape.value(t).item(), 0.0);
        let y = tape.leaf(Tensor::from_vec(&[2], vec![-1.0, 2.0]));
        let r = tape.relu(y);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_gives_two_x() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x);
        let s = tape.sum(sq);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let total = tape.add(s1, s2);
        tape.backward(total);
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        tape.backward(x);
    }

    #[test]
    fn gradient_check_linear_is_exact() {
        // At the origin the perturbed sums are computed without rounding,
        // so the central difference of a linear map recovers the gradient
        // bit-exactly; elsewhere only summation roundoff remains.
        let zero: Tensor<f64> = Tensor::zeros(&[4]);
        assert_eq!(gradient_check(|tape, v| tape.sum(v), &zero, 1e-3), 0.0);
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.0]);
        let err = gradient_check(|tape, v| tape.sum(v), &x, 1e-3);
        assert!(err < 1e-11, "linear check error {}", err);
    }

    #[test]
    fn gradient_check_quadratic_at_ones() {
        let x: Tensor<f64> = Tensor::filled(&[3], 1.0);
        let err = gradient_check(
            |tape, v| {
                let sq = tape.mul(v, v);
                tape.sum(sq)
            },
            &x,
            1e-3,
        );
        assert!(err < 1e-6, "quadratic check error {}", err);
    }

    #[test]
    fn gradient_check_sigmoid_affine() {
        let mut rng = Rng::new(42);
        let w: Tensor<f64> = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let x: Tensor<f64> = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        // d/dW of sum(sigmoid(W x)).
        let err = gradient_check(
            |tape, v| {
                let xv = tape.leaf(x.clone());
                let wx = tape.matmul(v, xv);
                let s = tape.sigmoid(wx);
                tape.sum(s)
            },
            &w,
            1e-3,
        );
        assert!(err < 1e-4, "sigmoid affine check error {}", err);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let x: Tensor<f64> = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let w: Tensor<f64> = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let err = gradient_check(
            |tape, v| {
                let wv = tape.leaf(w.clone());
                let h = tape.matmul(v, wv);
                let t = tape.tanh(h);
                let r = tape.relu(t);
                let m = tape.mul(t, r);
                tape.sum(m)
            },
            &x,
            1e-3,
        );
        assert!(err < 1e-4, "composite check error {}", err);
    }

    #[test]
    fn broadcast_scalar_ops() {
        let mut tape: Tape<f64> = Tape::new();
        let one = tape.leaf(Tensor::scalar(1.0));
        let z = tape.leaf(Tensor::from_vec(&[3], vec![0.25, 0.5, 0.75]));
        let omz = tape.sub(one, z);
        assert_eq!(tape.value(omz).data(), &[0.75, 0.5, 0.25]);
        let s = tape.sum(omz);
        tape.backward(s);
        assert_eq!(tape.grad(z).unwrap().data(), &[-1.0, -1.0, -1.0]);
        assert_eq!(tape.grad(one).unwrap().data(), &[3.0]);
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let err = gradient_check(
            |tape, v| {
                let other = tape.leaf(Tensor::filled(&[2, 2], 0.5));
                let cat = tape.concat_cols(v, other);
                let s = tape.sigmoid(cat);
                tape.sum(s)
            },
            &Tensor::<f64>::from_vec(&[2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]),
            1e-3,
        );
        assert!(err < 1e-4, "concat check error {}", err);
    }

    #[test]
    fn stack_time_layout_and_gradients() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let st = tape.stack_time(&[a, b]);
        assert_eq!(tape.value(st).shape(), &[2, 2, 2]);
        // batch 0: [[1,2],[5,6]], batch 1: [[3,4],[7,8]]
        assert_eq!(tape.value(st).data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let t0 = tape.slice_time(st, 0);
        assert_eq!(tape.value(t0).data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum(t0);
        tape.backward(s);
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        // b took part in the stack but the loss only read timestep 0.
        assert!(tape.grad(b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glorot_is_deterministic_per_seed() {
        let a: Tensor<f32> = Tensor::glorot(&[5, 7], 5, 7, &mut Rng::new(11));
        let b: Tensor<f32> = Tensor::glorot(&[5, 7], 5, 7, &mut Rng::new(11));
        assert_eq!(a.data(), b.data());
        let c: Tensor<f32> = Tensor::glorot(&[5, 7], 5, 7, &mut Rng::new(12));
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn ops_preserve_finiteness_on_wide_inputs() {
        let mut rng = Rng::new(5);
        let x: Tensor<f32> = Tensor::uniform(&[8, 8], -10.0, 10.0, &mut rng);
        let w: Tensor<f32> = Tensor::uniform(&[8, 8], -10.0, 10.0, &mut rng);
        let mut tape: Tape<f32> = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let h = tape.matmul(xv, wv);
        let s = tape.sigmoid(h);
        let t = tape.tanh(h);
        let r = tape.relu(h);
        for v in [s, t, r] {
            assert!(tape.value(v).all_finite());
        }
    }
}
