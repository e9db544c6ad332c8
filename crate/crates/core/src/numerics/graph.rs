//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! immutable once recorded. Shape errors inside the recorded operations are
//! programming errors and panic with a descriptive message; public model
//! entry points validate their inputs before recording anything.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, for_each_run, reduce_into};
use super::{ParamId, Params, Scalar, Tensor};

/// Geometry of a channels-last 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// One weighted read of a feature row, used by [`Graph::gather_rows`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap<T> {
    pub source: u32,
    pub row: u32,
    pub weight: T,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Offset(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    Abs(usize),
    Softplus(usize),
    Clamp(usize, T, T),
    Matmul(usize, usize),
    Bmm(usize, usize),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<T> },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    SumAll(usize),
    SumAxis { x: usize, axis: usize },
    IndexSelect { x: usize, indices: Vec<usize> },
    Conv2d { x: usize, w: usize, geom: ConvGeom, cols: Vec<T> },
    Upsample2x(usize),
    Gather { inputs: Vec<usize>, row_ptr: Vec<usize>, taps: Vec<Tap<T>> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Maximum(..) => "maximum",
            Op::Minimum(..) => "minimum",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Softplus(_) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Matmul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::SumAll(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::IndexSelect { .. } => "index_select",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(_) => "upsample2x",
            Op::Gather { .. } => "gather_rows",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<usize, usize>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A recorded value. Cheap to copy; borrows its graph.
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient, independent of any parameter store.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::lit(value)))
    }

    /// Binds a stored parameter. Repeated binds of the same id return the same
    /// leaf, so shared parameters accumulate gradient from every use.
    pub fn param(&self, params: &Params<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.bound.borrow().get(&id.0) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let v = self.push(params.get(id).clone(), Op::Param, true);
        self.bound.borrow_mut().insert(id.0, v.id);
        v
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Names of the recorded operations in execution order, leaves excluded.
    pub fn trace(&self) -> Vec<&'static str> {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Param))
            .map(|n| n.op.name())
            .collect()
    }

    /// [`Graph::trace`] with the output shape of every operation.
    pub fn trace_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Param))
            .map(|n| (n.op.name(), n.value.shape().to_vec()))
            .collect()
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let nodes = self.nodes.borrow();
        let first = nodes[parts[0].id].value.shape().to_vec();
        assert!(axis < first.len(), "concat axis {axis} out of range");
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.id].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let value = Tensor::new(&out_shape, data).expect("concat extent");
        self.push(
            value,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        )
    }

    /// Sparse weighted row gather: output row `r` is
    /// `sum(tap.weight * inputs[tap.source].row(tap.row))` over the taps in
    /// `row_ptr[r]..row_ptr[r + 1]`. Every input is viewed as `[rows, channels]`.
    pub fn gather_rows<'g>(
        &'g self,
        inputs: &[Var<'g, T>],
        channels: usize,
        row_ptr: Vec<usize>,
        taps: Vec<Tap<T>>,
    ) -> Var<'g, T> {
        let rows = row_ptr.len() - 1;
        let nodes = self.nodes.borrow();
        for v in inputs {
            assert_eq!(
                nodes[v.id].value.len() % channels,
                0,
                "gather input not divisible into rows of {channels}"
            );
        }
        let mut out = vec![T::zero(); rows * channels];
        for r in 0..rows {
            let dst = &mut out[r * channels..(r + 1) * channels];
            for tap in &taps[row_ptr[r]..row_ptr[r + 1]] {
                let src = nodes[inputs[tap.source as usize].id].value.data();
                let base = tap.row as usize * channels;
                for (d, &s) in dst.iter_mut().zip(&src[base..base + channels]) {
                    *d += tap.weight * s;
                }
            }
        }
        let rg = inputs.iter().any(|v| nodes[v.id].requires_grad);
        drop(nodes);
        self.push(
            Tensor::new(&[rows, channels], out).expect("gather extent"),
            Op::Gather {
                inputs: inputs.iter().map(|v| v.id).collect(),
                row_ptr,
                taps,
            },
            rg,
        )
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::ones(nodes[output.id].value.shape()));
        for id in (0..=output.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let bound = self.bound.borrow().clone();
        Gradients { grads, bound }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<usize, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value, `None` if it does not
    /// influence the output.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[v.id].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound
            .get(&id.0)
            .and_then(|&node| self.grads[node].as_ref())
    }

    /// Consumes the gradients, returning those of the bound parameters as a
    /// dense vector indexed by parameter id (`None` when unreached).
    pub fn into_dense(mut self, num_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut dense = vec![None; num_params];
        for (&p, &node) in &self.bound {
            if p < num_params {
                dense[p] = self.grads[node].take();
            }
        }
        dense
    }

    /// Gradients of every bound parameter, ordered by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&p, &node)| self.grads[node].as_ref().map(|g| (ParamId(p), g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), g.shape());
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Adds `g` (optionally negated), reduced to `shape`, into the gradient of
/// node `id` without intermediate tensors when one already exists.
fn accumulate_reduced<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: &Tensor<T>, shape: &[usize], negate: bool) {
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape));
    if g.shape() == shape {
        let o = slot.data_mut();
        if negate {
            o.iter_mut().zip(g.data()).for_each(|(x, &y)| *x -= y);
        } else {
            o.iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y);
        }
    } else if negate {
        reduce_into(&g.map(|x| -x), slot.data_mut(), shape);
    } else {
        reduce_into(g, slot.data_mut(), shape);
    }
}

/// Gradient buffer of node `id` to accumulate into with a gemm, and the
/// `beta` to use: one when a partial gradient already exists.
fn grad_slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], id: usize, shape: &[usize]) -> (&'a mut Tensor<T>, T) {
    let beta = if grads[id].is_some() { T::one() } else { T::zero() };
    (grads[id].get_or_insert_with(|| Tensor::zeros(shape)), beta)
}

fn map2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Evaluates `f` on the broadcast pair producing a tensor of `out_shape`.
fn broadcast_eval<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        return map2(a, b, f);
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    let (ad, bd) = (a.data(), b.data());
    for_each_run(out_shape, &sa, &sb, |r| {
        let n = r.len;
        match (r.step_a, r.step_b) {
            (1, 1) => out.extend(ad[r.a..r.a + n].iter().zip(&bd[r.b..r.b + n]).map(|(&x, &y)| f(x, y))),
            (1, 0) => {
                let y = bd[r.b];
                out.extend(ad[r.a..r.a + n].iter().map(|&x| f(x, y)));
            }
            (0, 1) => {
                let x = ad[r.a];
                out.extend(bd[r.b..r.b + n].iter().map(|&y| f(x, y)));
            }
            (sa, sb) => out.extend((0..n).map(|j| f(ad[r.a + j * sa], bd[r.b + j * sb]))),
        }
    });
    Tensor::new(out_shape, out).expect("broadcast extent")
}

/// Gradients of a broadcast binary op from its local derivatives
/// `(d/da, d/db)`, accumulated straight into operand-shaped buffers.
/// Operands whose flag is unset get no buffer.
fn broadcast_back<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want: (bool, bool),
    da: impl Fn(T, T) -> T,
    db: impl Fn(T, T) -> T,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let out_shape = g.shape();
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut ga = want.0.then(|| Tensor::zeros(a.shape()));
    let mut gb = want.1.then(|| Tensor::zeros(b.shape()));
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    {
        let mut gao = ga.as_mut().map(|t| t.data_mut());
        let mut gbo = gb.as_mut().map(|t| t.data_mut());
        for_each_run(out_shape, &sa, &sb, |r| {
            let gs = &gd[r.out..r.out + r.len];
            if let Some(o) = gao.as_deref_mut() {
                match (r.step_a, r.step_b) {
                    (1, 1) => {
                        let (os, bs) = (&mut o[r.a..r.a + r.len], &bd[r.b..r.b + r.len]);
                        let xs = &ad[r.a..r.a + r.len];
                        for j in 0..r.len {
                            os[j] += gs[j] * da(xs[j], bs[j]);
                        }
                    }
                    (1, 0) => {
                        let y = bd[r.b];
                        let (os, xs) = (&mut o[r.a..r.a + r.len], &ad[r.a..r.a + r.len]);
                        for j in 0..r.len {
                            os[j] += gs[j] * da(xs[j], y);
                        }
                    }
                    (0, 1) => {
                        let x = ad[r.a];
                        let bs = &bd[r.b..r.b + r.len];
                        o[r.a] += gs.iter().zip(bs).map(|(&gj, &y)| gj * da(x, y)).sum::<T>();
                    }
                    (sa, sb) => {
                        for j in 0..r.len {
                            o[r.a + j * sa] += gs[j] * da(ad[r.a + j * sa], bd[r.b + j * sb]);
                        }
                    }
                }
            }
            if let Some(o) = gbo.as_deref_mut() {
                match (r.step_a, r.step_b) {
                    (1, 1) => {
                        let (os, xs) = (&mut o[r.b..r.b + r.len], &ad[r.a..r.a + r.len]);
                        let bs = &bd[r.b..r.b + r.len];
                        for j in 0..r.len {
                            os[j] += gs[j] * db(xs[j], bs[j]);
                        }
                    }
                    (0, 1) => {
                        let x = ad[r.a];
                        let (os, bs) = (&mut o[r.b..r.b + r.len], &bd[r.b..r.b + r.len]);
                        for j in 0..r.len {
                            os[j] += gs[j] * db(x, bs[j]);
                        }
                    }
                    (1, 0) => {
                        let y = bd[r.b];
                        let xs = &ad[r.a..r.a + r.len];
                        o[r.b] += gs.iter().zip(xs).map(|(&gj, &x)| gj * db(x, y)).sum::<T>();
                    }
                    (sa, sb) => {
                        for j in 0..r.len {
                            o[r.b + j * sb] += gs[j] * db(ad[r.a + j * sa], bd[r.b + j * sb]);
                        }
                    }
                }
            }
        });
    }
    (ga, gb)
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; nd];
    let mut out = Tensor::zeros(&out_shape);
    let src = x.data();
    let o = out.data_mut();
    for_each_broadcast(&out_shape, &strides, &zeros, |k, ia, _| o[k] = src[ia]);
    out
}

fn im2col<T: Scalar>(x: &Tensor<T>, geom: ConvGeom) -> (Vec<T>, usize, usize) {
    let [h, w, cin] = *x.shape() else {
        panic!("conv2d input must be HWC, got {:?}", x.shape())
    };
    let (ho, wo) = (geom.out_extent(h), geom.out_extent(w));
    let k = geom.kernel;
    let row_len = k * k * cin;
    let mut cols = vec![T::zero(); ho * wo * row_len];
    let src = x.data();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * row_len..(oy * wo + ox + 1) * row_len];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * cin;
                    let d = (ky * k + kx) * cin;
                    row[d..d + cin].copy_from_slice(&src[s..s + cin]);
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im<T: Scalar>(dcols: &[T], shape: &[usize], geom: ConvGeom) -> Tensor<T> {
    let (h, w, cin) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (geom.out_extent(h), geom.out_extent(w));
    let k = geom.kernel;
    let row_len = k * k * cin;
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &dcols[(oy * wo + ox) * row_len..(oy * wo + ox + 1) * row_len];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * cin;
                    let d = (ky * k + kx) * cin;
                    for c in 0..cin {
                        dst[s + c] += row[d + c];
                    }
                }
            }
        }
    }
    out
}

/// Batched product: `a` is `[b, m, k]`, `b` is `[b, k, n]` (either may be
/// read transposed through its strides).
#[allow(clippy::too_many_arguments)]
fn batched_gemm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    out: &mut [T],
    beta: T,
) {
    let (sa, sb, so) = (m * k, k * n, m * n);
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            &a[i * sa..(i + 1) * sa],
            a_strides,
            &b[i * sb..(i + 1) * sb],
            b_strides,
            &mut out[i * so..(i + 1) * so],
            (n as isize, 1),
            beta,
        );
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    let out = &nodes[id].value;
    let unary = |x: usize, grads: &mut [Option<Tensor<T>>], f: &dyn Fn(T, T) -> T| {
        if rg(x) {
            // f(input, output) is the local derivative
            let local = val(x).data().iter().zip(out.data()).zip(g.data());
            match &mut grads[x] {
                Some(existing) => {
                    for (e, ((&xi, &yi), &gi)) in existing.data_mut().iter_mut().zip(local) {
                        *e += gi * f(xi, yi);
                    }
                }
                slot @ None => {
                    let data = local.map(|((&xi, &yi), &gi)| gi * f(xi, yi)).collect();
                    *slot = Some(Tensor::new(val(x).shape(), data).expect("shape"));
                }
            }
        }
    };
    match &nodes[id].op {
        Op::Leaf | Op::Param => {}
        &Op::Add(a, b) => {
            if rg(a) {
                accumulate_reduced(grads, a, g, val(a).shape(), false);
            }
            if rg(b) {
                accumulate_reduced(grads, b, g, val(b).shape(), false);
            }
        }
        &Op::Sub(a, b) => {
            if rg(a) {
                accumulate_reduced(grads, a, g, val(a).shape(), false);
            }
            if rg(b) {
                accumulate_reduced(grads, b, g, val(b).shape(), true);
            }
        }
        &Op::Mul(a, b) => {
            let (ga, gb) = broadcast_back(val(a), val(b), g, (rg(a), rg(b)), |_, y| y, |x, _| x);
            if let Some(ga) = ga {
                accumulate(grads, a, ga);
            }
            if let Some(gb) = gb {
                accumulate(grads, b, gb);
            }
        }
        &Op::Div(a, b) => {
            let (ga, gb) = broadcast_back(
                val(a),
                val(b),
                g,
                (rg(a), rg(b)),
                |_, y| T::one() / y,
                |x, y| -x / (y * y),
            );
            if let Some(ga) = ga {
                accumulate(grads, a, ga);
            }
            if let Some(gb) = gb {
                accumulate(grads, b, gb);
            }
        }
        &Op::Maximum(a, b) | &Op::Minimum(a, b) => {
            let is_max = matches!(nodes[id].op, Op::Maximum(..));
            // ties route the gradient to the first operand
            let pick_a = move |x: T, y: T| if is_max { x >= y } else { x <= y };
            let (ga, gb) = broadcast_back(
                val(a),
                val(b),
                g,
                (rg(a), rg(b)),
                |x, y| if pick_a(x, y) { T::one() } else { T::zero() },
                |x, y| if pick_a(x, y) { T::zero() } else { T::one() },
            );
            if let Some(ga) = ga {
                accumulate(grads, a, ga);
            }
            if let Some(gb) = gb {
                accumulate(grads, b, gb);
            }
        }
        &Op::Neg(x) => unary(x, grads, &|_, _| -T::one()),
        &Op::Scale(x, s) => unary(x, grads, &|_, _| s),
        &Op::Offset(x) => unary(x, grads, &|_, _| T::one()),
        &Op::Relu(x) => unary(x, grads, &|xi, _| {
            if xi > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }),
        &Op::Sigmoid(x) => unary(x, grads, &|_, y| y * (T::one() - y)),
        &Op::Tanh(x) => unary(x, grads, &|_, y| T::one() - y * y),
        &Op::Exp(x) => unary(x, grads, &|_, y| y),
        &Op::Log(x) => unary(x, grads, &|xi, _| T::one() / xi),
        &Op::Sin(x) => unary(x, grads, &|xi, _| xi.cos()),
        &Op::Cos(x) => unary(x, grads, &|xi, _| -xi.sin()),
        &Op::Sqrt(x) => unary(x, grads, &|_, y| {
            if y > T::zero() {
                T::one() / (y + y)
            } else {
                T::zero()
            }
        }),
        &Op::Abs(x) => unary(x, grads, &|xi, _| {
            if xi > T::zero() {
                T::one()
            } else if xi < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }),
        &Op::Softplus(x) => unary(x, grads, &|xi, _| T::one() / (T::one() + (-xi).exp())),
        &Op::Clamp(x, lo, hi) => unary(x, grads, &|xi, _| {
            if xi >= lo && xi <= hi {
                T::one()
            } else {
                T::zero()
            }
        }),
        &Op::Matmul(a, b) => {
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[1];
            if rg(a) {
                let (ga, beta) = grad_slot(grads, a, &[m, k]);
                T::gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    (n as isize, 1),
                    val(b).data(),
                    (1, n as isize),
                    ga.data_mut(),
                    (k as isize, 1),
                    beta,
                );
            }
            if rg(b) {
                let (gb, beta) = grad_slot(grads, b, &[k, n]);
                T::gemm(
                    k,
                    m,
                    n,
                    val(a).data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    gb.data_mut(),
                    (n as isize, 1),
                    beta,
                );
            }
        }
        &Op::Bmm(a, b) => {
            let [bs, m, k] = *val(a).shape() else { unreachable!() };
            let n = val(b).shape()[2];
            if rg(a) {
                let (ga, beta) = grad_slot(grads, a, &[bs, m, k]);
                batched_gemm(
                    bs,
                    m,
                    n,
                    k,
                    g.data(),
                    (n as isize, 1),
                    val(b).data(),
                    (1, n as isize),
                    ga.data_mut(),
                    beta,
                );
            }
            if rg(b) {
                let (gb, beta) = grad_slot(grads, b, &[bs, k, n]);
                batched_gemm(
                    bs,
                    k,
                    m,
                    n,
                    val(a).data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    gb.data_mut(),
                    beta,
                );
            }
        }
        &Op::Softmax(x) => {
            if rg(x) {
                let d = *out.shape().last().expect("softmax rank");
                let mut gx = Tensor::zeros(out.shape());
                for ((y, gy), gxr) in out
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(gx.data_mut().chunks_mut(d))
                {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gxr[j] = y[j] * (gy[j] - dot);
                    }
                }
                accumulate(grads, x, gx);
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let x = *x;
            if rg(x) {
                let d = *out.shape().last().expect("layer_norm rank");
                let dn = T::lit(d as f64);
                let mut gx = Tensor::zeros(out.shape());
                for (((xh, gy), gxr), &is) in out
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(gx.data_mut().chunks_mut(d))
                    .zip(inv_std)
                {
                    let sum_g: T = gy.iter().copied().sum();
                    let sum_gx: T = gy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gxr[j] = is / dn * (dn * gy[j] - sum_g - xh[j] * sum_gx);
                    }
                }
                accumulate(grads, x, gx);
            }
        }
        Op::Concat { inputs, axis } => {
            let axis = *axis;
            let shape = out.shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[axis] * inner;
            let mut offset = 0;
            for &p in inputs {
                let ext = val(p).shape()[axis];
                if rg(p) {
                    let chunk = ext * inner;
                    let mut data = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let s = o * total + offset;
                        data.extend_from_slice(&g.data()[s..s + chunk]);
                    }
                    accumulate(grads, p, Tensor::new(val(p).shape(), data).expect("shape"));
                }
                offset += ext * inner;
            }
        }
        &Op::Narrow { x, axis, start } => {
            if rg(x) {
                let shape = val(x).shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = out.shape()[axis];
                let mut gx = Tensor::zeros(shape);
                let dst = gx.data_mut();
                for o in 0..outer {
                    let s = (o * shape[axis] + start) * inner;
                    dst[s..s + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, x, gx);
            }
        }
        &Op::Reshape(x) => {
            if rg(x) {
                accumulate(grads, x, g.reshape(val(x).shape()).expect("shape"));
            }
        }
        Op::Permute { x, perm } => {
            if rg(*x) {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *x, permute_tensor(g, &inv));
            }
        }
        &Op::SumAll(x) => {
            if rg(x) {
                accumulate(grads, x, Tensor::full(val(x).shape(), g.item()));
            }
        }
        &Op::SumAxis { x, axis } => {
            if rg(x) {
                let mut keep = val(x).shape().to_vec();
                keep[axis] = 1;
                let g_keep = g.reshape(&keep).expect("shape");
                let zero = Tensor::zeros(val(x).shape());
                accumulate(
                    grads,
                    x,
                    broadcast_eval(&zero, &g_keep, val(x).shape(), |_, b| b),
                );
            }
        }
        Op::IndexSelect { x, indices } => {
            let x = *x;
            if rg(x) {
                let row: usize = val(x).shape()[1..].iter().product();
                let mut gx = Tensor::zeros(val(x).shape());
                let dst = gx.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..row {
                        dst[i * row + j] += g.data()[k * row + j];
                    }
                }
                accumulate(grads, x, gx);
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let (x, w) = (*x, *w);
            let [ho, wo, cout] = *out.shape() else { unreachable!() };
            let kdim = val(w).shape()[0];
            let rows = ho * wo;
            if rg(w) {
                let mut gw = Tensor::zeros(&[kdim, cout]);
                T::gemm(
                    kdim,
                    rows,
                    cout,
                    cols,
                    (1, kdim as isize),
                    g.data(),
                    (cout as isize, 1),
                    gw.data_mut(),
                    (cout as isize, 1),
                    T::zero(),
                );
                accumulate(grads, w, gw);
            }
            if rg(x) {
                let mut dcols = vec![T::zero(); rows * kdim];
                T::gemm(
                    rows,
                    cout,
                    kdim,
                    g.data(),
                    (cout as isize, 1),
                    val(w).data(),
                    (1, cout as isize),
                    &mut dcols,
                    (kdim as isize, 1),
                    T::zero(),
                );
                accumulate(grads, x, col2im(&dcols, val(x).shape(), *geom));
            }
        }
        &Op::Upsample2x(x) => {
            if rg(x) {
                let [h, w, c] = *val(x).shape() else { unreachable!() };
                let mut gx = Tensor::zeros(&[h, w, c]);
                let dst = gx.data_mut();
                let src = g.data();
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let s = (y * 2 * w + xx) * c;
                        let d = ((y / 2) * w + xx / 2) * c;
                        for ch in 0..c {
                            dst[d + ch] += src[s + ch];
                        }
                    }
                }
                accumulate(grads, x, gx);
            }
        }
        Op::Gather {
            inputs,
            row_ptr,
            taps,
        } => {
            let channels = out.shape()[1];
            let mut gins: Vec<Option<Tensor<T>>> = inputs
                .iter()
                .map(|&i| rg(i).then(|| Tensor::zeros(val(i).shape())))
                .collect();
            for r in 0..row_ptr.len() - 1 {
                let gr = &g.data()[r * channels..(r + 1) * channels];
                for tap in &taps[row_ptr[r]..row_ptr[r + 1]] {
                    if let Some(gi) = &mut gins[tap.source as usize] {
                        let base = tap.row as usize * channels;
                        for (d, &s) in gi.data_mut()[base..base + channels].iter_mut().zip(gr) {
                            *d += tap.weight * s;
                        }
                    }
                }
            }
            for (&i, gi) in inputs.iter().zip(gins) {
                if let Some(gi) = gi {
                    accumulate(grads, i, gi);
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn item(&self) -> T {
        self.graph.with_value(self.id, Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant(self.value())
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let value = self.graph.with_value(self.id, |t| t.map(f));
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, rhs: Var<'g, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Var<'g, T> {
        assert!(
            std::ptr::eq(self.graph, rhs.graph),
            "operands recorded on different graphs"
        );
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        let out_shape = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|e| panic!("{e}"));
        let value = broadcast_eval(a, b, &out_shape, f);
        let rg = nodes[self.id].requires_grad || nodes[rhs.id].requires_grad;
        drop(nodes);
        self.graph.push(value, op, rg)
    }

    pub fn maximum(&self, rhs: Var<'g, T>) -> Var<'g, T> {
        self.binary(rhs, Op::Maximum(self.id, rhs.id), T::max)
    }

    pub fn minimum(&self, rhs: Var<'g, T>) -> Var<'g, T> {
        self.binary(rhs, Op::Minimum(self.id, rhs.id), T::min)
    }

    pub fn scale(&self, s: f64) -> Var<'g, T> {
        let s = T::lit(s);
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn offset(&self, c: f64) -> Var<'g, T> {
        let c = T::lit(c);
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(Op::Relu(self.id), |x| x.max(T::zero()))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(Op::Sigmoid(self.id), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(Op::Tanh(self.id), T::tanh)
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.unary(Op::Exp(self.id), T::exp)
    }

    pub fn log(&self) -> Var<'g, T> {
        self.unary(Op::Log(self.id), T::ln)
    }

    pub fn sin(&self) -> Var<'g, T> {
        self.unary(Op::Sin(self.id), T::sin)
    }

    pub fn cos(&self) -> Var<'g, T> {
        self.unary(Op::Cos(self.id), T::cos)
    }

    pub fn sqrt(&self) -> Var<'g, T> {
        self.unary(Op::Sqrt(self.id), T::sqrt)
    }

    pub fn abs(&self) -> Var<'g, T> {
        self.unary(Op::Abs(self.id), T::abs)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'g, T> {
        self.unary(Op::Softplus(self.id), |x| {
            x.max(T::zero()) + (-x.abs()).exp().ln_1p()
        })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g, T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn square(&self) -> Var<'g, T> {
        *self * *self
    }

    pub fn matmul(&self, rhs: Var<'g, T>) -> Var<'g, T> {
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            panic!("matmul needs matrices, got {:?} @ {:?}", a.shape(), b.shape())
        };
        assert_eq!(k, k2, "matmul inner extent {:?} @ {:?}", a.shape(), b.shape());
        let mut value = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            a.data(),
            (k as isize, 1),
            b.data(),
            (n as isize, 1),
            value.data_mut(),
            (n as isize, 1),
            T::zero(),
        );
        let rg = nodes[self.id].requires_grad || nodes[rhs.id].requires_grad;
        drop(nodes);
        self.graph.push(value, Op::Matmul(self.id, rhs.id), rg)
    }

    /// Batched matrix product `[b, m, k] @ [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, rhs: Var<'g, T>) -> Var<'g, T> {
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        let (&[bs, m, k], &[bs2, k2, n]) = (a.shape(), b.shape()) else {
            panic!("bmm needs rank-3 operands, got {:?} @ {:?}", a.shape(), b.shape())
        };
        assert!(bs == bs2 && k == k2, "bmm extents {:?} @ {:?}", a.shape(), b.shape());
        let mut value = Tensor::zeros(&[bs, m, n]);
        batched_gemm(
            bs,
            m,
            k,
            n,
            a.data(),
            (k as isize, 1),
            b.data(),
            (n as isize, 1),
            value.data_mut(),
            T::zero(),
        );
        let rg = nodes[self.id].requires_grad || nodes[rhs.id].requires_grad;
        drop(nodes);
        self.graph.push(value, Op::Bmm(self.id, rhs.id), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g, T> {
        let value = self.graph.with_value(self.id, |t| {
            let d = *t.shape().last().expect("softmax rank");
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            out
        });
        self.graph
            .push(value, Op::Softmax(self.id), self.requires_grad())
    }

    /// Normalization over the last axis, without affine terms.
    pub fn layer_norm(&self, eps: f64) -> Var<'g, T> {
        let eps = T::lit(eps);
        let (value, inv_std) = self.graph.with_value(self.id, |t| {
            let d = *t.shape().last().expect("layer_norm rank");
            let dn = T::lit(d as f64);
            let mut out = t.clone();
            let mut inv = Vec::with_capacity(t.len() / d.max(1));
            for row in out.data_mut().chunks_mut(d) {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let is = T::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * is;
                }
                inv.push(is);
            }
            (out, inv)
        });
        self.graph.push(
            value,
            Op::LayerNorm {
                x: self.id,
                inv_std,
            },
            self.requires_grad(),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let value = self.graph.with_value(self.id, |t| {
            let shape = t.shape();
            assert!(
                axis < shape.len() && start + len <= shape[axis],
                "narrow {axis}:{start}+{len} out of range for {shape:?}"
            );
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * shape[axis] + start) * inner;
                data.extend_from_slice(&t.data()[s..s + len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            Tensor::new(&out_shape, data).expect("narrow extent")
        });
        self.graph.push(
            value,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g, T> {
        let value = self
            .graph
            .with_value(self.id, |t| t.reshape(shape))
            .unwrap_or_else(|e| panic!("{e}"));
        self.graph
            .push(value, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn permute(&self, perm: &[usize]) -> Var<'g, T> {
        let value = self.graph.with_value(self.id, |t| {
            let mut seen = perm.to_vec();
            seen.sort_unstable();
            assert!(
                seen.iter().copied().eq(0..t.ndim()),
                "invalid permutation {perm:?} for rank {}",
                t.ndim()
            );
            permute_tensor(t, perm)
        });
        self.graph.push(
            value,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            self.requires_grad(),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Var<'g, T> {
        let nd = self.shape().len();
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    pub fn sum(&self) -> Var<'g, T> {
        let value = self.graph.with_value(self.id, |t| Tensor::scalar(t.sum()));
        self.graph
            .push(value, Op::SumAll(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = self.graph.with_value(self.id, Tensor::len);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Var<'g, T> {
        let value = self.graph.with_value(self.id, |t| {
            let shape = t.shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for a in 0..shape[axis] {
                    let s = (o * shape[axis] + a) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += t.data()[s + i];
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            Tensor::new(&out_shape, out).expect("sum_axis extent")
        });
        self.graph.push(
            value,
            Op::SumAxis {
                x: self.id,
                axis,
            },
            self.requires_grad(),
        )
    }

    /// Rows along axis 0, in the given order (repeats allowed).
    pub fn index_select(&self, indices: &[usize]) -> Var<'g, T> {
        let value = self.graph.with_value(self.id, |t| {
            let row: usize = t.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                assert!(i < t.shape()[0], "index {i} out of range");
                data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(&shape, data).expect("index_select extent")
        });
        self.graph.push(
            value,
            Op::IndexSelect {
                x: self.id,
                indices: indices.to_vec(),
            },
            self.requires_grad(),
        )
    }

    /// Channels-last convolution: `self` is `[h, w, cin]`, `weight` is
    /// `[k*k*cin, cout]` laid out as `(ky, kx, cin)` rows.
    pub fn conv2d(&self, weight: Var<'g, T>, geom: ConvGeom) -> Var<'g, T> {
        let nodes = self.graph.nodes.borrow();
        let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
        let cin = x.shape()[2];
        let &[kdim, cout] = w.shape() else {
            panic!("conv weight must be a matrix, got {:?}", w.shape())
        };
        assert_eq!(kdim, geom.kernel * geom.kernel * cin, "conv weight rows");
        let (cols, ho, wo) = im2col(x, geom);
        let mut value = Tensor::zeros(&[ho, wo, cout]);
        T::gemm(
            ho * wo,
            kdim,
            cout,
            &cols,
            (kdim as isize, 1),
            w.data(),
            (cout as isize, 1),
            value.data_mut(),
            (cout as isize, 1),
            T::zero(),
        );
        let rg = nodes[self.id].requires_grad || nodes[weight.id].requires_grad;
        drop(nodes);
        let cols = if rg { cols } else { Vec::new() };
        self.graph.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling of a `[h, w, c]` map.
    pub fn upsample2x(&self) -> Var<'g, T> {
        let value = self.graph.with_value(self.id, |t| {
            let [h, w, c] = *t.shape() else {
                panic!("upsample2x needs HWC, got {:?}", t.shape())
            };
            let mut out = Tensor::zeros(&[2 * h, 2 * w, c]);
            let dst = out.data_mut();
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let s = ((y / 2) * w + x / 2) * c;
                    let d = (y * 2 * w + x) * c;
                    dst[d..d + c].copy_from_slice(&t.data()[s..s + c]);
                }
            }
            out
        });
        self.graph
            .push(value, Op::Upsample2x(self.id), self.requires_grad())
    }
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'g, T: Scalar> $trait for Var<'g, T> {
            type Output = Var<'g, T>;
            fn $method(self, rhs: Self) -> Self::Output {
                self.binary(rhs, Op::$op(self.id, rhs.id), $f)
            }
        }
    };
}

binary_operator!(Add, add, Add, |a, b| a + b);
binary_operator!(Sub, sub, Sub, |a, b| a - b);
binary_operator!(Mul, mul, Mul, |a, b| a * b);
binary_operator!(Div, div, Div, |a, b| a / b);

impl<'g, T: Scalar> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        self.unary(Op::Neg(self.id), |x| -x)
    }
}
