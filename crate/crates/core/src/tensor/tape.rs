use std::cell::RefCell;

use rand::Rng;

use super::kernels;
use super::{
    check_axis, check_layer_norm, check_no_nan, dropout_scales, layer_norm_forward, matmul_dims,
    Scalar, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddRow {
        x: usize,
        row: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Relu {
        x: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    MaskedSoftmax {
        x: usize,
    },
    LogSoftmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNormAffine {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: usize,
        scales: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Sum {
        x: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order. Node indices only ever point
/// backwards, so reverse index order is a reverse topological order.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn derived(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let g = self.grad_flag(inputs);
        self.push(value, op, g)
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &upstream, &mut grads);
            grads[id] = Some(upstream);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, up: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            let n = nodes[*b].value.shape()[1];
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(nodes, grads, *a, |g| kernels::mm_nt(up, bv, g, m, n, k));
            accumulate(nodes, grads, *b, |g| kernels::mm_tn(av, up, g, k, m, n));
        }
        Op::BatchMatMul { a, b, transpose_b } => {
            let sa = nodes[*a].value.shape();
            let sb = nodes[*b].value.shape();
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = if *transpose_b { sb[1] } else { sb[2] };
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let (sa_len, sb_len, so_len) = (m * k, k * n, m * n);
            accumulate(nodes, grads, *a, |g| {
                for i in 0..batch {
                    let gi = &mut g[i * sa_len..(i + 1) * sa_len];
                    let ui = &up[i * so_len..(i + 1) * so_len];
                    let bi = &bv[i * sb_len..(i + 1) * sb_len];
                    if *transpose_b {
                        kernels::mm_nn(ui, bi, gi, m, n, k);
                    } else {
                        kernels::mm_nt(ui, bi, gi, m, n, k);
                    }
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for i in 0..batch {
                    let gi = &mut g[i * sb_len..(i + 1) * sb_len];
                    let ui = &up[i * so_len..(i + 1) * so_len];
                    let ai = &av[i * sa_len..(i + 1) * sa_len];
                    if *transpose_b {
                        kernels::mm_tn(ui, ai, gi, n, m, k);
                    } else {
                        kernels::mm_tn(ai, ui, gi, k, m, n);
                    }
                }
            });
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, |g| add_into(g, up));
            accumulate(nodes, grads, *b, |g| add_into(g, up));
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, |g| add_into(g, up));
            accumulate(nodes, grads, *b, |g| {
                for (gi, &u) in g.iter_mut().zip(up) {
                    *gi -= u;
                }
            });
        }
        Op::Mul { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(nodes, grads, *a, |g| {
                for ((gi, &u), &y) in g.iter_mut().zip(up).zip(bv) {
                    *gi += u * y;
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for ((gi, &u), &x) in g.iter_mut().zip(up).zip(av) {
                    *gi += u * x;
                }
            });
        }
        Op::AddRow { x, row } => {
            let width = nodes[*row].value.len();
            accumulate(nodes, grads, *x, |g| add_into(g, up));
            accumulate(nodes, grads, *row, |g| {
                for chunk in up.chunks(width) {
                    add_into(g, chunk);
                }
            });
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, grads, *x, |g| {
                for (gi, &u) in g.iter_mut().zip(up) {
                    *gi += u * *factor;
                }
            });
        }
        Op::Relu { x } => {
            let xv = nodes[*x].value.data();
            accumulate(nodes, grads, *x, |g| {
                for ((gi, &u), &v) in g.iter_mut().zip(up).zip(xv) {
                    if v > T::zero() {
                        *gi += u;
                    }
                }
            });
        }
        Op::Softmax { x, axis } => {
            let shape = node.value.shape();
            let (outer, len, inner) = kernels::axis_extents(shape, *axis);
            accumulate(nodes, grads, *x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| up[idx(a)] * out[idx(a)]).sum();
                        for a in 0..len {
                            g[idx(a)] += out[idx(a)] * (up[idx(a)] - dot);
                        }
                    }
                }
            });
        }
        Op::MaskedSoftmax { x } => {
            let width = *node.value.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *x, |g| {
                for ((gr, ur), yr) in g
                    .chunks_mut(width)
                    .zip(up.chunks(width))
                    .zip(out.chunks(width))
                {
                    let dot: T = ur.iter().zip(yr).map(|(&u, &y)| u * y).sum();
                    for ((gi, &u), &y) in gr.iter_mut().zip(ur).zip(yr) {
                        *gi += y * (u - dot);
                    }
                }
            });
        }
        Op::LogSoftmax { x } => {
            let width = *node.value.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *x, |g| {
                for ((gr, ur), yr) in g
                    .chunks_mut(width)
                    .zip(up.chunks(width))
                    .zip(out.chunks(width))
                {
                    let total: T = ur.iter().copied().sum();
                    for ((gi, &u), &y) in gr.iter_mut().zip(ur).zip(yr) {
                        *gi += u - y.exp() * total;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            xhat,
            inv_std,
        } => {
            layer_norm_backward(nodes, grads, up, *x, *gain, None, xhat, inv_std);
        }
        Op::LayerNormAffine {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            layer_norm_backward(nodes, grads, up, *x, *gain, Some(*bias), xhat, inv_std);
        }
        Op::Dropout { x, scales } => {
            accumulate(nodes, grads, *x, |g| {
                for ((gi, &u), &s) in g.iter_mut().zip(up).zip(scales) {
                    *gi += u * s;
                }
            });
        }
        Op::Embedding { table, ids } => {
            let width = nodes[*table].value.shape()[1];
            accumulate(nodes, grads, *table, |g| {
                for (row, &id) in up.chunks(width).zip(ids) {
                    add_into(&mut g[id * width..(id + 1) * width], row);
                }
            });
        }
        Op::Reshape { x } => {
            accumulate(nodes, grads, *x, |g| add_into(g, up));
        }
        Op::Permute { x, axes } => {
            let inverse = kernels::inverse_axes(axes);
            let (back, _) = kernels::permute(up, node.value.shape(), &inverse);
            accumulate(nodes, grads, *x, |g| add_into(g, &back));
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].value.shape()[*axis] * inner;
                accumulate(nodes, grads, p, |g| {
                    for o in 0..outer {
                        add_into(
                            &mut g[o * width..(o + 1) * width],
                            &up[o * total + offset..o * total + offset + width],
                        );
                    }
                });
                offset += width;
            }
        }
        Op::Sum { x } => {
            let u = up[0];
            accumulate(nodes, grads, *x, |g| {
                for gi in g.iter_mut() {
                    *gi += u;
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    up: &[T],
    x: usize,
    gain: usize,
    bias: Option<usize>,
    xhat: &[T],
    inv_std: &[T],
) {
    let gv = nodes[gain].value.data();
    let width = gv.len();
    let n = T::of(width as f64);
    accumulate(nodes, grads, x, |g| {
        for (r, &inv) in inv_std.iter().enumerate() {
            let span = r * width..(r + 1) * width;
            let (u, xh) = (&up[span.clone()], &xhat[span.clone()]);
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for j in 0..width {
                let d = u[j] * gv[j];
                mean_d += d;
                mean_dx += d * xh[j];
            }
            mean_d = mean_d / n;
            mean_dx = mean_dx / n;
            for j in 0..width {
                let d = u[j] * gv[j];
                g[r * width + j] += inv * (d - mean_d - xh[j] * mean_dx);
            }
        }
    });
    accumulate(nodes, grads, gain, |g| {
        for (u, xh) in up.chunks(width).zip(xhat.chunks(width)) {
            for j in 0..width {
                g[j] += u[j] * xh[j];
            }
        }
    });
    if let Some(bias) = bias {
        accumulate(nodes, grads, bias, |g| {
            for u in up.chunks(width) {
                add_into(g, u);
            }
        });
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of one backward sweep, indexed by tape node.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`; zeros when it is off the loss path.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::from_parts(var.shape(), vec![T::zero(); var.len()]))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape(self.id)
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::Contract(
                "operands recorded on different tapes".into(),
            ));
        }
        Ok(())
    }

    fn emit(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'t, T> {
        self.tape.derived(value, op, inputs)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nn(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.emit(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Batched product of `[b,m,k]` with `[b,k,n]`, or with `[b,n,k]`
    /// transposed when `transpose_b` is set.
    pub fn batch_matmul(self, other: Var<'t, T>, transpose_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let inner_b = if transpose_b { sb.get(2) } else { sb.get(1) };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || Some(&sa[2]) != inner_b {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ai = &a.data()[i * m * k..(i + 1) * m * k];
            let bi = &b.data()[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                kernels::mm_nt(ai, bi, oi, m, k, n);
            } else {
                kernels::mm_nn(ai, bi, oi, m, k, n);
            }
        }
        Ok(self.emit(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                transpose_b,
            },
            &[self.id, other.id],
        ))
    }

    fn zip_with(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(name, a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.emit(
            Tensor::from_parts(a.shape().to_vec(), data),
            op,
            &[self.id, other.id],
        ))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::Add {
            a: self.id,
            b: other.id,
        };
        self.zip_with(other, "add", |x, y| x + y, op)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::Sub {
            a: self.id,
            b: other.id,
        };
        self.zip_with(other, "sub", |x, y| x - y, op)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::Mul {
            a: self.id,
            b: other.id,
        };
        self.zip_with(other, "mul", |x, y| x * y, op)
    }

    /// Adds a `[n]` row to every length-`n` slice of the last axis.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&row)?;
        let (x, r) = (self.value(), row.value());
        if r.rank() != 1 || x.shape().last() != Some(&r.len()) {
            return Err(Error::dim("add_row", x.shape(), r.shape()));
        }
        let width = r.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r.data()[i % width])
            .collect();
        Ok(self.emit(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::AddRow {
                x: self.id,
                row: row.id,
            },
            &[self.id, row.id],
        ))
    }

    pub fn scale(self, factor: f64) -> Var<'t, T> {
        let factor = T::of(factor);
        let value = self.value().map(|v| v * factor);
        self.emit(value, Op::Scale { x: self.id, factor }, &[self.id])
    }

    pub fn relu(self) -> Var<'t, T> {
        let value = self.value().map(|v| v.max(T::zero()));
        self.emit(value, Op::Relu { x: self.id }, &[self.id])
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        check_axis(x.shape(), axis, "softmax")?;
        check_no_nan(x.data(), "softmax")?;
        let out = kernels::softmax_axis(x.data(), x.shape(), axis);
        Ok(self.emit(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax { x: self.id, axis },
            &[self.id],
        ))
    }

    /// Softmax over the last axis where `keep[i] == false` entries are
    /// excluded (weight exactly zero).
    pub fn masked_softmax(self, keep: &[bool]) -> Result<Var<'t, T>> {
        let x = self.value();
        if keep.len() != x.len() || x.rank() == 0 {
            return Err(Error::dim("masked_softmax", x.shape(), &[keep.len()]));
        }
        check_no_nan(x.data(), "masked_softmax")?;
        let width = *x.shape().last().expect("rank checked");
        let out = kernels::masked_softmax_rows(x.data(), keep, width);
        Ok(self.emit(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::MaskedSoftmax { x: self.id },
            &[self.id],
        ))
    }

    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let width = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("log_softmax on a rank-0 tensor".into()))?;
        check_no_nan(x.data(), "log_softmax")?;
        let out = kernels::log_softmax_rows(x.data(), width);
        Ok(self.emit(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LogSoftmax { x: self.id },
            &[self.id],
        ))
    }

    /// Normalizes the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(
        self,
        gain: Var<'t, T>,
        bias: Var<'t, T>,
        epsilon: f64,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&gain)?;
        self.same_tape(&bias)?;
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let width = check_layer_norm(x.shape(), g.shape(), b.shape())?;
        let (out, xhat, inv_std) = layer_norm_forward(x.data(), g.data(), b.data(), width, epsilon);
        Ok(self.emit(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNormAffine {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Layer norm with a gain and no bias term.
    pub fn layer_norm_no_bias(self, gain: Var<'t, T>, epsilon: f64) -> Result<Var<'t, T>> {
        self.same_tape(&gain)?;
        let (x, g) = (self.value(), gain.value());
        let width = check_layer_norm(x.shape(), g.shape(), g.shape())?;
        let zeros = vec![T::zero(); width];
        let (out, xhat, inv_std) = layer_norm_forward(x.data(), g.data(), &zeros, width, epsilon);
        Ok(self.emit(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id],
        ))
    }

    pub fn dropout(self, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var<'t, T>> {
        let x = self.value();
        match dropout_scales::<T>(x.len(), p, training, rng)? {
            None => Ok(self),
            Some(scales) => {
                let data = x.data().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
                Ok(self.emit(
                    Tensor::from_parts(x.shape().to_vec(), data),
                    Op::Dropout { x: self.id, scales },
                    &[self.id],
                ))
            }
        }
    }

    /// Row lookup into a `[vocab, width]` table; result is `[ids.len(), width]`.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        if table.rank() != 2 || ids.is_empty() {
            return Err(Error::dim("embedding", table.shape(), &[ids.len()]));
        }
        let (vocab, width) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!(
                "embedding id {bad} outside vocabulary of {vocab}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            data.extend_from_slice(&table.data()[id * width..(id + 1) * width]);
        }
        Ok(self.emit(
            Tensor::from_parts(vec![ids.len(), width], data),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape)?;
        Ok(self.emit(value, Op::Reshape { x: self.id }, &[self.id]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(Error::dim("permute", x.shape(), axes));
        }
        let (data, shape) = kernels::permute(x.data(), x.shape(), axes);
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::dim("transpose", &self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let values: Vec<Tensor<T>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        check_axis(&base, axis, "concat")?;
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let mut shape = base.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let width = v.len() / outer;
                data.extend_from_slice(&v.data()[o * width..(o + 1) * width]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let total = self.value().data().iter().copied().sum();
        self.emit(Tensor::scalar(total), Op::Sum { x: self.id }, &[self.id])
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &Tensor<f64>, numeric: &[f64]) {
        for (&a, &n) in analytic.data().iter().zip(numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    /// Checks `d(sum(w ⊙ f(x)))/dx` for a random projection `w`.
    fn check_unary(x: Tensor<f64>, f: impl for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>) {
        let probe = |input: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let tape = Tape::new();
            let v = tape.param(input.clone());
            let out = f(v).unwrap();
            let w = tape.constant(random(&out.shape(), 99));
            let loss = out.mul(w).unwrap().sum();
            let g = tape.backward(loss).unwrap();
            (loss.value().item().unwrap(), Some(g.wrt(v)))
        };
        let (_, analytic) = probe(&x);
        let numeric = numeric_grad(&x, &|t| probe(t).0);
        assert_close(&analytic.unwrap(), &numeric);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(random(&[3, 2], 1));
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let tape = Tape::new();
        let x = tape.param(random(&[5], 1));
        let y = tape.param(random(&[5], 2));
        let g = tape.backward(x.mul(y).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(x), y.value());
        assert_eq!(g.wrt(y), x.value());
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let tape = Tape::<f64>::new();
        let x = tape.param(random(&[2], 1));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_parameter_gets_zero() {
        let tape = Tape::new();
        let x = tape.param(random(&[3], 1));
        let unused = tape.param(random(&[4], 2));
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros([4]).unwrap());
    }

    #[test]
    fn reused_operand_accumulates() {
        // loss = sum(x · xᵀ); d/dx = (1·x) + (1ᵀ·x) summed over both uses.
        let x0 = random(&[3, 4], 7);
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let xt = x.transpose().unwrap();
        let loss = x.matmul(xt).unwrap().sum();
        let g = tape.backward(loss).unwrap().wrt(x);
        // Analytic: ∂/∂x_ij Σ_ab Σ_k x_ak x_bk = 2 Σ_b x_bj
        for i in 0..3 {
            for j in 0..4 {
                let col: f64 = (0..3).map(|b| x0.at(&[b, j])).sum();
                assert_abs_diff_eq!(g.at(&[i, j]), 2.0 * col, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gradcheck_matmul_both_sides() {
        let b = random(&[4, 3], 2);
        check_unary(random(&[2, 4], 1), move |x| {
            let bv = x.tape().constant(b.clone());
            x.matmul(bv)
        });
        let a = random(&[2, 4], 3);
        check_unary(random(&[4, 3], 4), move |x| {
            let av = x.tape().constant(a.clone());
            av.matmul(x)
        });
    }

    #[test]
    fn gradcheck_batch_matmul() {
        for transpose_b in [false, true] {
            let other_shape = if transpose_b { [2, 5, 4] } else { [2, 4, 5] };
            let other = random(&other_shape, 5);
            check_unary(random(&[2, 3, 4], 6), move |x| {
                let o = x.tape().constant(other.clone());
                x.batch_matmul(o, transpose_b)
            });
            let lhs = random(&[2, 3, 4], 7);
            check_unary(random(&other_shape, 8), move |x| {
                let l = x.tape().constant(lhs.clone());
                l.batch_matmul(x, transpose_b)
            });
        }
    }

    #[test]
    fn gradcheck_elementwise_and_broadcast() {
        let other = random(&[3, 4], 11);
        let o2 = other.clone();
        check_unary(random(&[3, 4], 10), move |x| {
            let o = x.tape().constant(other.clone());
            x.mul(o)?.sub(x)?.add(x.scale(0.3))
        });
        check_unary(random(&[4], 12), move |row| {
            let o = row.tape().constant(o2.clone());
            o.add_row(row)
        });
        check_unary(random(&[3, 4], 13), |x| Ok(x.relu()));
    }

    #[test]
    fn gradcheck_softmax_variants() {
        check_unary(random(&[2, 3, 4], 20), |x| x.softmax(1));
        check_unary(random(&[2, 3, 4], 21), |x| x.softmax(2));
        check_unary(random(&[3, 5], 22), |x| x.log_softmax());
        let keep = vec![
            true, false, true, true, true, false, true, false, false, true,
        ];
        check_unary(random(&[2, 5], 23), move |x| x.masked_softmax(&keep));
    }

    #[test]
    fn gradcheck_layer_norm_all_inputs() {
        let g = random(&[5], 30);
        let b = random(&[5], 31);
        let (g1, b1) = (g.clone(), b.clone());
        check_unary(random(&[3, 5], 32), move |x| {
            let t = x.tape();
            x.layer_norm(t.constant(g1.clone()), t.constant(b1.clone()), 1e-5)
        });
        let x0 = random(&[3, 5], 33);
        let (x1, b2) = (x0.clone(), b.clone());
        check_unary(g.clone(), move |gain| {
            let t = gain.tape();
            t.constant(x1.clone())
                .layer_norm(gain, t.constant(b2.clone()), 1e-5)
        });
        check_unary(b, move |bias| {
            let t = bias.tape();
            t.constant(x0.clone())
                .layer_norm(t.constant(g.clone()), bias, 1e-5)
        });
        check_unary(random(&[5], 34), |gain| {
            let x = gain.tape().constant(random(&[2, 5], 35));
            x.layer_norm_no_bias(gain, 1e-5)
        });
    }

    #[test]
    fn gradcheck_shape_ops() {
        check_unary(random(&[2, 3, 4], 40), |x| x.permute(&[2, 0, 1]));
        check_unary(random(&[2, 3, 4], 41), |x| x.reshape([6, 4])?.transpose());
        check_unary(random(&[2, 3], 42), |x| {
            let other = x.tape().constant(random(&[2, 2], 43));
            Var::concat(&[x, other, x], 1)
        });
        check_unary(random(&[4, 3], 44), |table| table.embedding(&[2, 0, 2, 3]));
    }

    #[test]
    fn gradcheck_dropout_fixed_mask() {
        let x0 = random(&[4, 4], 50);
        let probe = |input: &Tensor<f64>| {
            let tape = Tape::new();
            let v = tape.param(input.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let loss = v
                .dropout(0.3, true, &mut rng)
                .unwrap()
                .mul(v)
                .unwrap()
                .sum();
            let g = tape.backward(loss).unwrap().wrt(v);
            (loss.value().item().unwrap(), g)
        };
        let numeric = numeric_grad(&x0, &|t| probe(t).0);
        assert_close(&probe(&x0).1, &numeric);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let x = Tensor::<f64>::new([2, 3], vec![1e4, -1e4, 0.0, 9999.0, 1e4, -3.0]).unwrap();
        let tape = Tape::new();
        let y = tape.constant(x).softmax(1).unwrap().value();
        assert!(y.is_finite());
        for row in y.data().chunks(3) {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn masked_softmax_zeroes_dropped_entries() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(random(&[2, 3], 1));
        let y = x
            .masked_softmax(&[true, false, true, false, false, false])
            .unwrap()
            .value();
        assert_eq!(y.data()[1], 0.0);
        assert_abs_diff_eq!(y.data()[0] + y.data()[2], 1.0, epsilon = 1e-12);
        assert!(y.data()[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.param(random(&[2, 2], 1));
        let b = t2.param(random(&[2, 2], 2));
        assert!(a.add(b).is_err());
    }
}
