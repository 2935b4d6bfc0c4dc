//! Raw row-major slice kernels shared by the eager and taped code paths.
//!
//! Every kernel accumulates into `out` so backward rules can sum partials
//! without temporaries.

use super::Scalar;

/// out[m,n] += a[m,k] · b[k,n]
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis_len, inner) extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along one axis.
pub fn softmax_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(x[idx(a)]);
            }
            let mut total = T::zero();
            for a in 0..len {
                let e = (x[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] = out[idx(a)] / total;
            }
        }
    }
    out
}

/// Softmax over the last axis restricted to entries where `keep` is true.
/// Dropped entries get exactly zero weight, the same as adding −∞ before
/// normalizing. A row with no kept entries yields all zeros.
pub fn masked_softmax_rows<T: Scalar>(x: &[T], keep: &[bool], row_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ((row, mask), out_row) in x
        .chunks(row_len)
        .zip(keep.chunks(row_len))
        .zip(out.chunks_mut(row_len))
    {
        let mut max = T::neg_infinity();
        for (&v, &k) in row.iter().zip(mask) {
            if k {
                max = max.max(v);
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut total = T::zero();
        for ((o, &v), &k) in out_row.iter_mut().zip(row).zip(mask) {
            if k {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in out_row.iter_mut() {
            *o = *o / total;
        }
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(x: &[T], row_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, out_row) in x.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Row strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Moves axes so output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut index = vec![0usize; shape.len()];
    for _ in 0..x.len() {
        let offset: usize = index.iter().zip(&gather).map(|(i, s)| i * s).sum();
        out.push(x[offset]);
        for d in (0..index.len()).rev() {
            index[d] += 1;
            if index[d] < out_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    (out, out_shape)
}

/// Inverse of an axis permutation.
pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
