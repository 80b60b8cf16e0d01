//! Tensor kernels shared by the autodiff graph.
//!
//! Everything here is deterministic: reductions sum sequentially in index
//! order, and the only parallelism (matmul) partitions whole output rows
//! across threads, so each element is still produced by one sequential
//! accumulation and results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{MoltError, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Work threshold (multiply-adds) below which matmul stays single-threaded.
const PAR_MATMUL_THRESHOLD: usize = 1 << 15;

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(MoltError::shape(
                "broadcast",
                format!("incompatible shapes {a:?} and {b:?}"),
            ));
        }
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if broadcast to `out_shape`
/// (stride 0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        let s = if shape[i] == 1 { 0 } else { acc };
        strides[pad + i] = s;
        acc *= shape[i];
    }
    strides
}

pub fn binary_op<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.numel() == 1 {
        let y = b.data()[0];
        let data = a.data().iter().map(|&x| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if a.numel() == 1 {
        let x = a.data()[0];
        let data = b.data().iter().map(|&y| f(x, y)).collect();
        return Tensor::new(b.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let rank = out_shape.len();
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let (ad, bd) = (a.data(), b.data());
    for _ in 0..numel {
        data.push(f(ad[oa], bd[ob]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Tensor::new(out_shape, data)
}

/// Sum `grad` down to `target_shape` (reverse of broadcasting).
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target_shape: &[usize]) -> Tensor<T> {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let out_numel: usize = target_shape.iter().product();
    let mut out = vec![T::zero(); out_numel];
    let rank = grad.rank();
    let st = broadcast_strides(target_shape, grad.shape());
    let gshape = grad.shape();
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &g in grad.data() {
        out[ot] = out[ot] + g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < gshape[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * gshape[d];
        }
    }
    Tensor::new(target_shape.to_vec(), out).expect("reduce_to_shape")
}

/// Matmul of `[..., m, k] x [..., k, n]`; a 2-D rhs is shared across the
/// leading batch dims of the lhs.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let ar = a.rank();
    let br = b.rank();
    if ar < 2 || br < 2 {
        return Err(MoltError::shape("matmul", "operands must have rank >= 2".to_string()));
    }
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if k != kb {
        return Err(MoltError::shape(
            "matmul",
            format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let a_batch: usize = a.shape()[..ar - 2].iter().product();
    let b_shared = br == 2;
    if !b_shared && b.shape()[..br - 2] != a.shape()[..ar - 2] {
        return Err(MoltError::shape(
            "matmul",
            format!("batch dims differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out_shape = a.shape()[..ar - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);

    let total_rows = a_batch * m;
    let mut out = vec![T::zero(); total_rows * n];
    let ad = a.data();
    let bd = b.data();

    let row_kernel = |row: usize, crow: &mut [T]| {
        let batch = row / m;
        let i = row % m;
        let arow = &ad[(batch * m + i) * k..(batch * m + i) * k + k];
        let bbase = if b_shared { 0 } else { batch * k * n };
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &bd[bbase + kk * n..bbase + kk * n + n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = *c + av * bv;
            }
        }
    };

    if total_rows * k * n >= PAR_MATMUL_THRESHOLD && total_rows > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(row, crow)| row_kernel(row, crow));
    } else {
        for (row, crow) in out.chunks_mut(n).enumerate() {
            row_kernel(row, crow);
        }
    }
    Tensor::new(out_shape, out)
}

/// Transpose the last two axes (batched).
pub fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let r = t.rank();
    if r < 2 {
        return Err(MoltError::shape("transpose", "rank >= 2 required".to_string()));
    }
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch: usize = t.shape()[..r - 2].iter().product();
    let mut out_shape = t.shape().to_vec();
    out_shape[r - 2] = n;
    out_shape[r - 1] = m;
    let d = t.data();
    let mut out = vec![T::zero(); d.len()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn permute<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = t.rank();
    if axes.len() != rank {
        return Err(MoltError::shape("permute", format!("axes {axes:?} vs rank {rank}")));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(MoltError::shape("permute", format!("bad axes {axes:?}")));
        }
        seen[a] = true;
    }
    let in_strides = t.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = t.numel();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let d = t.data();
    for _ in 0..numel {
        out.push(d[off]);
        for dim in (0..rank).rev() {
            idx[dim] += 1;
            off += src_strides[dim];
            if idx[dim] < out_shape[dim] {
                break;
            }
            idx[dim] = 0;
            off -= src_strides[dim] * out_shape[dim];
        }
    }
    Tensor::new(out_shape, out)
}

/// Inverse permutation, for the backward pass of `permute`.
pub fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn sum_all<T: Scalar>(t: &Tensor<T>) -> T {
    let mut acc = T::zero();
    for &v in t.data() {
        acc = acc + v;
    }
    acc
}

/// Sum over one axis, removing it from the shape.
pub fn sum_axis<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let rank = t.rank();
    if axis >= rank {
        return Err(MoltError::shape("sum_axis", format!("axis {axis} vs rank {rank}")));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let len = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * inner];
    let d = t.data();
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            let obase = o * inner;
            for i in 0..inner {
                out[obase + i] = out[obase + i] + d[base + i];
            }
        }
    }
    let mut out_shape = t.shape().to_vec();
    out_shape.remove(axis);
    Tensor::new(out_shape, out)
}

/// Repeat `grad` (shape without `axis`) along `axis` `len` times — the
/// backward of `sum_axis`.
pub fn broadcast_axis<T: Scalar>(grad: &Tensor<T>, axis: usize, len: usize) -> Tensor<T> {
    let outer: usize = grad.shape()[..axis].iter().product();
    let inner: usize = grad.shape()[axis..].iter().product();
    let mut out = Vec::with_capacity(grad.numel() * len);
    let d = grad.data();
    for o in 0..outer {
        let row = &d[o * inner..(o + 1) * inner];
        for _ in 0..len {
            out.extend_from_slice(row);
        }
    }
    let mut out_shape = grad.shape().to_vec();
    out_shape.insert(axis, len);
    Tensor::new(out_shape, out).expect("broadcast_axis")
}

/// Softmax over each last-dim row, restricted to unmasked entries; masked
/// entries are exactly zero and excluded from the normalization. A row with
/// no unmasked entry becomes all zeros.
pub fn masked_softmax_rows<T: Scalar>(data: &mut [T], mask: &[bool], row_len: usize) {
    debug_assert_eq!(data.len(), mask.len());
    for (row, mrow) in data.chunks_mut(row_len).zip(mask.chunks(row_len)) {
        let mut maxv = T::neg_infinity();
        for (v, &keep) in row.iter().zip(mrow) {
            if keep && *v > maxv {
                maxv = *v;
            }
        }
        if maxv == T::neg_infinity() {
            for v in row.iter_mut() {
                *v = T::zero();
            }
            continue;
        }
        let mut sum = T::zero();
        for (v, &keep) in row.iter_mut().zip(mrow) {
            if keep {
                *v = (*v - maxv).exp();
                sum = sum + *v;
            } else {
                *v = T::zero();
            }
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

pub fn log_softmax_rows<T: Scalar>(data: &mut [T], row_len: usize) {
    for row in data.chunks_mut(row_len) {
        let mut maxv = T::neg_infinity();
        for &v in row.iter() {
            if v > maxv {
                maxv = v;
            }
        }
        let mut sum = T::zero();
        for &v in row.iter() {
            sum = sum + (v - maxv).exp();
        }
        let lse = maxv + sum.ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
}

/// Plain softmax of a slice, in place (used by the scheduler formulas).
pub fn softmax_in_place(xs: &mut [f64]) {
    let maxv = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - maxv).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_2d() {
        let a = t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t64(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_batched_shared_rhs() {
        let a = t64(&[2, 1, 2], &[1., 0., 0., 1.]);
        let b = t64(&[2, 2], &[1., 2., 3., 4.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 2]);
        assert_eq!(c.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn broadcast_add_row() {
        let a = t64(&[2, 3], &[0., 0., 0., 1., 1., 1.]);
        let b = t64(&[3], &[10., 20., 30.]);
        let c = binary_op(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[10., 20., 30., 11., 21., 31.]);
    }

    #[test]
    fn broadcast_mul_col() {
        let a = t64(&[2, 2], &[1., 2., 3., 4.]);
        let b = t64(&[2, 1], &[10., 100.]);
        let c = binary_op(&a, &b, |x, y| x * y).unwrap();
        assert_eq!(c.data(), &[10., 20., 300., 400.]);
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        let g = t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[5., 7., 9.]);
        let r2 = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r2.data(), &[6., 15.]);
    }

    #[test]
    fn sum_axis_middle() {
        let t = t64(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let s = sum_axis(&t, 1).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4., 6., 12., 14.]);
    }

    #[test]
    fn permute_roundtrip() {
        let t = t64(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let p = permute(&t, &[2, 0, 1]).unwrap();
        let back = permute(&p, &invert_axes(&[2, 0, 1])).unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn masked_softmax_excludes_masked() {
        let mut d = vec![1.0f64, 1.0, 0.0, 0.0, 2.0, 2.0];
        let mask = vec![true, true, true, true, false, false];
        masked_softmax_rows(&mut d, &mask, 6);
        assert_eq!(d[4], 0.0);
        assert_eq!(d[5], 0.0);
        let s: f64 = d.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!((d[0] - 0.36552928931500245).abs() < 1e-12);
        assert!((d[2] - 0.13447071068499755).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_uniform() {
        let mut d = vec![0.0f64; 5];
        log_softmax_rows(&mut d, 5);
        for v in d {
            assert!((v + (5.0f64).ln()).abs() < 1e-12);
        }
    }
}
