//! NumPy-style broadcasting helpers.

use super::Scalar;

/// Broadcast result of two shapes, aligned at the trailing axis.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index into a tensor of shape `src`
/// that broadcasts to it.
pub fn source_indices(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n = out.len();
    let offset = n - src.len();
    // Stride of each output axis inside `src` (0 where broadcast).
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; total];
    if src.iter().product::<usize>() == total {
        for (i, v) in idx.iter_mut().enumerate() {
            *v = i;
        }
        return idx;
    }
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for v in idx.iter_mut() {
        *v = cur;
        for ax in (0..n).rev() {
            counter[ax] += 1;
            cur += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

/// Reduce a gradient of shape `out` back onto the broadcast source shape.
pub fn sum_to_shape<T: Scalar>(grad: &[T], out: &[usize], src: &[usize]) -> Vec<T> {
    let n: usize = src.iter().product();
    if n == grad.len() {
        return grad.to_vec();
    }
    let mut acc = vec![T::zero(); n];
    // Trailing-suffix fast path (bias-style broadcast).
    let suffix = out.len() >= src.len() && out[out.len() - src.len()..] == *src;
    if suffix {
        for chunk in grad.chunks(n) {
            for (a, &g) in acc.iter_mut().zip(chunk) {
                *a += g;
            }
        }
        return acc;
    }
    for (g, i) in grad.iter().zip(source_indices(out, src)) {
        acc[i] += *g;
    }
    acc
}
