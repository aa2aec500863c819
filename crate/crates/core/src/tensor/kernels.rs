// Row-major dense kernels. Every output row is computed with the same loop
// order regardless of how many rows are in the batch, so results are
// bit-identical between batched and single-row evaluation.

use super::Scalar;

/// Dot product with eight independent accumulators, combined in a fixed order.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail_a = chunks_a.remainder();
    let tail_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for l in 0..8 {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let mut tail = S::zero();
    for (x, y) in tail_a.iter().zip(tail_b) {
        tail = tail + *x * *y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

#[inline]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// `out[m, n] = a[m, k] · b[k, n]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], row);
        }
    }
    out
}

/// `grad_a[m, k] += grad_out[m, n] · b[k, n]ᵀ`.
pub(crate) fn matmul_grad_a<S: Scalar>(
    grad_out: &[S],
    b: &[S],
    grad_a: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let g = &grad_out[i * n..(i + 1) * n];
        let dst = &mut grad_a[i * k..(i + 1) * k];
        for (p, d) in dst.iter_mut().enumerate() {
            *d = *d + dot(g, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `grad_b[k, n] += a[m, k]ᵀ · grad_out[m, n]`.
pub(crate) fn matmul_grad_b<S: Scalar>(
    a: &[S],
    grad_out: &[S],
    grad_b: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let g = &grad_out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            axpy(av, g, &mut grad_b[p * n..(p + 1) * n]);
        }
    }
}
