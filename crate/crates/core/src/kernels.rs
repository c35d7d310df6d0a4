//! Slice-level numeric kernels shared by the tape's forward and backward rules.

use crate::real::Real;

/// `out += a · b` with `a: m×k`, `b: k×p`.
pub fn matmul_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += g · bᵀ` with `g: m×p`, `b: k×p`, `out: m×k`.
pub fn matmul_nt_acc<S: Real>(g: &[S], b: &[S], out: &mut [S], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let b_row = &b[kk * p..(kk + 1) * p];
            let mut acc = S::zero();
            for (&x, &y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * k + kk] += acc;
        }
    }
}

/// `out += aᵀ · g` with `a: m×k`, `g: m×p`, `out: k×p`.
pub fn matmul_tn_acc<S: Real>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let out_row = &mut out[kk * p..(kk + 1) * p];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aik * gv;
            }
        }
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row<S: Real>(x: &[S], out: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).libm_exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax over the last axis of a `rows×cols` buffer.
pub fn softmax_rows<S: Real>(x: &[S], cols: usize) -> alloc::vec::Vec<S> {
    let mut out = alloc::vec![S::zero(); x.len()];
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        softmax_row(xr, or);
    }
    out
}

/// Transposes the trailing two axes of a `[batch, r, c]` buffer into `[batch, c, r]`.
pub fn transpose_last_two<S: Real>(x: &[S], out: &mut [S], batch: usize, r: usize, c: usize) {
    for b in 0..batch {
        let src = &x[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
}
