//! Dense inner loops: GEMM variants, im2col/col2im, and convolution size
//! arithmetic. All loops run in a fixed order so results are reproducible.

use super::Scalar;

/// `out = a[m,k] * b[k,n]`, row-major, `out` overwritten.
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(S::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &apv) in arow.iter().enumerate() {
            if apv == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += apv * bv;
            }
        }
    }
}

/// `out = a[m,k] * b[n,k]^T`: rows of `a` dotted with rows of `b`.
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (j, c) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *c = acc;
        }
    }
}

/// `out = a[k,m]^T * b[k,n]`, `out` overwritten.
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(S::zero());
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
}

/// Matrix transpose of a row-major `[r, c]` buffer.
pub fn transpose<S: Scalar>(r: usize, c: usize, x: &[S], out: &mut [S]) {
    debug_assert_eq!(x.len(), r * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
}

/// Output extent of a cross-correlation along one axis, if integral.
pub fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    let span = padded - k;
    if span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

/// Input extent reconstructed by the transpose operation.
pub fn conv_transpose_out(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (input - 1) * stride + k;
    if grown < 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

/// Unfold `x[c,h,w]` into a `[(c*kh*kw), (oh*ow)]` patch matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    col.fill(S::zero());
    let l = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = &mut col[((ch * kh + dy) * kw + dx) * l..((ch * kh + dy) * kw + dx + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[oy * ow + ox] = plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
}

/// Fold a patch matrix back onto an image, accumulating overlaps in a fixed
/// order. Adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [S],
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    x.fill(S::zero());
    let l = oh * ow;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = &col[((ch * kh + dy) * kw + dx) * l..((ch * kh + dy) * kw + dx + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy * w + ix as usize] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}
