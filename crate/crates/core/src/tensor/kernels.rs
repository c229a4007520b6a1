//! Raw numeric kernels behind the graph ops.
//!
//! All matrix products accumulate (`c += a * b` style) so backward passes can
//! sum contributions in place; callers zero the output first when needed.
//! Loop order keeps the innermost walk contiguous in both read and write so
//! the autovectorizer can do its job.

/// c[m x n] += a[m x k] * b[k x n]
pub fn mm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// c[m x n] += a[m x k] * b[n x k]^T  (b stored row-major as n rows of k)
pub fn mm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c_row[j] += acc;
        }
    }
}

/// c[m x n] += a[k x m]^T * b[k x n]  (a stored row-major as k rows of m)
pub fn mm_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// Output extent for one spatial axis; `None` when the kernel overhangs the
/// padded input and no window fits.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds one sample `x[c x h x w]` into `cols[(c*kh*kw) x (oh*ow)]`, the
/// patch matrix a convolution multiplies against. Out-of-bounds taps read 0.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    cols: &mut [f64],
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    im2col_rows(cols, x, c, h, w, kernel, stride, pad, ow, 0, oh);
}

/// [`im2col`] restricted to output rows `oy0..oy1`, so callers can bound the
/// patch-matrix buffer on large inputs. `cols` holds
/// `(c*kernel*kernel) x ((oy1-oy0)*ow)` values.
#[allow(clippy::too_many_arguments)]
pub fn im2col_rows(
    cols: &mut [f64],
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ow: usize,
    oy0: usize,
    oy1: usize,
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kernel * kernel * (oy1 - oy0) * ow);
    let ncols = (oy1 - oy0) * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in oy0..oy1 {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut out[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    // ix = ox*stride + kj - pad must stay inside [0, w).
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch-matrix gradients back onto the
/// input gradient plane.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    dx: &mut [f64],
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    debug_assert_eq!(dx.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kernel * kernel * oh * ow);
    let ncols = oh * ow;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let col_row = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &col_row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
