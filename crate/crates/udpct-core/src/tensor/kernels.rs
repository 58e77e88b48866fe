//! Convolution and matrix kernels.
//!
//! All kernels accumulate along a fixed index order per output element, so
//! results are bit-identical regardless of thread count. Parallelism (rayon,
//! behind the `parallel` feature) only ever splits disjoint output rows.

use alloc::vec;
use alloc::vec::Vec;

use super::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Conv output extent per axis; `None` when the kernel does not fit.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Transposed-conv output extent per axis: `(n-1)*stride - 2*pad + k`.
pub fn convt_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (n - 1) * stride + k;
    if grown <= 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

/// Geometry of one 3-D convolution (shared by the transposed direction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spatial dims on the conv-input side.
    pub in_sp: [usize; 3],
    /// Spatial dims on the conv-output side.
    pub out_sp: [usize; 3],
}

impl ConvGeom {
    pub fn forward(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        in_sp: [usize; 3],
    ) -> Option<Self> {
        let od = conv_out_dim(in_sp[0], k, stride, pad)?;
        let oh = conv_out_dim(in_sp[1], k, stride, pad)?;
        let ow = conv_out_dim(in_sp[2], k, stride, pad)?;
        Some(Self {
            cin,
            cout,
            k,
            stride,
            pad,
            in_sp,
            out_sp: [od, oh, ow],
        })
    }

    /// Geometry for a transposed conv whose input has spatial `x_sp`; the
    /// result's `in_sp` is the transposed-conv output extent.
    pub fn transposed(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        x_sp: [usize; 3],
    ) -> Option<Self> {
        let d = convt_out_dim(x_sp[0], k, stride, pad)?;
        let h = convt_out_dim(x_sp[1], k, stride, pad)?;
        let w = convt_out_dim(x_sp[2], k, stride, pad)?;
        Some(Self {
            cin,
            cout,
            k,
            stride,
            pad,
            in_sp: [d, h, w],
            out_sp: x_sp,
        })
    }

    /// Patch-matrix row count: `cin * k^3`.
    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// Patch-matrix column count: number of conv-output voxels.
    pub fn ncols(&self) -> usize {
        self.out_sp[0] * self.out_sp[1] * self.out_sp[2]
    }

    pub fn in_voxels(&self) -> usize {
        self.in_sp[0] * self.in_sp[1] * self.in_sp[2]
    }
}

/// Unfolds one image (`cin * in_sp` scalars) into the patch matrix
/// (`rows x ncols`, row-major).
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [din, hin, win] = g.in_sp;
    let [od, oh, ow] = g.out_sp;
    let ncols = g.ncols();
    debug_assert_eq!(x.len(), g.cin * g.in_voxels());
    debug_assert_eq!(cols.len(), g.rows() * ncols);
    let (s, p, k) = (g.stride, g.pad, g.k);

    let mut r = 0;
    for ci in 0..g.cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = &mut cols[r * ncols..(r + 1) * ncols];
                    // valid output range along w for this kernel offset
                    let (w_lo, w_hi) = valid_out_range(ow, win, s, p, kw);
                    for zd in 0..od {
                        let d = (zd * s + kd) as isize - p as isize;
                        let drow = &mut row[zd * oh * ow..(zd + 1) * oh * ow];
                        if d < 0 || d >= din as isize {
                            for v in drow.iter_mut() {
                                *v = T::zero();
                            }
                            continue;
                        }
                        for zh in 0..oh {
                            let h = (zh * s + kh) as isize - p as isize;
                            let wrow = &mut drow[zh * ow..(zh + 1) * ow];
                            if h < 0 || h >= hin as isize {
                                for v in wrow.iter_mut() {
                                    *v = T::zero();
                                }
                                continue;
                            }
                            let base = ((ci * din + d as usize) * hin + h as usize) * win;
                            for v in wrow[..w_lo].iter_mut() {
                                *v = T::zero();
                            }
                            for (zw, v) in wrow[w_lo..w_hi].iter_mut().enumerate() {
                                let wi = (w_lo + zw) * s + kw - p;
                                *v = x[base + wi];
                            }
                            for v in wrow[w_hi..].iter_mut() {
                                *v = T::zero();
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds the patch matrix back into an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let [din, hin, win] = g.in_sp;
    let [od, oh, ow] = g.out_sp;
    let ncols = g.ncols();
    debug_assert_eq!(x.len(), g.cin * g.in_voxels());
    debug_assert_eq!(cols.len(), g.rows() * ncols);
    let (s, p, k) = (g.stride, g.pad, g.k);

    let mut r = 0;
    for ci in 0..g.cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = &cols[r * ncols..(r + 1) * ncols];
                    let (w_lo, w_hi) = valid_out_range(ow, win, s, p, kw);
                    for zd in 0..od {
                        let d = (zd * s + kd) as isize - p as isize;
                        if d < 0 || d >= din as isize {
                            continue;
                        }
                        let drow = &row[zd * oh * ow..(zd + 1) * oh * ow];
                        for zh in 0..oh {
                            let h = (zh * s + kh) as isize - p as isize;
                            if h < 0 || h >= hin as isize {
                                continue;
                            }
                            let wrow = &drow[zh * ow..(zh + 1) * ow];
                            let base = ((ci * din + d as usize) * hin + h as usize) * win;
                            for (zw, &v) in wrow[w_lo..w_hi].iter().enumerate() {
                                let wi = (w_lo + zw) * s + kw - p;
                                x[base + wi] = x[base + wi] + v;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Output positions `z` with `0 <= z*s + koff - p < extent`, as `lo..hi`.
fn valid_out_range(
    out: usize,
    extent: usize,
    s: usize,
    p: usize,
    koff: usize,
) -> (usize, usize) {
    let mut lo = 0usize;
    while lo < out && (lo * s + koff) < p {
        lo += 1;
    }
    let mut hi = out;
    while hi > lo && ((hi - 1) * s + koff) as isize - p as isize >= extent as isize {
        hi -= 1;
    }
    (lo, hi)
}

const KC: usize = 128;
const NC: usize = 512;
const PAR_WORK_MIN: usize = 1 << 18;

/// `C += A * B` with `A: m x k`, `B: k x n`, `C: m x n`, all row-major.
pub fn gemm_nn<T: Scalar>(m: usize, kdim: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * kdim);
    debug_assert_eq!(b.len(), kdim * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(feature = "parallel")]
    {
        let threads = rayon::current_num_threads();
        if threads > 1 && m >= 2 && m * kdim * n >= PAR_WORK_MIN {
            let rows_per = m.div_ceil(threads);
            c.par_chunks_mut(rows_per * n)
                .enumerate()
                .for_each(|(ci, chunk)| {
                    let row0 = ci * rows_per;
                    let rows = chunk.len() / n;
                    gemm_nn_serial(rows, kdim, n, &a[row0 * kdim..(row0 + rows) * kdim], b, chunk);
                });
            return;
        }
    }
    gemm_nn_serial(m, kdim, n, a, b, c);
}

fn gemm_nn_serial<T: Scalar>(m: usize, kdim: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut kb = 0;
    while kb < kdim {
        let ke = (kb + KC).min(kdim);
        let mut jb = 0;
        while jb < n {
            let je = (jb + NC).min(n);
            for i in 0..m {
                let a_row = &a[i * kdim..(i + 1) * kdim];
                let c_seg = &mut c[i * n + jb..i * n + je];
                for kk in kb..ke {
                    let aik = a_row[kk];
                    let b_seg = &b[kk * n + jb..kk * n + je];
                    for (cv, &bv) in c_seg.iter_mut().zip(b_seg) {
                        *cv = *cv + aik * bv;
                    }
                }
            }
            jb = je;
        }
        kb = ke;
    }
}

/// `C += A * B^T` with `A: m x k`, `B: n x k`, `C: m x n`.
pub fn gemm_nt<T: Scalar>(m: usize, kdim: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * kdim);
    debug_assert_eq!(b.len(), n * kdim);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(feature = "parallel")]
    {
        let threads = rayon::current_num_threads();
        if threads > 1 && m >= 2 && m * kdim * n >= PAR_WORK_MIN {
            let rows_per = m.div_ceil(threads);
            c.par_chunks_mut(rows_per * n)
                .enumerate()
                .for_each(|(ci, chunk)| {
                    let row0 = ci * rows_per;
                    let rows = chunk.len() / n;
                    gemm_nt_serial(rows, kdim, n, &a[row0 * kdim..(row0 + rows) * kdim], b, chunk);
                });
            return;
        }
    }
    gemm_nt_serial(m, kdim, n, a, b, c);
}

fn gemm_nt_serial<T: Scalar>(m: usize, kdim: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    const JB: usize = 32;
    let mut jb = 0;
    while jb < n {
        let je = (jb + JB).min(n);
        for i in 0..m {
            let a_row = &a[i * kdim..(i + 1) * kdim];
            for j in jb..je {
                let b_row = &b[j * kdim..(j + 1) * kdim];
                c[i * n + j] = c[i * n + j] + dot(a_row, b_row);
            }
        }
        jb = je;
    }
}

/// `C += A^T * B` with `A: k x m`, `B: k x n`, `C: m x n`.
pub fn gemm_tn<T: Scalar>(m: usize, kdim: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), kdim * m);
    debug_assert_eq!(b.len(), kdim * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..kdim {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aki * bv;
            }
        }
    }
}

/// Eight-lane unrolled dot product with a fixed reduction order.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ia = a.chunks_exact(8);
    let mut ib = b.chunks_exact(8);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        for l in 0..8 {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ia.remainder().iter().zip(ib.remainder()) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn transpose<T: Scalar>(m: usize, n: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Forward conv over a batch: `y[n] = W * cols(x[n]) (+ bias)`.
pub fn conv3d_fwd<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
    y: &mut [T],
) {
    let ncols = g.ncols();
    let rows = g.rows();
    let in_len = g.cin * g.in_voxels();
    let out_len = g.cout * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    for nb in 0..batch {
        im2col(&x[nb * in_len..(nb + 1) * in_len], g, &mut cols);
        let y_n = &mut y[nb * out_len..(nb + 1) * out_len];
        for v in y_n.iter_mut() {
            *v = T::zero();
        }
        gemm_nn(g.cout, rows, ncols, w, &cols, y_n);
        if let Some(b) = bias {
            for co in 0..g.cout {
                let bv = b[co];
                for v in y_n[co * ncols..(co + 1) * ncols].iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    }
}

/// Backward of [`conv3d_fwd`]; any of the gradient outputs may be skipped.
pub fn conv3d_bwd<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let ncols = g.ncols();
    let rows = g.rows();
    let in_len = g.cin * g.in_voxels();
    let out_len = g.cout * ncols;
    let need_cols = dw.is_some();
    let mut cols = vec![T::zero(); if need_cols { rows * ncols } else { 0 }];
    let wt = if dx.is_some() {
        transpose(g.cout, rows, w)
    } else {
        Vec::new()
    };
    let mut dcols = vec![T::zero(); if dx.is_some() { rows * ncols } else { 0 }];
    let mut dw_acc = dw;
    let mut db_acc = db;
    let mut dx_acc = dx;
    for nb in 0..batch {
        let dy_n = &dy[nb * out_len..(nb + 1) * out_len];
        if let Some(db) = db_acc.as_deref_mut() {
            for co in 0..g.cout {
                let mut s = T::zero();
                for &v in &dy_n[co * ncols..(co + 1) * ncols] {
                    s = s + v;
                }
                db[co] = db[co] + s;
            }
        }
        if let Some(dw) = dw_acc.as_deref_mut() {
            im2col(&x[nb * in_len..(nb + 1) * in_len], g, &mut cols);
            gemm_nt(g.cout, ncols, rows, dy_n, &cols, dw);
        }
        if let Some(dx) = dx_acc.as_deref_mut() {
            for v in dcols.iter_mut() {
                *v = T::zero();
            }
            gemm_nn(rows, g.cout, ncols, &wt, dy_n, &mut dcols);
            col2im(&dcols, g, &mut dx[nb * in_len..(nb + 1) * in_len]);
        }
    }
}

/// Forward transposed conv: `out[n] = col2im(W^T * x[n]) (+ bias)`.
///
/// `g` is the geometry of the *matching forward conv*: the input here lives
/// on `g.out_sp` with `g.cout` channels and the output on `g.in_sp` with
/// `g.cin` channels. Weight layout `(cout, cin, k, k, k)` is shared with the
/// forward direction, making this the exact adjoint.
pub fn convt3d_fwd<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let ncols = g.ncols();
    let rows = g.rows();
    let in_len = g.cout * ncols;
    let out_len = g.cin * g.in_voxels();
    let vox = g.in_voxels();
    let wt = transpose(g.cout, rows, w);
    let mut z = vec![T::zero(); rows * ncols];
    for nb in 0..batch {
        for v in z.iter_mut() {
            *v = T::zero();
        }
        gemm_nn(rows, g.cout, ncols, &wt, &x[nb * in_len..(nb + 1) * in_len], &mut z);
        let o = &mut out[nb * out_len..(nb + 1) * out_len];
        for v in o.iter_mut() {
            *v = T::zero();
        }
        col2im(&z, g, o);
        if let Some(b) = bias {
            for ci in 0..g.cin {
                let bv = b[ci];
                for v in o[ci * vox..(ci + 1) * vox].iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    }
}

/// Backward of [`convt3d_fwd`].
pub fn convt3d_bwd<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let ncols = g.ncols();
    let rows = g.rows();
    let in_len = g.cout * ncols;
    let out_len = g.cin * g.in_voxels();
    let vox = g.in_voxels();
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dx_acc = dx;
    let mut dw_acc = dw;
    let mut db_acc = db;
    for nb in 0..batch {
        let dout_n = &dout[nb * out_len..(nb + 1) * out_len];
        if let Some(db) = db_acc.as_deref_mut() {
            for ci in 0..g.cin {
                let mut s = T::zero();
                for &v in &dout_n[ci * vox..(ci + 1) * vox] {
                    s = s + v;
                }
                db[ci] = db[ci] + s;
            }
        }
        if dx_acc.is_some() || dw_acc.is_some() {
            im2col(dout_n, g, &mut cols);
        }
        if let Some(dx) = dx_acc.as_deref_mut() {
            gemm_nn(
                g.cout,
                rows,
                ncols,
                w,
                &cols,
                &mut dx[nb * in_len..(nb + 1) * in_len],
            );
        }
        if let Some(dw) = dw_acc.as_deref_mut() {
            gemm_nt(
                g.cout,
                ncols,
                rows,
                &x[nb * in_len..(nb + 1) * in_len],
                &cols,
                dw,
            );
        }
    }
}
