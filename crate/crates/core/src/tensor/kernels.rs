//! Raw numeric kernels over flat slices. Shapes are validated by the callers
//! in [`super::Tape`]; these functions only assert buffer lengths.

use rayon::prelude::*;

use super::Real;

/// Row-major matrix view descriptor: `rows x cols` with the given strides.
#[derive(Clone, Copy, Debug)]
pub struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatLayout {
    /// Contiguous `rows x cols` matrix.
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a contiguous `cols x rows` buffer.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: 1,
            col_stride: rows,
        }
    }

    fn min_len(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `c = alpha * a * b + beta * c` where `c` is dense `a.rows x b.cols`.
pub fn gemm<T: Real>(alpha: T, a: &[T], la: MatLayout, b: &[T], lb: MatLayout, beta: T, c: &mut [T]) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    assert!(a.len() >= la.min_len() && b.len() >= lb.min_len());
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // `a`, `b` and `c`, and `c` is exclusively borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `y[r, o] = sum_i x[r, i] * w[o, i] + b[o]`.
pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, rows: usize, cin: usize, cout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * cout];
    if let Some(b) = b {
        for row in y.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(
        T::one(),
        x,
        MatLayout::dense(rows, cin),
        w,
        MatLayout::transposed(cin, cout),
        beta,
        &mut y,
    );
    y
}

/// Geometry of a stride-1, zero-padded 3D convolution with a cubic odd kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub kernel: usize,
}

impl ConvGeom {
    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn col_rows(&self) -> usize {
        self.cin * self.taps()
    }
}

/// Unfolds one batch item `x[cin, d, h, w]` into `cols[cin * k^3, d * h * w]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [d, h, w] = g.dims;
    let k = g.kernel;
    let pad = (k / 2) as isize;
    let s = g.spatial();
    for ci in 0..g.cin {
        let xc = &x[ci * s..(ci + 1) * s];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[row * s..(row + 1) * s];
                    let (od, oh, ow) = (kd as isize - pad, kh as isize - pad, kw as isize - pad);
                    let (w0, w1) = valid_range(w, ow);
                    for z in 0..d {
                        let sz = z as isize + od;
                        for y in 0..h {
                            let sy = y as isize + oh;
                            let out = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize || w0 >= w1 {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(sz as usize * h + sy as usize) * w..];
                            out[..w0].fill(T::zero());
                            let lo = (w0 as isize + ow) as usize;
                            out[w0..w1].copy_from_slice(&src[lo..lo + (w1 - w0)]);
                            out[w1..].fill(T::zero());
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx[cin, d, h, w]`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [d, h, w] = g.dims;
    let k = g.kernel;
    let pad = (k / 2) as isize;
    let s = g.spatial();
    for ci in 0..g.cin {
        let xc = &mut dx[ci * s..(ci + 1) * s];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * s..(row + 1) * s];
                    let (od, oh, ow) = (kd as isize - pad, kh as isize - pad, kw as isize - pad);
                    let (w0, w1) = valid_range(w, ow);
                    if w0 >= w1 {
                        continue;
                    }
                    for z in 0..d {
                        let sz = z as isize + od;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + oh;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let lo = (w0 as isize + ow) as usize;
                            let dst = &mut xc[(sz as usize * h + sy as usize) * w + lo..];
                            let part = &src[(z * h + y) * w + w0..(z * h + y) * w + w1];
                            for (o, &v) in dst.iter_mut().zip(part) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `[lo, hi)` along an axis of length `n` whose source
/// `pos + offset` is inside the axis.
fn valid_range(n: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset).clamp(0, n as isize) as usize;
    (lo.min(n), hi)
}

pub fn conv3d_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let s = g.spatial();
    let kk = g.col_rows();
    assert_eq!(x.len(), g.batch * g.cin * s);
    assert_eq!(w.len(), g.cout * kk);
    assert_eq!(b.len(), g.cout);
    let mut out = vec![T::zero(); g.batch * g.cout * s];
    out.par_chunks_mut(g.cout * s)
        .zip(x.par_chunks(g.cin * s))
        .for_each_init(Vec::new, |cols, (ob, xb)| {
            for (o, &bias) in ob.chunks_exact_mut(s).zip(b) {
                o.fill(bias);
            }
            let cols_ref: &[T] = if g.kernel == 1 {
                xb
            } else {
                cols.resize(kk * s, T::zero());
                im2col(xb, g, cols);
                cols
            };
            gemm(
                T::one(),
                w,
                MatLayout::dense(g.cout, kk),
                cols_ref,
                MatLayout::dense(kk, s),
                T::one(),
                ob,
            );
        });
    out
}

/// Gradients of a 3D convolution. Returns `(dx, dw, db)`; `dx` is skipped
/// when `need_dx` is false.
pub fn conv3d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let s = g.spatial();
    let kk = g.col_rows();
    let mut db = vec![T::zero(); g.cout];
    for ob in dout.chunks_exact(g.cout * s) {
        for (acc, o) in db.iter_mut().zip(ob.chunks_exact(s)) {
            *acc += o.iter().copied().sum::<T>();
        }
    }
    let mut dx = vec![T::zero(); g.batch * g.cin * s];
    // per-item weight gradients, summed afterwards in batch order
    let partials: Vec<Vec<T>> = dx
        .par_chunks_mut(g.cin * s)
        .enumerate()
        .map_init(Vec::new, |cols, (bi, dxb)| {
            let xb = &x[bi * g.cin * s..(bi + 1) * g.cin * s];
            let ob = &dout[bi * g.cout * s..(bi + 1) * g.cout * s];
            let mut dw = Vec::new();
            if need_dw {
                dw = vec![T::zero(); g.cout * kk];
                let cols_ref: &[T] = if g.kernel == 1 {
                    xb
                } else {
                    cols.resize(kk * s, T::zero());
                    im2col(xb, g, cols);
                    cols
                };
                gemm(
                    T::one(),
                    ob,
                    MatLayout::dense(g.cout, s),
                    cols_ref,
                    MatLayout::transposed(s, kk),
                    T::zero(),
                    &mut dw,
                );
            }
            if need_dx {
                if g.kernel == 1 {
                    gemm(
                        T::one(),
                        w,
                        MatLayout::transposed(g.cin, g.cout),
                        ob,
                        MatLayout::dense(g.cout, s),
                        T::zero(),
                        dxb,
                    );
                } else {
                    cols.resize(kk * s, T::zero());
                    gemm(
                        T::one(),
                        w,
                        MatLayout::transposed(kk, g.cout),
                        ob,
                        MatLayout::dense(g.cout, s),
                        T::zero(),
                        cols,
                    );
                    col2im(cols, g, dxb);
                }
            }
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); if need_dw { g.cout * kk } else { 0 }];
    for p in &partials {
        for (acc, &v) in dw.iter_mut().zip(p) {
            *acc += v;
        }
    }
    (need_dx.then_some(dx), dw, db)
}
