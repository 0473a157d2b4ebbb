//! 3D convolution kernels (im2col + GEMM), single batch item, channels-first.
//!
//! Layouts: input `[C_in, H, W, D]`, weight `[C_out, C_in, k, k, k]`,
//! output `[C_out, H', W', D']`, all z-fastest. Zero padding.

use crate::scalar::Real;

/// Upper bound on im2col buffer elements; larger outputs are processed in x-slabs.
const MAX_COL_ELEMS: usize = 1 << 22;

pub fn conv3d_output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    dims: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    out: [usize; 3],
}

impl Geometry {
    fn new(in_shape: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        let dims = [in_shape[1], in_shape[2], in_shape[3]];
        let out = dims.map(|n| conv3d_output_extent(n, k, stride, pad).expect("validated extent"));
        Self {
            cin: in_shape[0],
            dims,
            k,
            stride,
            pad,
            out,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn slab_rows(&self) -> usize {
        (MAX_COL_ELEMS / (self.rows() * self.plane()).max(1)).clamp(1, self.out[0])
    }

    /// Fill `col[rows, (x1-x0)*plane]` for output x-planes `x0..x1`.
    fn im2col<T: Real>(&self, x: &[T], x0: usize, x1: usize, col: &mut [T]) {
        let [h, w, d] = self.dims;
        let [_, ow, od] = self.out;
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let ncols = (x1 - x0) * self.plane();
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &x[ci * h * w * d..(ci + 1) * h * w * d];
            for kx in 0..k {
                for ky in 0..k {
                    for kz in 0..k {
                        let dst = &mut col[row * ncols..(row + 1) * ncols];
                        let mut j = 0;
                        for ox in x0..x1 {
                            let ix = ox as isize * s + kx as isize - p;
                            for oy in 0..ow {
                                let iy = oy as isize * s + ky as isize - p;
                                if ix < 0 || ix >= h as isize || iy < 0 || iy >= w as isize {
                                    dst[j..j + od].fill(T::zero());
                                    j += od;
                                    continue;
                                }
                                let base = (ix as usize * w + iy as usize) * d;
                                for oz in 0..od {
                                    let iz = oz as isize * s + kz as isize - p;
                                    dst[j] = if iz < 0 || iz >= d as isize {
                                        T::zero()
                                    } else {
                                        xc[base + iz as usize]
                                    };
                                    j += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-add of `col` back onto the input gradient (adjoint of `im2col`).
    fn col2im<T: Real>(&self, col: &[T], x0: usize, x1: usize, gx: &mut [T]) {
        let [h, w, d] = self.dims;
        let [_, ow, od] = self.out;
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let ncols = (x1 - x0) * self.plane();
        let mut row = 0;
        for ci in 0..self.cin {
            let gc = &mut gx[ci * h * w * d..(ci + 1) * h * w * d];
            for kx in 0..k {
                for ky in 0..k {
                    for kz in 0..k {
                        let src = &col[row * ncols..(row + 1) * ncols];
                        let mut j = 0;
                        for ox in x0..x1 {
                            let ix = ox as isize * s + kx as isize - p;
                            for oy in 0..ow {
                                let iy = oy as isize * s + ky as isize - p;
                                if ix < 0 || ix >= h as isize || iy < 0 || iy >= w as isize {
                                    j += od;
                                    continue;
                                }
                                let base = (ix as usize * w + iy as usize) * d;
                                for oz in 0..od {
                                    let iz = oz as isize * s + kz as isize - p;
                                    if iz >= 0 && iz < d as isize {
                                        gc[base + iz as usize] += src[j];
                                    }
                                    j += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// Forward convolution. Shapes must already be validated by the caller.
pub fn conv3d_forward<T: Real>(
    x: &[T],
    in_shape: &[usize],
    w: &[T],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, [usize; 3]) {
    let g = Geometry::new(in_shape, k, stride, pad);
    let nv = g.out.iter().product::<usize>();
    let mut out = vec![T::zero(); cout * nv];
    let rows = g.rows();
    if g.is_pointwise() {
        T::gemm(cout, rows, nv, T::one(), w, rows as isize, 1, x, nv as isize, 1, T::zero(), &mut out, nv as isize, 1);
        return (out, g.out);
    }
    let slab = g.slab_rows();
    let mut col = vec![T::zero(); rows * slab * g.plane()];
    let mut x0 = 0;
    while x0 < g.out[0] {
        let x1 = (x0 + slab).min(g.out[0]);
        let ncols = (x1 - x0) * g.plane();
        g.im2col(x, x0, x1, &mut col[..rows * ncols]);
        let off = x0 * g.plane();
        T::gemm(
            cout,
            rows,
            ncols,
            T::one(),
            w,
            rows as isize,
            1,
            &col[..rows * ncols],
            ncols as isize,
            1,
            T::zero(),
            &mut out[off..],
            nv as isize,
            1,
        );
        x0 = x1;
    }
    (out, g.out)
}

/// Returns `(grad_input, grad_weight)`; either may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    x: &[T],
    in_shape: &[usize],
    w: &[T],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gout: &[T],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let g = Geometry::new(in_shape, k, stride, pad);
    let nv = g.out.iter().product::<usize>();
    let rows = g.rows();
    let mut gx = want_input.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_weight.then(|| vec![T::zero(); w.len()]);
    if g.is_pointwise() {
        if let Some(gw) = gw.as_mut() {
            // gw[cout, cin] = gout[cout, v] . x[cin, v]^T
            T::gemm(cout, nv, rows, T::one(), gout, nv as isize, 1, x, 1, nv as isize, T::zero(), gw, rows as isize, 1);
        }
        if let Some(gx) = gx.as_mut() {
            // gx[cin, v] = w^T[cin, cout] . gout[cout, v]
            T::gemm(rows, cout, nv, T::one(), w, 1, rows as isize, gout, nv as isize, 1, T::zero(), gx, nv as isize, 1);
        }
        return (gx, gw);
    }
    let slab = g.slab_rows();
    let mut col = vec![T::zero(); rows * slab * g.plane()];
    let mut x0 = 0;
    while x0 < g.out[0] {
        let x1 = (x0 + slab).min(g.out[0]);
        let ncols = (x1 - x0) * g.plane();
        let off = x0 * g.plane();
        let gslab = &gout[off..];
        if let Some(gw) = gw.as_mut() {
            g.im2col(x, x0, x1, &mut col[..rows * ncols]);
            T::gemm(
                cout,
                ncols,
                rows,
                T::one(),
                gslab,
                nv as isize,
                1,
                &col[..rows * ncols],
                1,
                ncols as isize,
                T::one(),
                gw,
                rows as isize,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let c = &mut col[..rows * ncols];
            T::gemm(
                rows,
                cout,
                ncols,
                T::one(),
                w,
                1,
                rows as isize,
                gslab,
                nv as isize,
                1,
                T::zero(),
                c,
                ncols as isize,
                1,
            );
            g.col2im(c, x0, x1, gx);
        }
        x0 = x1;
    }
    (gx, gw)
}
