// Raw numeric kernels over row-major f64 buffers. Shapes are validated by callers.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(x)` optionally transposes.
/// `a` is stored as `m x k` (or `k x m` when `ta`), `b` as `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (asserted above) and
    // the strides describe row-major (or transposed row-major) layouts within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || k == 0 || k > h + 2 * padding || k > w + 2 * padding {
            return None;
        }
        let hout = (h + 2 * padding - k) / stride + 1;
        let wout = (w + 2 * padding - k) / stride + 1;
        Some(ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            padding,
            hout,
            wout,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.hout * self.wout
    }
}

/// Unfolds `cin x h x w` into a `(cin*k*k) x (hout*wout)` matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let dst = &mut out[oy * g.wout..(oy + 1) * g.wout];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `cin x h x w`.
pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let cols = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wout + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Windowed pooling geometry over `h x w` planes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub hout: usize,
    pub wout: usize,
}

impl PoolGeom {
    pub fn new(h: usize, w: usize, k: usize, stride: usize) -> Option<Self> {
        if k == 0 || stride == 0 || k > h || k > w {
            return None;
        }
        Some(PoolGeom {
            h,
            w,
            k,
            stride,
            hout: (h - k) / stride + 1,
            wout: (w - k) / stride + 1,
        })
    }
}

/// Max pooling over `planes` consecutive planes; records the flat argmax of each output.
pub(crate) fn max_pool(
    input: &[f64],
    planes: usize,
    g: &PoolGeom,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.hout {
            for ox in 0..g.wout {
                let mut best = f64::NEG_INFINITY;
                let mut at = base;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let idx = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        if input[idx] > best {
                            best = input[idx];
                            at = idx;
                        }
                    }
                }
                let o = (p * g.hout + oy) * g.wout + ox;
                out[o] = best;
                argmax[o] = at;
            }
        }
    }
}

pub(crate) fn avg_pool(input: &[f64], planes: usize, g: &PoolGeom, out: &mut [f64]) {
    let inv = 1.0 / (g.k * g.k) as f64;
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.hout {
            for ox in 0..g.wout {
                let mut s = 0.0;
                for ky in 0..g.k {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    s += input[row..row + g.k].iter().sum::<f64>();
                }
                out[(p * g.hout + oy) * g.wout + ox] = s * inv;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(
    grad_out: &[f64],
    planes: usize,
    g: &PoolGeom,
    grad_in: &mut [f64],
) {
    let inv = 1.0 / (g.k * g.k) as f64;
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.hout {
            for ox in 0..g.wout {
                let go = grad_out[(p * g.hout + oy) * g.wout + ox] * inv;
                for ky in 0..g.k {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    grad_in[row..row + g.k].iter_mut().for_each(|v| *v += go);
                }
            }
        }
    }
}
