//! Dense kernels: GEMM and the im2col / col2im transforms behind conv2d.

use serde::{Deserialize, Serialize};

/// Row-major matrix view with explicit strides, so transposes are free.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = a * b + beta * c` with `c` row-major `[a.rows, b.cols]`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len());
    // SAFETY: every index the kernel touches is bounded by `max_index`,
    // checked above, and `c` holds exactly m*n contiguous row-major values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a * b` into a fresh row-major buffer.
pub fn gemm_new(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len());
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: bounds as in `gemm`. With beta = 0 the kernel only writes C
    // (it never reads it), so every one of the m*n entries is initialized
    // before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the im2col matrix: `C * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.out_pixels() * self.patch_len()) as u64
    }
}

/// Unfolds `x` (`[N, C, H, W]`) into `[C*k*k, N*Ho*Wo]`.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = Vec::with_capacity(g.patch_len() * g.batch * ho * wo);
    let k = g.kernel;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            cols.extend(std::iter::repeat_n(0.0, wo));
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        cols.extend((0..wo).map(|ox| {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < g.width as isize {
                                src_row[ix as usize]
                            } else {
                                0.0
                            }
                        }));
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `[C*k*k, N*Ho*Wo]` back into `dx`.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols_n = g.batch * ho * wo;
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &src_row[(n * ho + oy) * wo..][..wo];
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[O, N*P]` (GEMM output) to `[N, O, P]` (NCHW).
pub fn channel_major_to_nchw(src: &[f64], batch: usize, channels: usize, pixels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(src.len());
    for n in 0..batch {
        for o in 0..channels {
            out.extend_from_slice(&src[(o * batch + n) * pixels..][..pixels]);
        }
    }
    out
}

/// `[N, O, P]` to `[O, N*P]`.
pub fn nchw_to_channel_major(src: &[f64], batch: usize, channels: usize, pixels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(src.len());
    for o in 0..channels {
        for n in 0..batch {
            out.extend_from_slice(&src[(n * channels + o) * pixels..][..pixels]);
        }
    }
    out
}
