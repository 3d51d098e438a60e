//! Convolution inner machinery: row-major dgemm wrapper plus im2col/col2im
//! lowering shared by `Conv2d` and `ConvTranspose2d`.

/// c = a (m×k) · b (k×n) + beta·c, all row-major.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = aᵀ (m×k, stored k×m) · b (k×n) + beta·c.
pub fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = a (m×k) · bᵀ (k×n, stored n×k) + beta·c.
pub fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial geometry of a stride/pad convolution window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let h = (self.h_in + 2 * self.pad - self.kernel) / self.stride + 1;
        let w = (self.w_in + 2 * self.pad - self.kernel) / self.stride + 1;
        (h, w)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        let (h, w) = self.out_hw();
        h * w
    }
}

/// Lower one sample (C, H, W) into a (C·k², Ho·Wo) column matrix.
pub fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.col_cols();
    im2col_strided(input, g, cols, n, 0);
}

/// As [`im2col`], but writing into a wider matrix with leading dimension `ld`
/// starting at column `col_offset`. Used to pack several samples side by side
/// for one batched gemm.
pub fn im2col_strided(input: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize, col_offset: usize) {
    let (h_out, w_out) = g.out_hw();
    debug_assert_eq!(input.len(), g.channels * g.h_in * g.w_in);
    debug_assert_eq!(cols.len(), g.col_rows() * ld);
    let hw_out = h_out * w_out;
    for c in 0..g.channels {
        let plane = &input[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * ld + col_offset..row * ld + col_offset + hw_out];
                let mut idx = 0;
                for oh in 0..h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h_in as isize {
                        dst[idx..idx + w_out].iter_mut().for_each(|v| *v = 0.0);
                        idx += w_out;
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.w_in..(ih as usize + 1) * g.w_in];
                    for ow in 0..w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        dst[idx] = if iw < 0 || iw >= g.w_in as isize {
                            0.0
                        } else {
                            src_row[iw as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add a (C·k², Ho·Wo) column matrix back onto one (C, H, W) sample.
pub fn col2im_add(cols: &[f64], g: &ConvGeom, output: &mut [f64]) {
    let n = g.col_cols();
    col2im_add_strided(cols, g, output, n, 0);
}

/// As [`col2im_add`], reading the sample's columns from a wider matrix with
/// leading dimension `ld` starting at column `col_offset`.
pub fn col2im_add_strided(
    cols: &[f64],
    g: &ConvGeom,
    output: &mut [f64],
    ld: usize,
    col_offset: usize,
) {
    let (h_out, w_out) = g.out_hw();
    debug_assert_eq!(output.len(), g.channels * g.h_in * g.w_in);
    debug_assert_eq!(cols.len(), g.col_rows() * ld);
    let hw_out = h_out * w_out;
    for c in 0..g.channels {
        let plane = &mut output[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * ld + col_offset..row * ld + col_offset + hw_out];
                let mut idx = 0;
                for oh in 0..h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h_in as isize {
                        idx += w_out;
                        continue;
                    }
                    let dst_row =
                        &mut plane[ih as usize * g.w_in..(ih as usize + 1) * g.w_in];
                    for ow in 0..w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w_in as isize {
                            dst_row[iw as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}
