//! Dense kernels behind the convolution ops.

use core::ops::Range;

/// Upper bound on im2col buffer entries; larger convolutions are tiled by output rows.
pub(crate) const COL_BUDGET: usize = 1 << 22;

/// Row-major matrix operand: `data[i * ld + j]`, read transposed when `trans`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub ld: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], ld: usize) -> Self {
        Self {
            data,
            ld,
            trans: false,
        }
    }

    pub fn t(data: &'a [f64], ld: usize) -> Self {
        Self {
            data,
            ld,
            trans: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n` and `c` has leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Mat<'_>,
    b: Mat<'_>,
    c: &mut [f64],
    ldc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        ldc >= n && c.len() >= (m - 1) * ldc + n,
        "gemm output bounds"
    );
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    let (rows_a, cols_a) = if a.trans { (k, m) } else { (m, k) };
    let (rows_b, cols_b) = if b.trans { (n, k) } else { (k, n) };
    assert!(
        a.ld >= cols_a && a.data.len() >= (rows_a - 1) * a.ld + cols_a,
        "gemm lhs bounds"
    );
    assert!(
        b.ld >= cols_b && b.data.len() >= (rows_b - 1) * b.ld + cols_b,
        "gemm rhs bounds"
    );
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if ph < kernel || pw < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output-row tiles whose im2col buffers fit in [`COL_BUDGET`].
    pub fn row_tiles(&self) -> impl Iterator<Item = Range<usize>> {
        let per = (COL_BUDGET / (self.col_rows() * self.out_w).max(1)).max(1);
        let out_h = self.out_h;
        (0..out_h)
            .step_by(per)
            .map(move |s| s..(s + per).min(out_h))
    }

    /// Max columns of any tile from [`ConvGeom::row_tiles`].
    pub fn tile_cols(&self) -> usize {
        self.row_tiles()
            .map(|r| r.len() * self.out_w)
            .max()
            .unwrap_or(0)
    }

    /// im2col for output rows `rows`. Column matrix rows are `(c, ky, kx)`,
    /// columns `(oy, ox)` within the tile; out-of-image taps read zero.
    pub fn im2col(&self, x: &[f64], rows: Range<usize>, col: &mut [f64]) {
        let cols = rows.len() * self.out_w;
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for (t, oy) in rows.clone().enumerate() {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[t * self.out_w..(t + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates a tile of columns into `x`.
    pub fn col2im(&self, col: &[f64], rows: Range<usize>, x: &mut [f64]) {
        let cols = rows.len() * self.out_w;
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * cols..(row + 1) * cols];
                    for (t, oy) in rows.clone().enumerate() {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst =
                            &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[t * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn gemm_transposes_and_strides() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, Mat::new(&a, 2), Mat::new(&b, 2), &mut c, 2, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, Mat::t(&a, 2), Mat::new(&b, 2), &mut c, 2, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, Mat::new(&a, 2), Mat::t(&b, 2), &mut c, 2, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        // second column of b only, written into the second column of a 2x3 buffer
        let mut wide = [0.0; 6];
        gemm(
            2,
            2,
            1,
            Mat::new(&a, 2),
            Mat::new(&b[1..], 2),
            &mut wide[1..],
            3,
            0.0,
        );
        assert_eq!(wide, [0.0, 22.0, 0.0, 0.0, 50.0, 0.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        g.im2col(&x, 0..g.out_h, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, 0..g.out_h, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn tiles_cover_all_rows() {
        let g = ConvGeom::new(512, 256, 256, 3, 1, 1).unwrap();
        let tiles: Vec<_> = g.row_tiles().collect();
        assert!(tiles.len() > 1);
        assert_eq!(tiles.first().unwrap().start, 0);
        assert_eq!(tiles.last().unwrap().end, 256);
        assert!(tiles.windows(2).all(|w| w[0].end == w[1].start));
        assert!(g.tile_cols() * g.col_rows() <= COL_BUDGET);
    }
}
