//! Raw numeric kernels shared by the ops: strided GEMM and the im2col /
//! col2im transforms behind convolution.

/// General matrix multiply `C ← α·A·B + β·C` over strided operands.
///
/// `A` is `m×k` with row stride `rsa` and column stride `csa`; likewise for
/// `B` (`k×n`) and `C` (`m×n`). Transposes are expressed through strides.
pub trait Gemm: Sized + Copy {
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} out of bounds: {last} >= {len}");
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Gemm for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                (rsa, csa): (usize, usize),
                b: &[Self],
                (rsb, csb): (usize, usize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa, "A");
                check_extent(b.len(), k, n, rsb, csb, "B");
                check_extent(c.len(), m, n, rsc, csc, "C");
                // SAFETY: every index the kernel touches is bounded by the
                // extent checks above, and `c` is uniquely borrowed.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1, stride-1, unpadded conv reads its input as the column matrix
    /// directly.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `[C, H, W]` image into a `[C·kh·kw, H'·W']` column matrix.
pub(crate) fn im2col_into<T: Copy + Default>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let hw_out = g.col_cols();
    let zero = T::default();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        dst_row.fill(zero);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        *d = if x < 0 || x >= g.width as isize {
                            zero
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto a `[C, H, W]` image, summing overlaps.
pub(crate) fn col2im_add<T: Copy + std::ops::Add<Output = T>>(
    cols: &[T],
    g: &ConvGeometry,
    image: &mut [T],
) {
    let hw_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        if x >= 0 && x < g.width as isize {
                            let d = &mut dst[x as usize];
                            *d = *d + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Public im2col over a single `[C, H, W]` image with a square-or-not
/// kernel; returns `(cols, out_h, out_w)`.
pub fn im2col<T: Copy + Default>(
    image: &[T],
    (channels, height, width): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) -> Option<(Vec<T>, usize, usize)> {
    let g = geometry(channels, height, width, kh, kw, stride, padding)?;
    let mut cols = vec![T::default(); g.col_rows() * g.col_cols()];
    im2col_into(image, &g, &mut cols);
    Some((cols, g.out_h, g.out_w))
}

/// Adjoint of [`im2col`]: scatters a column matrix back to image layout.
pub fn col2im<T: Copy + Default + std::ops::Add<Output = T>>(
    cols: &[T],
    (channels, height, width): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) -> Option<Vec<T>> {
    let g = geometry(channels, height, width, kh, kw, stride, padding)?;
    let mut image = vec![T::default(); channels * height * width];
    col2im_add(cols, &g, &mut image);
    Some(image)
}

pub(crate) fn geometry(
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Option<ConvGeometry> {
    if stride == 0 || kh == 0 || kw == 0 {
        return None;
    }
    let ph = height + 2 * padding;
    let pw = width + 2 * padding;
    if kh > ph || kw > pw {
        return None;
    }
    Some(ConvGeometry {
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        padding,
        out_h: (ph - kh) / stride + 1,
        out_w: (pw - kw) / stride + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_operand() {
        // A = [[1,2],[3,4]], B^T stored as [[5,7],[6,8]] -> B = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let bt = [5.0f64, 7.0, 6.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, (2, 1), &bt, (1, 2), 0.0, &mut c, (2, 1));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 5, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let (cols, oh, ow) = im2col(&x, (c, h, w), (3, 2), 2, 1).unwrap();
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let back = col2im(&y, (c, h, w), (3, 2), 2, 1).unwrap();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!((oh, ow), (3, 3));
    }

    #[test]
    fn geometry_rejects_oversized_kernel() {
        assert!(geometry(1, 2, 2, 3, 3, 1, 0).is_none());
        assert!(geometry(1, 2, 2, 3, 3, 1, 1).is_some());
    }
}
