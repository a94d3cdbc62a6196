//! Dense kernels behind the tape: GEMM wrappers and im2col convolution.

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`). Works for offsets larger than `n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// `c[m,n] = a[m,k] * b[k,n] (+ c if accumulate)`, all row-major.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
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

/// `c[m,n] = a[m,k] * b[n,k]^T (+ c)`.
pub fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
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

/// `c[m,n] = a[k,m]^T * b[k,n] (+ c)`.
pub fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source index along one axis for every (kernel tap, output position),
    /// `None` where zero padding applies.
    fn taps(&self, len: usize, out_len: usize) -> Vec<Option<usize>> {
        let mut taps = Vec::with_capacity(self.kernel * out_len);
        for k in 0..self.kernel {
            for o in 0..out_len {
                let i = (o * self.stride + k) as isize - self.pad as isize;
                let src = if i >= 0 && (i as usize) < len {
                    Some(i as usize)
                } else {
                    match self.padding {
                        Padding::Zero => None,
                        Padding::Reflect => Some(reflect_index(i, len)),
                    }
                };
                taps.push(src);
            }
        }
        taps
    }
}

pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    let ytaps = g.taps(g.height, ho);
    let xtaps = g.taps(g.width, wo);
    let mut cols = vec![0.0; g.col_rows() * n];
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let Some(iy) = ytaps[ky * ho + oy] else { continue };
                    let srow = &src[iy * g.width..(iy + 1) * g.width];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        if let Some(ix) = xtaps[kx * wo + ox] {
                            *d = srow[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    let ytaps = g.taps(g.height, ho);
    let xtaps = g.taps(g.width, wo);
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let Some(iy) = ytaps[ky * ho + oy] else { continue };
                    for ox in 0..wo {
                        if let Some(ix) = xtaps[kx * wo + ox] {
                            dst[iy * g.width + ix] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: `w` is `[out, in, k, k]`, result `[out, ho, wo]`.
pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, out_channels: usize, g: &ConvGeom) -> Vec<f64> {
    let n = g.out_height() * g.out_width();
    let mut y = vec![0.0; out_channels * n];
    if let Some(b) = bias {
        for (o, chunk) in y.chunks_mut(n).enumerate() {
            chunk.fill(b[o]);
        }
    }
    let kdim = g.col_rows();
    if g.is_pointwise() {
        gemm(out_channels, kdim, n, w, x, &mut y, bias.is_some());
    } else {
        let cols = im2col(x, g);
        gemm(out_channels, kdim, n, w, &cols, &mut y, bias.is_some());
    }
    y
}
